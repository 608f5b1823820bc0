#include "qmet/head_spec.hpp"

#include <array>
#include <stdexcept>
#include <utility>

#include "json.hpp"

namespace qmet {

namespace {

constexpr std::array<std::pair<HeadFamily, std::string_view>, 14> kFamilies{{
    {HeadFamily::kIqeSum, "iqe-sum"},
    {HeadFamily::kIqeMaxMean, "iqe-maxmean"},
    {HeadFamily::kPqeLh, "pqe-lh"},
    {HeadFamily::kDeepNormOrig, "deep-norm-orig"},
    {HeadFamily::kDeepNormFixed, "deep-norm-fixed"},
    {HeadFamily::kWideNorm, "wide-norm"},
    {HeadFamily::kMrnOrig, "mrn-orig"},
    {HeadFamily::kMrnFixed, "mrn-fixed"},
    {HeadFamily::kMetricEuclid, "metric-euclid"},
    {HeadFamily::kMetricL1, "metric-l1"},
    {HeadFamily::kMetricSphere, "metric-sphere"},
    {HeadFamily::kMetricMix, "metric-mix"},
    {HeadFamily::kAsymDot, "asym-dot"},
    {HeadFamily::kUnconstrained, "unconstrained"},
}};

constexpr std::array<std::pair<OutputTransform, std::string_view>, 5> kTransforms{{
    {OutputTransform::kDirect, "direct"},
    {OutputTransform::kExp, "exp"},
    {OutputTransform::kSquare, "square"},
    {OutputTransform::kDiscounted, "discounted"},
    {OutputTransform::kSigmoidDiscounted, "sigmoid-discounted"},
}};

}  // namespace

std::string_view to_string(HeadFamily family) {
  for (const auto& [f, name] : kFamilies)
    if (f == family) return name;
  return "unknown";
}

std::string_view to_string(OutputTransform transform) {
  for (const auto& [t, name] : kTransforms)
    if (t == transform) return name;
  return "unknown";
}

HeadFamily parse_head_family(std::string_view tag) {
  for (const auto& [f, name] : kFamilies)
    if (name == tag) return f;
  throw std::invalid_argument("unknown head family '" + std::string(tag) + "'");
}

OutputTransform parse_output_transform(std::string_view tag) {
  for (const auto& [t, name] : kTransforms)
    if (name == tag) return t;
  throw std::invalid_argument("unknown output transform '" + std::string(tag) + "'");
}

const std::vector<HeadFamily>& all_head_families() {
  static const std::vector<HeadFamily> all = [] {
    std::vector<HeadFamily> v;
    for (const auto& entry : kFamilies) v.push_back(entry.first);
    return v;
  }();
  return all;
}

bool is_latent_quasimetric(HeadFamily f) {
  switch (f) {
    case HeadFamily::kIqeSum:
    case HeadFamily::kIqeMaxMean:
    case HeadFamily::kPqeLh:
    case HeadFamily::kDeepNormFixed:
    case HeadFamily::kWideNorm:
    case HeadFamily::kMrnFixed:
      return true;
    default:
      return false;
  }
}

bool is_latent_head(HeadFamily f) {
  return is_latent_quasimetric(f) || f == HeadFamily::kDeepNormOrig ||
         f == HeadFamily::kMrnOrig;
}

bool is_metric_head(HeadFamily f) {
  return f == HeadFamily::kMetricEuclid || f == HeadFamily::kMetricL1 ||
         f == HeadFamily::kMetricSphere || f == HeadFamily::kMetricMix;
}

bool is_pair_baseline(HeadFamily f) {
  return f == HeadFamily::kAsymDot || f == HeadFamily::kUnconstrained;
}

bool is_positively_homogeneous(HeadFamily f) {
  switch (f) {
    case HeadFamily::kIqeSum:
    case HeadFamily::kIqeMaxMean:
    case HeadFamily::kDeepNormOrig:
    case HeadFamily::kDeepNormFixed:
    case HeadFamily::kWideNorm:
    case HeadFamily::kMrnFixed:
    case HeadFamily::kMetricEuclid:
    case HeadFamily::kMetricL1:
      return true;
    default:
      return false;
  }
}

void HeadSpec::validate() const {
  if (k == 0 || l == 0) throw std::invalid_argument("head.k and head.l must be >= 1");
  if (family == HeadFamily::kDeepNormOrig || family == HeadFamily::kDeepNormFixed) {
    if (layers == 0) throw std::invalid_argument("head.layers must be >= 1");
    if (hidden == 0 || hidden % 2 != 0)
      throw std::invalid_argument("head.hidden must be a positive even number for deep norm");
  }
  if ((family == HeadFamily::kMrnOrig || family == HeadFamily::kMrnFixed) && hidden == 0)
    throw std::invalid_argument("head.hidden must be >= 1 for mrn");
  if (family == HeadFamily::kWideNorm && (components == 0 || component_size == 0))
    throw std::invalid_argument("head.components and head.component_size must be >= 1");
  if ((transform == OutputTransform::kDiscounted ||
       transform == OutputTransform::kSigmoidDiscounted) &&
      !(gamma > 0.0 && gamma < 1.0))
    throw std::invalid_argument("head.gamma must lie in (0, 1)");
}

std::string to_json(const HeadSpec& spec) {
  nlohmann::ordered_json j;
  j["family"] = std::string(to_string(spec.family));
  j["k"] = spec.k;
  j["l"] = spec.l;
  j["hidden"] = spec.hidden;
  j["layers"] = spec.layers;
  j["components"] = spec.components;
  j["component_size"] = spec.component_size;
  j["transform"] = std::string(to_string(spec.transform));
  j["gamma"] = spec.gamma;
  return j.dump();
}

HeadSpec head_spec_from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  HeadSpec spec;
  spec.family = parse_head_family(j.at("family").get<std::string>());
  spec.k = j.value("k", spec.k);
  spec.l = j.value("l", spec.l);
  spec.hidden = j.value("hidden", spec.hidden);
  spec.layers = j.value("layers", spec.layers);
  spec.components = j.value("components", spec.components);
  spec.component_size = j.value("component_size", spec.component_size);
  spec.transform = parse_output_transform(j.value("transform", std::string("direct")));
  spec.gamma = j.value("gamma", spec.gamma);
  spec.validate();
  return spec;
}

}  // namespace qmet
