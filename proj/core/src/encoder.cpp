#include "qmet/encoder.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "qmet/random.hpp"

namespace qmet::enc {

using diff::Shape;

void EncoderSpec::validate() const {
  if (input_dim == 0 || output_dim == 0)
    throw std::invalid_argument("encoder: input and output dims must be >= 1");
  if (hidden.empty()) throw std::invalid_argument("encoder: need at least one hidden layer");
  for (std::size_t h : hidden)
    if (h == 0) throw std::invalid_argument("encoder: hidden sizes must be >= 1");
  if (!(norm_momentum > 0.0 && norm_momentum <= 1.0))
    throw std::invalid_argument("encoder: norm momentum must lie in (0, 1]");
}

Encoder::Encoder(EncoderSpec spec, ParamStore& store, std::uint64_t seed, const std::string& name)
    : spec_(std::move(spec)), seed_(seed), store_(&store) {
  spec_.validate();
  Rng rng(seed);
  std::vector<std::size_t> sizes{spec_.input_dim};
  sizes.insert(sizes.end(), spec_.hidden.begin(), spec_.hidden.end());
  sizes.push_back(spec_.output_dim);
  for (std::size_t layer = 0; layer + 1 < sizes.size(); ++layer) {
    const std::size_t fan_in = sizes[layer];
    const std::size_t fan_out = sizes[layer + 1];
    const double w_bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    const double b_bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Array w(Shape{fan_in, fan_out});
    for (double& x : w.values()) x = rng.uniform(-w_bound, w_bound);
    Array b(Shape{fan_out});
    for (double& x : b.values()) x = rng.uniform(-b_bound, b_bound);
    const std::string tag = name + ".L" + std::to_string(layer);
    weights_.push_back(store.add(tag + ".W", std::move(w)));
    biases_.push_back(store.add(tag + ".b", std::move(b)));
    const bool hidden_layer = layer + 2 < sizes.size();
    if (hidden_layer && spec_.feature_norm) {
      gains_.push_back(store.add(tag + ".gain", Array(Shape{fan_out}, 1.0)));
      shifts_.push_back(store.add(tag + ".shift", Array(Shape{fan_out}, 0.0)));
      stats_.push_back(NormStats{Array(Shape{fan_out}, 0.0), Array(Shape{fan_out}, 1.0)});
    }
  }
}

std::vector<ParamId> Encoder::param_ids() const {
  std::vector<ParamId> ids;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    ids.push_back(weights_[i]);
    ids.push_back(biases_[i]);
    if (i < gains_.size()) {
      ids.push_back(gains_[i]);
      ids.push_back(shifts_[i]);
    }
  }
  return ids;
}

Var Encoder::encode(Tape& tape, Var x, Mode mode) {
  const Shape& s = tape.shape(x);
  if (s.size() != 2 || s[1] != spec_.input_dim) {
    throw std::invalid_argument("encoder: expected [B, " + std::to_string(spec_.input_dim) +
                                "] input, got " + diff::shape_string(s));
  }
  const std::size_t batch = s[0];
  Var h = x;
  for (std::size_t layer = 0; layer < weights_.size(); ++layer) {
    h = tape.add(tape.matmul(h, tape.param(*store_, weights_[layer])),
                 tape.param(*store_, biases_[layer]));
    const bool last = layer + 1 == weights_.size();
    if (last) break;
    h = tape.relu(h);
    if (!spec_.feature_norm) continue;

    NormStats& st = stats_[layer];
    const std::size_t width = tape.shape(h)[1];
    Var centered{};
    Var inv_std{};
    if (mode == Mode::kTrain) {
      const Var mean = tape.mean_reduce(h, 0);
      centered = tape.sub(h, mean);
      const Var var = tape.mean_reduce(tape.square(centered), 0);
      inv_std = tape.div(tape.scalar(1.0), tape.sqrt(tape.affine(var, 1.0, spec_.norm_eps)));
      const double m = spec_.norm_momentum;
      const double unbias =
          batch > 1 ? static_cast<double>(batch) / static_cast<double>(batch - 1) : 1.0;
      const auto mv = tape.value(mean).values();
      const auto vv = tape.value(var).values();
      for (std::size_t j = 0; j < width; ++j) {
        st.running_mean[j] = (1.0 - m) * st.running_mean[j] + m * mv[j];
        st.running_var[j] = (1.0 - m) * st.running_var[j] + m * vv[j] * unbias;
      }
    } else {
      centered = tape.sub(h, tape.constant(st.running_mean));
      Array inv(Shape{width});
      for (std::size_t j = 0; j < width; ++j)
        inv[j] = 1.0 / std::sqrt(st.running_var[j] + spec_.norm_eps);
      inv_std = tape.constant(std::move(inv));
    }
    h = tape.add(tape.mul(tape.mul(centered, inv_std), tape.param(*store_, gains_[layer])),
                 tape.param(*store_, shifts_[layer]));
  }
  (void)batch;
  return h;
}

namespace {

void write_array(std::ofstream& os, const Array& a) {
  os.write(reinterpret_cast<const char*>(a.values().data()),
           static_cast<std::streamsize>(a.size() * sizeof(double)));
}

void read_array(std::ifstream& is, Array& a) {
  is.read(reinterpret_cast<char*>(a.values().data()),
          static_cast<std::streamsize>(a.size() * sizeof(double)));
  if (!is) throw std::runtime_error("encoder: truncated parameter file");
}

nlohmann::json spec_json(const EncoderSpec& s) {
  return {{"input_dim", s.input_dim},   {"hidden", s.hidden},
          {"output_dim", s.output_dim}, {"feature_norm", s.feature_norm},
          {"norm_momentum", s.norm_momentum}, {"norm_eps", s.norm_eps}};
}

}  // namespace

void Encoder::save(const std::filesystem::path& path, std::size_t step) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("encoder: cannot write " + path.string());
  for (ParamId id : param_ids()) write_array(os, store_->value(id));
  for (const NormStats& st : stats_) {
    write_array(os, st.running_mean);
    write_array(os, st.running_var);
  }
  nlohmann::json side = {{"spec", spec_json(spec_)}, {"seed", seed_}, {"step", step}};
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << '\n';
}

std::size_t Encoder::load(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js) throw std::runtime_error("encoder: missing sidecar for " + path.string());
  const auto side = nlohmann::json::parse(js);
  if (side.at("spec") != spec_json(spec_))
    throw std::invalid_argument("encoder: sidecar spec does not match this encoder");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("encoder: cannot read " + path.string());
  for (ParamId id : param_ids()) read_array(is, store_->value(id));
  for (NormStats& st : stats_) {
    read_array(is, st.running_mean);
    read_array(is, st.running_var);
  }
  return side.at("step").get<std::size_t>();
}

}  // namespace qmet::enc
