#include "qmet/config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace qmet::cfg {

namespace {

struct KeyInfo {
  const char* key;
  const char* fallback;
  bool grid;  // may hold a comma-separated list that expands into cells
  const char* doc;
};

// Every accepted key with its default. Order here is the order of
// --print-defaults and of grid expansion.
constexpr std::array<KeyInfo, 45> kKeys{{
    {"experiment.kind", "graph", false, "graph | gridworld | audit | ablate-kl | profile"},
    {"experiment.seeds", "1,2,3,4,5", false, "seed list; every cell runs once per seed"},
    {"experiment.out", "runs", false, "output directory"},
    {"experiment.jobs", "1", false, "worker threads for independent runs"},
    {"head.family", "iqe-sum", true, "head family tag, list, or all (lists expand the grid)"},
    {"head.k", "4", false, "latent components"},
    {"head.l", "12", false, "latent component size"},
    {"head.hidden", "48", false, "deep norm / mrn width"},
    {"head.layers", "3", false, "deep norm depth"},
    {"head.components", "12", false, "wide norm components"},
    {"head.component_size", "11", false, "wide norm component size"},
    {"head.transform", "direct", true,
     "pair-baseline output: direct | exp | square | discounted | sigmoid-discounted"},
    {"head.gamma", "0.9", false, "discount for the discounted output transforms (unset: train.gamma)"},
    {"encoder.hidden", "128,128,128", false, "hidden layer widths"},
    {"encoder.feature_norm", "false", false, "normalization after each hidden activation"},
    {"train.epochs", "50", false, "passes over the training pairs"},
    {"train.batch_size", "2048", false, "pairs per step"},
    {"train.lr", "1e-3", true, "base learning rate (cosine decay to 0)"},
    {"train.gamma", "0.9", false, "discount of the regression targets"},
    {"train.reg_weight", "0", true, "triangle regularizer weight (pair baselines only)"},
    {"train.triplets", "0", false, "regularizer triples per step (0: batch_size / 3)"},
    {"train.eval_every", "0", false, "validation every n epochs (0: last epoch only)"},
    {"graph.kind", "dense", false, "dense | sparse | sparse-block"},
    {"graph.nodes", "300", false, "node count"},
    {"graph.train_fraction", "0.1", true, "fraction of the n^2 ordered pairs used for training"},
    {"graph.feature_dim", "64", false, "Gaussian node feature dimension"},
    {"gridworld.width", "8", false, "grid width"},
    {"gridworld.height", "8", false, "grid height"},
    {"gridworld.doors", "2", false, "one-way doors in the dividing wall"},
    {"gridworld.trajectories", "128", true, "offline trajectories"},
    {"gridworld.epsilon", "0.6", false, "collection policy randomness"},
    {"gridworld.episode_cap", "200", false, "collection episode length cap"},
    {"gridworld.goals", "50", false, "planning evaluation goals"},
    {"gridworld.plan_cap", "300", false, "planning episode length cap"},
    {"gridworld.average_goal_actions", "true", false,
     "plan on the mean over goal actions (false: single goal action)"},
    {"gridworld.goal_action", "0", false, "goal action when not averaging"},
    {"audit.pairs", "10000", false, "pairs for identity / symmetry / homogeneity"},
    {"audit.triples", "100000", false, "triples for the triangle inequality"},
    {"audit.witness_budget", "100000", false, "samples per witness search"},
    {"audit.witness_seeds", "20", false, "seeded inits per witness search"},
    {"audit.witness_k", "1", false, "witness-search head k"},
    {"audit.witness_l", "4", false, "witness-search head l"},
    {"audit.witness_hidden", "4", false, "witness-search deep norm / mrn width"},
    {"ablate.total_dim", "48", false, "fixed latent size k * l"},
    {"ablate.k", "4,6,8,12", true, "component counts (each must divide total_dim)"},
}};

constexpr std::array<const char*, 1> kExtraKeys{"profile.scales"};

const KeyInfo* find_key(std::string_view key) {
  for (const KeyInfo& k : kKeys)
    if (k.key == key) return &k;
  return nullptr;
}

bool is_run_control(const std::string& key) {
  return key == "experiment.seeds" || key == "experiment.out" || key == "experiment.jobs";
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = s.find(',', start);
    out.push_back(trim(s.substr(start, comma == std::string_view::npos ? s.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

std::size_t to_size(const std::string& field, const std::string& v, bool allow_zero = false) {
  std::size_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || (!allow_zero && out == 0)) {
    throw ConfigError(field, std::string("expected a ") + (allow_zero ? "non-negative" : "positive") +
                                 " integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& field, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError(field, "expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& field, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError(field, "expected true or false, got '" + v + "'");
}

}  // namespace

std::string_view to_string(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::kGraph: return "graph";
    case ExperimentKind::kGridworld: return "gridworld";
    case ExperimentKind::kAudit: return "audit";
    case ExperimentKind::kAblateKl: return "ablate-kl";
    case ExperimentKind::kProfile: return "profile";
  }
  return "unknown";
}

ConfigDoc ConfigDoc::parse(std::string_view text) {
  ConfigDoc doc;
  std::string section;
  std::size_t line_no = 0;
  std::istringstream in{std::string(text)};
  std::string raw;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where, "unterminated section header");
      section = trim(std::string_view(line).substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where, "expected key = value");
    std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.find('.') == std::string::npos) {
      if (section.empty()) throw ConfigError(where, "key '" + key + "' outside any section");
      key = section + "." + key;
    }
    std::string value = trim(std::string_view(line).substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    doc.set(key, split_list(value));
  }
  return doc;
}

ConfigDoc ConfigDoc::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", "cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string ConfigDoc::defaults_text() {
  std::ostringstream os;
  std::string section;
  for (const KeyInfo& k : kKeys) {
    const std::string key = k.key;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << k.fallback << "  # " << k.doc << '\n';
  }
  os << "\n[profile]\nscales = 0,0.25,0.5,1,2,4,8,16  # latent scale grid for profile runs\n";
  return os.str();
}

void ConfigDoc::set(const std::string& key, std::vector<std::string> values) {
  const KeyInfo* info = find_key(key);
  const bool extra = std::find_if(kExtraKeys.begin(), kExtraKeys.end(), [&](const char* k) {
                       return key == k;
                     }) != kExtraKeys.end();
  if (!info && !extra) throw ConfigError(key, "unknown key");
  if (values.empty() || std::any_of(values.begin(), values.end(), [](const auto& v) { return v.empty(); }))
    throw ConfigError(key, "empty value");
  const bool list_ok = extra || info->grid || key == "experiment.seeds" || key == "encoder.hidden";
  if (values.size() > 1 && !list_ok) throw ConfigError(key, "does not accept a list");
  if (key == "head.family" && values == std::vector<std::string>{"all"}) {
    values.clear();
    for (HeadFamily f : all_head_families()) values.emplace_back(to_string(f));
  }
  values_[key] = std::move(values);
}

const std::vector<std::string>& ConfigDoc::get(const std::string& key) const {
  static std::map<std::string, std::vector<std::string>> fallbacks = [] {
    std::map<std::string, std::vector<std::string>> m;
    for (const KeyInfo& k : kKeys) m[k.key] = split_list(k.fallback);
    m["profile.scales"] = split_list("0,0.25,0.5,1,2,4,8,16");
    return m;
  }();
  const auto it = values_.find(key);
  if (it != values_.end()) return it->second;
  const auto fb = fallbacks.find(key);
  if (fb == fallbacks.end()) throw ConfigError(key, "unknown key");
  return fb->second;
}

std::vector<std::string> ConfigDoc::grid_keys() const {
  std::vector<std::string> keys;
  const bool ablate = get("experiment.kind").front() == "ablate-kl";
  for (const KeyInfo& k : kKeys) {
    if (!k.grid) continue;
    // ablate.k spans cells for ablations (even with one entry) and is inert
    // for every other kind.
    const bool is_ablate_k = std::string_view(k.key) == "ablate.k";
    if (is_ablate_k && !ablate) continue;
    if (get(k.key).size() > 1 || is_ablate_k) keys.push_back(k.key);
  }
  return keys;
}

std::vector<ConfigDoc> ConfigDoc::expand() const {
  std::vector<ConfigDoc> cells{*this};
  for (const std::string& key : grid_keys()) {
    std::vector<ConfigDoc> next;
    for (const ConfigDoc& base : cells) {
      for (const std::string& v : get(key)) {
        ConfigDoc d = base;
        d.values_[key] = {v};
        next.push_back(std::move(d));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

std::string ConfigDoc::canonical() const {
  std::map<std::string, std::string> flat;
  for (const KeyInfo& k : kKeys) {
    if (is_run_control(k.key)) continue;
    std::string joined;
    for (const auto& v : get(k.key)) joined += (joined.empty() ? "" : ",") + v;
    flat[k.key] = joined;
  }
  std::string joined;
  for (const auto& v : get("profile.scales")) joined += (joined.empty() ? "" : ",") + v;
  flat["profile.scales"] = joined;
  std::string out;
  for (const auto& [k, v] : flat) out += k + "=" + v + "\n";
  return out;
}

std::string ConfigDoc::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig ConfigDoc::resolve() const {
  ExperimentConfig c;
  auto one = [&](const char* key) -> const std::string& {
    const auto& v = get(key);
    if (v.size() != 1) throw ConfigError(key, "expected a single value in a resolved cell");
    return v.front();
  };
  auto size = [&](const char* key, bool allow_zero = false) { return to_size(key, one(key), allow_zero); };
  auto real = [&](const char* key) { return to_double(key, one(key)); };
  auto flag = [&](const char* key) { return to_bool(key, one(key)); };

  const std::string& kind = one("experiment.kind");
  if (kind == "graph") c.kind = ExperimentKind::kGraph;
  else if (kind == "gridworld") c.kind = ExperimentKind::kGridworld;
  else if (kind == "audit") c.kind = ExperimentKind::kAudit;
  else if (kind == "ablate-kl") c.kind = ExperimentKind::kAblateKl;
  else if (kind == "profile") c.kind = ExperimentKind::kProfile;
  else throw ConfigError("experiment.kind", "unknown kind '" + kind + "'");

  c.seeds.clear();
  for (const auto& s : get("experiment.seeds")) c.seeds.push_back(to_size("experiment.seeds", s, true));
  if (c.seeds.empty()) throw ConfigError("experiment.seeds", "seed list is empty");
  c.out = one("experiment.out");
  c.jobs = size("experiment.jobs");

  HeadSpec& h = c.model.head;
  try {
    h.family = parse_head_family(one("head.family"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("head.family", e.what());
  }
  try {
    h.transform = parse_output_transform(one("head.transform"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("head.transform", e.what());
  }
  h.k = size("head.k");
  h.l = size("head.l");
  h.hidden = size("head.hidden");
  h.layers = size("head.layers");
  h.components = size("head.components");
  h.component_size = size("head.component_size");
  h.gamma = real("head.gamma");

  c.model.hidden.clear();
  for (const auto& w : get("encoder.hidden")) c.model.hidden.push_back(to_size("encoder.hidden", w));
  c.model.feature_norm = flag("encoder.feature_norm");

  train::TrainConfig& t = c.train;
  t.epochs = size("train.epochs");
  t.batch_size = size("train.batch_size");
  t.lr = real("train.lr");
  t.gamma = real("train.gamma");
  t.reg_weight = real("train.reg_weight");
  t.triplets = size("train.triplets", true);
  t.eval_every = size("train.eval_every", true);

  try {
    c.graph.kind = graphs::parse_graph_kind(one("graph.kind"));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("graph.kind", e.what());
  }
  c.graph.nodes = size("graph.nodes");
  c.graph.train_fraction = real("graph.train_fraction");
  c.graph.feature_dim = size("graph.feature_dim");

  GridParams& g = c.grid;
  g.width = size("gridworld.width");
  g.height = size("gridworld.height");
  g.doors = size("gridworld.doors");
  g.trajectories = size("gridworld.trajectories");
  g.epsilon = real("gridworld.epsilon");
  g.episode_cap = size("gridworld.episode_cap");
  g.goals = size("gridworld.goals");
  g.plan_cap = size("gridworld.plan_cap");
  g.average_goal_actions = flag("gridworld.average_goal_actions");
  g.goal_action = size("gridworld.goal_action", true);

  AuditParams& a = c.audit;
  a.pairs = size("audit.pairs");
  a.triples = size("audit.triples");
  a.witness_budget = size("audit.witness_budget");
  a.witness_seeds = size("audit.witness_seeds");
  a.witness_k = size("audit.witness_k");
  a.witness_l = size("audit.witness_l");
  a.witness_hidden = size("audit.witness_hidden");

  c.ablate.total_dim = size("ablate.total_dim");
  if (c.kind == ExperimentKind::kAblateKl) c.ablate.k = size("ablate.k");

  c.profile.scales.clear();
  for (const auto& s : get("profile.scales")) c.profile.scales.push_back(to_double("profile.scales", s));

  // The discounted output transforms invert the training discount unless a
  // separate head.gamma is given.
  if (!has("head.gamma")) h.gamma = t.gamma;

  // Cross-field checks, reported against the most specific field.
  if (c.kind == ExperimentKind::kAblateKl) {
    if (c.ablate.total_dim % c.ablate.k != 0)
      throw ConfigError("ablate.k", std::to_string(c.ablate.k) + " does not divide ablate.total_dim " +
                                        std::to_string(c.ablate.total_dim));
    h.k = c.ablate.k;
    h.l = c.ablate.total_dim / c.ablate.k;
  }
  if (c.kind == ExperimentKind::kGridworld) {
    c.model.feature_dim = g.width + g.height;
    c.model.slots = 4;
    if (g.goal_action >= 4) throw ConfigError("gridworld.goal_action", "must lie in [0, 3]");
    if (!(g.epsilon >= 0.0 && g.epsilon <= 1.0)) throw ConfigError("gridworld.epsilon", "must lie in [0, 1]");
  } else {
    c.model.feature_dim = c.graph.feature_dim;
  }
  if (!(c.graph.train_fraction > 0.0 && c.graph.train_fraction < 1.0))
    throw ConfigError("graph.train_fraction", "must lie in (0, 1)");
  if (!(t.gamma > 0.0 && t.gamma < 1.0)) throw ConfigError("train.gamma", "must lie in (0, 1)");
  if (!(t.lr > 0.0)) throw ConfigError("train.lr", "must be > 0");
  if (!(t.reg_weight >= 0.0)) throw ConfigError("train.reg_weight", "must be >= 0");
  try {
    h.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("head", e.what());
  }
  return c;
}

}  // namespace qmet::cfg
