#include "qmet/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "qmet/csv.hpp"
#include "qmet/graphs.hpp"
#include "qmet/gridworld.hpp"
#include "qmet/heads.hpp"
#include "qmet/model.hpp"
#include "qmet/random.hpp"
#include "qmet/theory.hpp"
#include "qmet/trainer.hpp"

namespace qmet::exp {

namespace {

using json = nlohmann::ordered_json;
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct RunContext {
  const cfg::ExperimentConfig& config;
  std::uint64_t seed;
  fs::path dir;
  RunRecord& record;

  void put(std::string name, double value) { record.metrics.emplace_back(std::move(name), value); }
};

void put_metrics(RunContext& ctx, const std::string& prefix, const train::MetricsRecord& m) {
  ctx.put(prefix + "_mse", m.mse);
  ctx.put(prefix + "_mse_e3", m.mse_e3());
  ctx.put(prefix + "_l1_finite", m.l1_finite);
  ctx.put(prefix + "_pred_inf", m.pred_inf);
  ctx.put(prefix + "_overflow", m.overflow ? 1.0 : 0.0);
}

void run_graph(RunContext& ctx) {
  const auto& c = ctx.config;
  const auto g = graphs::generate_graph(c.graph.kind, c.graph.nodes, ctx.seed);
  const auto oracle = graphs::all_pairs_distances(g);
  const auto data =
      graphs::build_dataset(oracle, c.graph.feature_dim, c.graph.train_fraction, c.train.gamma, ctx.seed);
  model::Model m(c.model, ctx.seed);
  train::TrainConfig tc = c.train;
  tc.seed = ctx.seed;
  const auto result = train::train(m, data, tc);
  train::write_metrics_csv(ctx.dir / "metrics.csv", result.history);
  if (c.kind == cfg::ExperimentKind::kAblateKl) {
    ctx.put("k", static_cast<double>(c.model.head.k));
    ctx.put("l", static_cast<double>(c.model.head.l));
  }
  put_metrics(ctx, "val", result.final_val);
  put_metrics(ctx, "train", result.final_train);
  ctx.put("val_n_inf", static_cast<double>(result.final_val.n_inf));
  ctx.put("head_params", static_cast<double>(m.head_param_count()));
  ctx.put("steps", static_cast<double>(result.steps));
  ctx.put("skipped_steps", static_cast<double>(result.skipped_steps));
  if (result.diverged) ctx.record.status = "diverged";
}

void run_gridworld(RunContext& ctx) {
  const auto& c = ctx.config;
  const auto& p = c.grid;
  const grid::GridWorld world(grid::make_door_world(p.width, p.height, p.doors, ctx.seed));
  const auto oracle = grid::groundtruth_qmet(world);
  const auto data = grid::collect_offline(world, oracle, p.trajectories, p.epsilon, p.episode_cap, ctx.seed);
  {
    std::ofstream os(ctx.dir / "world.json");
    os << world.spec().to_json() << '\n';
  }

  model::Model m(c.model, ctx.seed);
  grid::QLearnConfig qc;
  qc.epochs = c.train.epochs;
  qc.batch_size = c.train.batch_size;
  qc.lr = c.train.lr;
  qc.gamma = c.train.gamma;
  qc.seed = ctx.seed;
  const auto result = grid::q_learn(m, world, data, qc);

  csv::Writer w(ctx.dir / "metrics.csv", {"epoch", "split", "mse", "l1_finite", "pred_inf", "lr", "loss"});
  const std::size_t per_epoch = qc.epochs ? result.steps / qc.epochs : 0;
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e) {
    const double lr = train::cosine_lr(e * per_epoch, result.steps, qc.lr);
    w.row({std::to_string(e), "train", "nan", "nan", "nan", csv::format_double(lr),
           csv::format_double(result.epoch_loss[e])});
  }

  const auto planned = grid::plan_greedy(
      world, grid::plan_table_from_model(m, world, p.average_goal_actions, p.goal_action), p.goals,
      p.plan_cap, ctx.seed);
  const auto reference =
      grid::plan_greedy(world, grid::plan_table_from_oracle(world, oracle), p.goals, p.plan_cap, ctx.seed);
  ctx.put("success_rate", planned.success_rate);
  ctx.put("mean_steps", planned.mean_steps);
  ctx.put("oracle_success_rate", reference.success_rate);
  ctx.put("oracle_mean_steps", reference.mean_steps);
  ctx.put("final_loss", result.final_loss);
  ctx.put("states", static_cast<double>(world.num_states()));
  ctx.put("transitions", static_cast<double>(data.transitions()));
  ctx.put("asymmetric", grid::has_asymmetry(oracle) ? 1.0 : 0.0);
  ctx.put("head_params", static_cast<double>(m.head_param_count()));
  if (result.diverged) ctx.record.status = "diverged";
}

json witness_json(const theory::Witness& w) {
  json points = json::array();
  for (const auto& pt : w.points) points.push_back(std::vector<double>(pt.data().begin(), pt.data().end()));
  return {{"seed", w.seed}, {"value", w.value}, {"samples_tried", w.samples_tried}, {"points", points}};
}

void run_audit(RunContext& ctx) {
  const auto& c = ctx.config;
  const HeadSpec& spec = c.model.head;
  theory::AuditCounts counts;
  counts.pairs = c.audit.pairs;
  counts.triples = c.audit.triples;
  const auto report = theory::audit_family(spec, ctx.seed, counts);
  ctx.put("head_params", static_cast<double>(report.head_params));
  ctx.put("identity_residual", report.identity_residual);
  ctx.put("triangle_violation", report.triangle_violation);
  ctx.put("min_value", report.min_value);
  ctx.put("symmetry_residual", report.symmetry_residual);
  for (std::size_t i = 0; i < counts.alphas.size(); ++i)
    ctx.put("homogeneity_a" + csv::format_double(counts.alphas[i]), report.homogeneity_residual.at(i));
  ctx.put("satisfies_constraints", report.satisfies_constraints() ? 1.0 : 0.0);
  ctx.put("homogeneous", report.homogeneous() ? 1.0 : 0.0);

  // Searches for the failure modes of the original Deep Norm / MRN, and the
  // same searches on the fixed variants as a control.
  const bool deep = spec.family == HeadFamily::kDeepNormOrig || spec.family == HeadFamily::kDeepNormFixed;
  const bool mrn = spec.family == HeadFamily::kMrnOrig || spec.family == HeadFamily::kMrnFixed;
  if (!deep && !mrn) return;
  HeadSpec small = spec;
  small.k = c.audit.witness_k;
  small.l = c.audit.witness_l;
  small.hidden = c.audit.witness_hidden;
  theory::SearchConfig search;
  search.budget = c.audit.witness_budget;
  std::size_t found = 0;
  double best = 0.0;
  json witnesses = json::array();
  for (std::size_t i = 0; i < c.audit.witness_seeds; ++i) {
    const std::uint64_t s = ctx.seed * c.audit.witness_seeds + i;
    const auto w = deep ? theory::find_negativity_witness(small, s, search)
                        : theory::find_triangle_witness(small, s, search);
    if (!w) continue;
    ++found;
    best = deep ? std::min(best, w->value) : std::max(best, w->value);
    witnesses.push_back(witness_json(*w));
  }
  ctx.put("witness_found", static_cast<double>(found));
  ctx.put("witness_seeds", static_cast<double>(c.audit.witness_seeds));
  ctx.put("witness_best", best);
  if (mrn) {
    const auto col = theory::mrn_collinear_witness(spec.family);
    ctx.put("collinear_d01", col.d01);
    ctx.put("collinear_d12", col.d12);
    ctx.put("collinear_d02", col.d02);
    ctx.put("collinear_violated", col.violated() ? 1.0 : 0.0);
  }
  json doc = {{"search", deep ? "negativity" : "triangle"},
              {"head", json::parse(to_json(small))},
              {"witnesses", witnesses}};
  std::ofstream(ctx.dir / "witnesses.json") << doc.dump(2) << '\n';
}

void run_profile(RunContext& ctx) {
  const auto& c = ctx.config;
  const HeadSpec& spec = c.model.head;
  if (!is_latent_head(spec.family) && !is_metric_head(spec.family))
    throw std::invalid_argument("profile needs a latent or metric head, got " +
                                std::string(to_string(spec.family)));
  diff::ParamStore store;
  const heads::LatentHead head(spec, store, ctx.seed);
  Rng rng(derive_seed(ctx.seed, 81));
  std::vector<double> u0(spec.latent_dim()), v0(spec.latent_dim());
  for (auto& x : u0) x = rng.normal();
  for (auto& x : v0) x = rng.normal();
  const auto& scales = c.profile.scales;
  const auto rows = heads::profile_head(head, u0, v0, scales);

  std::vector<std::string> header{"scale", "distance"};
  const std::size_t n_comp = rows.empty() ? 0 : rows.front().components.size();
  for (std::size_t i = 0; i < n_comp; ++i) header.push_back("c" + std::to_string(i));
  csv::Writer w(ctx.dir / "profile.csv", header);
  for (const auto& r : rows) {
    std::vector<std::string> f{csv::format_double(r.scale), csv::format_double(r.distance)};
    for (double v : r.components) f.push_back(csv::format_double(v));
    w.row(f);
  }

  // Deviation from the line through the origin and the largest-scale point.
  double residual = 0.0;
  const auto last = std::max_element(rows.begin(), rows.end(),
                                     [](const auto& a, const auto& b) { return a.scale < b.scale; });
  if (last != rows.end() && last->scale > 0.0 && last->distance != 0.0) {
    for (const auto& r : rows) {
      const double line = r.scale / last->scale * last->distance;
      residual = std::max(residual, std::abs(r.distance - line) / std::abs(last->distance));
    }
  }
  double at_zero = kNaN;
  for (const auto& r : rows)
    if (r.scale == 0.0) at_zero = r.distance;
  ctx.put("distance_at_zero", at_zero);
  ctx.put("distance_at_max", last == rows.end() ? kNaN : last->distance);
  ctx.put("linearity_residual", residual);
  ctx.put("head_params", static_cast<double>(head.param_count()));
}

json metrics_json(const RunRecord& r) {
  json m = json::object();
  for (const auto& [k, v] : r.metrics) m[k] = std::isfinite(v) ? json(v) : json(nullptr);
  return m;
}

void write_result_json(const fs::path& dir, const RunRecord& r, const cfg::ConfigDoc& cell,
                       const cfg::ExperimentConfig* config) {
  json conf = json::object();
  std::istringstream lines(cell.canonical());
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    conf[line.substr(0, eq)] = line.substr(eq + 1);
  }
  json doc = {{"run_id", r.run_id()},   {"cell_index", r.cell_index}, {"cell", r.cell},
              {"kind", r.kind},         {"fingerprint", r.fingerprint}, {"seed", r.seed},
              {"status", r.status},     {"error", r.error}};
  doc["family"] = r.family;
  doc["head"] = config ? json::parse(to_json(config->model.head)) : json(nullptr);
  const double params = r.metric("head_params");
  doc["head_params"] = std::isfinite(params) ? json(params) : json(nullptr);
  doc["config"] = conf;
  doc["metrics"] = metrics_json(r);
  std::ofstream(dir / "result.json") << doc.dump(2) << '\n';
}

std::string cell_label(const cfg::ConfigDoc& cell, const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    if (!out.empty()) out += ';';
    out += k + "=" + cell.get(k).front();
  }
  return out.empty() ? "default" : out;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto at = s.find(sep, start);
    out.emplace_back(s.substr(start, at == std::string_view::npos ? s.npos : at - start));
    if (at == std::string_view::npos) return out;
    start = at + 1;
  }
}

std::string fmt3(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

void write_capability(const fs::path& out, const std::vector<RunRecord>& runs) {
  // Worst case over seeds per family, in first-seen order.
  std::vector<std::string> order;
  std::map<std::string, theory::AuditReport> worst;
  std::vector<double> alphas = theory::AuditCounts{}.alphas;
  for (const auto& r : runs) {
    if (r.status != "ok") continue;
    const std::string& family = r.family;
    auto [it, fresh] = worst.try_emplace(family);
    auto& w = it->second;
    if (fresh) {
      order.push_back(family);
      w.family = family;
      w.min_value = std::numeric_limits<double>::infinity();
      w.homogeneity_residual.assign(alphas.size(), 0.0);
    }
    w.head_params = static_cast<std::size_t>(r.metric("head_params"));
    w.identity_residual = std::max(w.identity_residual, r.metric("identity_residual"));
    w.triangle_violation = std::max(w.triangle_violation, r.metric("triangle_violation"));
    w.min_value = std::min(w.min_value, r.metric("min_value"));
    w.symmetry_residual = std::max(w.symmetry_residual, r.metric("symmetry_residual"));
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      const double h = r.metric("homogeneity_a" + csv::format_double(alphas[i]));
      w.homogeneity_residual[i] = std::max(w.homogeneity_residual[i], h);
    }
  }
  std::vector<theory::AuditReport> rows;
  for (const auto& f : order) rows.push_back(worst.at(f));
  theory::write_capability_csv(out / "capability.csv", rows, alphas);

  csv::Writer w(out / "witnesses.csv",
                {"cell", "seed", "witness_found", "witness_seeds", "witness_best", "collinear_violated"});
  for (const auto& r : runs) {
    if (std::isnan(r.metric("witness_found"))) continue;
    w.row({r.cell, std::to_string(r.seed), csv::format_double(r.metric("witness_found")),
           csv::format_double(r.metric("witness_seeds")), csv::format_double(r.metric("witness_best")),
           csv::format_double(r.metric("collinear_violated"))});
  }
}

void write_ablate_curve(const fs::path& out, const std::vector<RunRecord>& runs) {
  csv::Writer w(out / "ablate_curve.csv", {"k", "l", "seed", "status", "val_mse", "val_mse_e3", "val_pred_inf"});
  for (const auto& r : runs) {
    w.row({csv::format_double(r.metric("k")), csv::format_double(r.metric("l")), std::to_string(r.seed),
           r.status, csv::format_double(r.metric("val_mse")), csv::format_double(r.metric("val_mse_e3")),
           csv::format_double(r.metric("val_pred_inf"))});
  }
}

}  // namespace

double RunRecord::metric(std::string_view name) const {
  for (const auto& [k, v] : metrics)
    if (k == name) return v;
  return kNaN;
}

bool SuiteResult::all_diverged() const {
  bool any_diverged = false;
  for (const auto& r : runs) {
    if (r.status == "ok") return false;
    any_diverged = any_diverged || r.status == "diverged";
  }
  return any_diverged;
}

RunRecord run_one(const cfg::ConfigDoc& cell, std::size_t cell_index, std::string label,
                  std::uint64_t seed, const fs::path& out) {
  RunRecord record;
  record.cell_index = cell_index;
  record.cell = std::move(label);
  record.family = cell.get("head.family").front();
  record.fingerprint = cell.fingerprint();
  record.seed = seed;
  record.kind = cell.get("experiment.kind").front();
  record.status = "ok";
  const fs::path dir = out / record.run_id();
  fs::create_directories(dir);
  std::optional<cfg::ExperimentConfig> config;
  try {
    config = cell.resolve();
    RunContext ctx{*config, seed, dir, record};
    switch (config->kind) {
      case cfg::ExperimentKind::kGraph:
      case cfg::ExperimentKind::kAblateKl: run_graph(ctx); break;
      case cfg::ExperimentKind::kGridworld: run_gridworld(ctx); break;
      case cfg::ExperimentKind::kAudit: run_audit(ctx); break;
      case cfg::ExperimentKind::kProfile: run_profile(ctx); break;
    }
  } catch (const std::exception& e) {
    record.status = "failed";
    record.error = e.what();
  }
  write_result_json(dir, record, cell, config ? &*config : nullptr);
  return record;
}

SuiteResult run_suite(const cfg::ConfigDoc& doc, const SuiteOverrides& overrides, const Progress& progress) {
  const auto cells = doc.expand();
  const auto keys = doc.grid_keys();
  // Resolve everything up front so config errors abort before any work.
  std::vector<cfg::ExperimentConfig> resolved;
  for (const auto& c : cells) resolved.push_back(c.resolve());
  const auto& base = resolved.front();
  const auto seeds = overrides.seeds.value_or(base.seeds);
  if (seeds.empty()) throw cfg::ConfigError("experiment.seeds", "seed list is empty");
  const std::size_t jobs = std::max<std::size_t>(1, overrides.jobs.value_or(base.jobs));

  SuiteResult suite;
  suite.out = overrides.out.value_or(base.out);
  fs::create_directories(suite.out);

  struct Task {
    std::size_t cell;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (std::size_t c = 0; c < cells.size(); ++c)
    for (auto s : seeds) tasks.push_back({c, s});
  suite.runs.resize(tasks.size());

  std::atomic<std::size_t> next{0};
  std::mutex report;
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const std::size_t c = tasks[i].cell;
      RunRecord r = run_one(cells[c], c, cell_label(cells[c], keys), tasks[i].seed, suite.out);
      if (progress) {
        std::lock_guard lock(report);
        progress(r);
      }
      suite.runs[i] = std::move(r);
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t j = 1; j < std::min(jobs, tasks.size()); ++j) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  write_runs_csv(suite.out / "runs.csv", suite.runs);
  write_aggregate_csv(suite.out / "aggregate.csv", aggregate(suite.runs));
  if (base.kind == cfg::ExperimentKind::kAudit) write_capability(suite.out, suite.runs);
  if (base.kind == cfg::ExperimentKind::kAblateKl) write_ablate_curve(suite.out, suite.runs);
  return suite;
}

std::string AggregateRow::formatted() const { return fmt3(mean) + " ± " + fmt3(sd); }

std::vector<AggregateRow> aggregate(const std::vector<RunRecord>& runs) {
  // Group by cell in first-seen order; metrics in first-seen order per cell.
  std::vector<std::size_t> cell_order;
  std::map<std::size_t, std::vector<const RunRecord*>> by_cell;
  for (const auto& r : runs) {
    auto& v = by_cell[r.cell_index];
    if (v.empty()) cell_order.push_back(r.cell_index);
    v.push_back(&r);
  }
  std::vector<AggregateRow> rows;
  for (std::size_t c : cell_order) {
    const auto& group = by_cell.at(c);
    std::vector<std::string> names;
    for (const auto* r : group)
      for (const auto& [k, v] : r->metrics)
        if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
    std::size_t failed = 0;
    for (const auto* r : group) failed += r->status != "ok";
    for (const auto& name : names) {
      AggregateRow row;
      row.cell_index = c;
      row.cell = group.front()->cell;
      row.fingerprint = group.front()->fingerprint;
      row.metric = name;
      row.n_failed = failed;
      std::vector<double> xs;
      for (const auto* r : group) {
        if (r->status != "ok") continue;
        const double v = r->metric(name);
        if (std::isfinite(v)) xs.push_back(v);
      }
      row.n = xs.size();
      if (xs.empty()) {
        row.mean = kNaN;
        row.sd = kNaN;
      } else {
        double sum = 0.0;
        for (double x : xs) sum += x;
        row.mean = sum / static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - row.mean) * (x - row.mean);
        row.sd = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::vector<RunRecord> load_runs(const fs::path& out) {
  std::vector<RunRecord> runs;
  if (!fs::is_directory(out)) throw std::runtime_error("no such directory: " + out.string());
  for (const auto& entry : fs::directory_iterator(out)) {
    const fs::path file = entry.path() / "result.json";
    if (!entry.is_directory() || !fs::exists(file)) continue;
    std::ifstream in(file);
    const json doc = json::parse(in);
    RunRecord r;
    r.cell_index = doc.at("cell_index").get<std::size_t>();
    r.cell = doc.at("cell").get<std::string>();
    r.kind = doc.at("kind").get<std::string>();
    r.family = doc.at("family").get<std::string>();
    r.fingerprint = doc.at("fingerprint").get<std::string>();
    r.seed = doc.at("seed").get<std::uint64_t>();
    r.status = doc.at("status").get<std::string>();
    r.error = doc.at("error").get<std::string>();
    for (const auto& [k, v] : doc.at("metrics").items())
      r.metrics.emplace_back(k, v.is_null() ? kNaN : v.get<double>());
    runs.push_back(std::move(r));
  }
  std::sort(runs.begin(), runs.end(), [](const RunRecord& a, const RunRecord& b) {
    return std::tie(a.cell_index, a.seed, a.fingerprint) < std::tie(b.cell_index, b.seed, b.fingerprint);
  });
  return runs;
}

void write_runs_csv(const fs::path& path, const std::vector<RunRecord>& runs) {
  std::vector<std::string> names;
  for (const auto& r : runs)
    for (const auto& [k, v] : r.metrics)
      if (std::find(names.begin(), names.end(), k) == names.end()) names.push_back(k);
  std::vector<std::string> header{"cell_index", "cell", "run_id", "seed", "status", "error"};
  header.insert(header.end(), names.begin(), names.end());
  csv::Writer w(path, header);
  for (const auto& r : runs) {
    std::vector<std::string> f{std::to_string(r.cell_index), r.cell, r.run_id(), std::to_string(r.seed),
                               r.status, r.error};
    for (const auto& n : names) {
      const double v = r.metric(n);
      f.push_back(std::isnan(v) ? "" : csv::format_double(v));
    }
    w.row(f);
  }
}

void write_aggregate_csv(const fs::path& path, const std::vector<AggregateRow>& rows) {
  csv::Writer w(path, {"cell_index", "cell", "fingerprint", "metric", "n", "n_failed", "mean", "sd", "formatted"});
  for (const auto& r : rows) {
    w.row({std::to_string(r.cell_index), r.cell, r.fingerprint, r.metric, std::to_string(r.n),
           std::to_string(r.n_failed), csv::format_double(r.mean), csv::format_double(r.sd), r.formatted()});
  }
}

double cell_mean(const std::vector<RunRecord>& runs, std::string_view metric,
                 const std::vector<std::string>& where) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.status != "ok") continue;
    const auto tokens = split(r.cell, ';');
    const bool match = std::all_of(where.begin(), where.end(), [&](const std::string& w) {
      return std::find(tokens.begin(), tokens.end(), w) != tokens.end();
    });
    const double v = r.metric(metric);
    if (!match || !std::isfinite(v)) continue;
    sum += v;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : kNaN;
}

}  // namespace qmet::exp
