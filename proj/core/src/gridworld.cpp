#include "qmet/gridworld.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"
#include "qmet/random.hpp"

namespace qmet::grid {

using diff::Array;
using diff::Shape;

namespace {

constexpr std::size_t kNone = static_cast<std::size_t>(-1);

constexpr std::array<std::string_view, kNumActions> kActionNames{"up", "down", "left", "right"};

}  // namespace

std::string_view to_string(Action a) { return kActionNames.at(static_cast<std::size_t>(a)); }

Action parse_action(std::string_view tag) {
  for (std::size_t i = 0; i < kNumActions; ++i)
    if (kActionNames[i] == tag) return static_cast<Action>(i);
  throw std::invalid_argument("unknown action '" + std::string(tag) + "'");
}

std::string GridSpec::to_json() const {
  nlohmann::ordered_json j;
  j["width"] = width;
  j["height"] = height;
  j["walls"] = nlohmann::json::array();
  for (const Cell& c : walls) j["walls"].push_back({c.x, c.y});
  j["doors"] = nlohmann::json::array();
  for (const Door& d : doors)
    j["doors"].push_back({{"x", d.cell.x}, {"y", d.cell.y}, {"dir", std::string(to_string(d.direction))}});
  j["seed"] = seed;
  return j.dump();
}

GridSpec GridSpec::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  GridSpec s;
  s.width = j.at("width").get<std::size_t>();
  s.height = j.at("height").get<std::size_t>();
  for (const auto& w : j.at("walls")) s.walls.push_back({w.at(0).get<std::size_t>(), w.at(1).get<std::size_t>()});
  for (const auto& d : j.at("doors")) {
    s.doors.push_back({{d.at("x").get<std::size_t>(), d.at("y").get<std::size_t>()},
                       parse_action(d.at("dir").get<std::string>())});
  }
  s.seed = j.value("seed", std::uint64_t{0});
  return s;
}

GridSpec make_door_world(std::size_t width, std::size_t height, std::size_t n_doors,
                         std::uint64_t seed) {
  if (width < 3 || height < 1) throw std::invalid_argument("door world needs width >= 3");
  if (n_doors == 0 || n_doors > height)
    throw std::invalid_argument("door count must lie in [1, height]");
  GridSpec s;
  s.width = width;
  s.height = height;
  s.seed = seed;
  const std::size_t wall_x = width / 2;
  std::vector<std::size_t> rows(height);
  for (std::size_t y = 0; y < height; ++y) rows[y] = y;
  Rng rng(seed);
  rng.shuffle(rows);
  rows.resize(n_doors);
  std::sort(rows.begin(), rows.end());
  // Alternate directions in shuffled order so that door placement alone does
  // not decide which way is which.
  std::vector<std::size_t> dir_rows = rows;
  rng.shuffle(dir_rows);
  for (std::size_t y = 0; y < height; ++y) {
    const auto pos = std::find(dir_rows.begin(), dir_rows.end(), y);
    if (pos == dir_rows.end()) {
      s.walls.push_back({wall_x, y});
    } else {
      const bool east = (pos - dir_rows.begin()) % 2 == 0;
      s.doors.push_back({{wall_x, y}, east ? Action::kRight : Action::kLeft});
    }
  }
  return s;
}

GridWorld::GridWorld(GridSpec spec) : spec_(std::move(spec)) {
  const std::size_t w = spec_.width, h = spec_.height;
  if (w == 0 || h == 0) throw std::invalid_argument("grid: width and height must be >= 1");
  std::vector<char> wall(w * h, 0);
  for (const Cell& c : spec_.walls) {
    if (c.x >= w || c.y >= h) throw std::invalid_argument("grid: wall outside the grid");
    wall[c.y * w + c.x] = 1;
  }
  for (const Door& d : spec_.doors) {
    if (d.cell.x >= w || d.cell.y >= h) throw std::invalid_argument("grid: door outside the grid");
    if (wall[d.cell.y * w + d.cell.x]) throw std::invalid_argument("grid: door placed on a wall");
  }
  index_.assign(w * h, kNone);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      if (wall[y * w + x]) continue;
      index_[y * w + x] = cells_.size();
      cells_.push_back({x, y});
    }
  }
  if (cells_.empty()) throw std::invalid_argument("grid: no free cells");
}

std::size_t GridWorld::state_of(Cell c) const {
  if (c.x >= spec_.width || c.y >= spec_.height) throw std::out_of_range("grid: cell outside grid");
  const std::size_t s = index_[c.y * spec_.width + c.x];
  if (s == kNone) throw std::invalid_argument("grid: cell is a wall");
  return s;
}

bool GridWorld::blocked(Cell c) const { return index_[c.y * spec_.width + c.x] == kNone; }

const Door* GridWorld::door_at(Cell c) const {
  for (const Door& d : spec_.doors)
    if (d.cell == c) return &d;
  return nullptr;
}

std::size_t GridWorld::step(std::size_t state, Action a) const {
  const Cell c = cells_.at(state);
  Cell n = c;
  switch (a) {
    case Action::kUp:
      if (c.y == 0) return state;
      n.y = c.y - 1;
      break;
    case Action::kDown:
      if (c.y + 1 >= spec_.height) return state;
      n.y = c.y + 1;
      break;
    case Action::kLeft:
      if (c.x == 0) return state;
      n.x = c.x - 1;
      break;
    case Action::kRight:
      if (c.x + 1 >= spec_.width) return state;
      n.x = c.x + 1;
      break;
  }
  if (blocked(n)) return state;
  if (const Door* d = door_at(c); d && d->direction != a) return state;
  if (const Door* d = door_at(n); d && d->direction != a) return state;
  return index_[n.y * spec_.width + n.x];
}

graphs::DirectedGraph GridWorld::transition_graph() const {
  graphs::DirectedGraph g(num_states());
  for (std::size_t s = 0; s < num_states(); ++s)
    for (std::size_t a = 0; a < kNumActions; ++a) g.add_edge(s, step(s, a));
  return g;
}

Array GridWorld::features() const {
  Array f(Shape{num_states(), spec_.width + spec_.height}, 0.0);
  for (std::size_t s = 0; s < num_states(); ++s) {
    f.at(s, cells_[s].x) = 1.0;
    f.at(s, spec_.width + cells_[s].y) = 1.0;
  }
  return f;
}

graphs::DistanceOracle groundtruth_qmet(const GridWorld& world) {
  graphs::DistanceOracle o = graphs::all_pairs_distances(world.transition_graph());
  if (!o.all_finite())
    throw std::invalid_argument("grid world is not strongly connected (some state cannot reach another)");
  return o;
}

bool has_asymmetry(const graphs::DistanceOracle& oracle) {
  for (std::size_t x = 0; x < oracle.n; ++x)
    for (std::size_t y = x + 1; y < oracle.n; ++y)
      if (oracle(x, y) != oracle(y, x)) return true;
  return false;
}

std::size_t TrajectoryDataset::transitions() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.actions.size();
  return n;
}

TrajectoryDataset collect_offline(const GridWorld& world, const graphs::DistanceOracle& oracle,
                                  std::size_t n_trajectories, double epsilon, std::size_t cap,
                                  std::uint64_t seed) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon must lie in [0, 1]");
  const std::size_t S = world.num_states();
  if (S < 2) throw std::invalid_argument("collect_offline: need at least two states");
  TrajectoryDataset ds;
  ds.epsilon = epsilon;
  ds.cap = cap;
  ds.seed = seed;
  Rng rng(seed);
  std::vector<std::size_t> best;
  for (std::size_t e = 0; e < n_trajectories; ++e) {
    Trajectory t;
    std::size_t s = rng.index(S);
    std::size_t g = rng.index(S - 1);
    if (g >= s) ++g;
    t.goal = g;
    t.states.push_back(s);
    while (s != g && t.actions.size() < cap) {
      std::size_t a;
      if (rng.bernoulli(epsilon)) {
        a = rng.index(kNumActions);
      } else {
        double lo = std::numeric_limits<double>::infinity();
        best.clear();
        for (std::size_t c = 0; c < kNumActions; ++c) {
          const double d = oracle(world.step(s, c), g);
          if (d < lo) {
            lo = d;
            best.assign(1, c);
          } else if (d == lo) {
            best.push_back(c);
          }
        }
        a = best[rng.index(best.size())];
      }
      s = world.step(s, a);
      t.actions.push_back(static_cast<std::uint8_t>(a));
      t.states.push_back(s);
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

namespace {

struct Sample {
  std::size_t s, a, next, goal, goal_action;
};

}  // namespace

QLearnResult q_learn(model::Model& model, const GridWorld& world, const TrajectoryDataset& data,
                     const QLearnConfig& config) {
  if (model.spec().slots != kNumActions)
    throw std::invalid_argument("q_learn: model needs one slot per action (4)");
  if (!(config.gamma > 0.0 && config.gamma < 1.0))
    throw std::invalid_argument("q_learn: gamma must lie in (0, 1)");
  if (config.epochs == 0 || config.batch_size == 0)
    throw std::invalid_argument("q_learn: epochs and batch size must be >= 1");

  struct Step {
    std::size_t traj, t;
  };
  std::vector<Step> steps;
  for (std::size_t i = 0; i < data.trajectories.size(); ++i)
    for (std::size_t t = 0; t < data.trajectories[i].actions.size(); ++t) steps.push_back({i, t});
  if (steps.empty()) throw std::invalid_argument("q_learn: dataset has no transitions");

  const Array features = world.features();
  const std::size_t n = steps.size();
  const std::size_t batch = std::min(config.batch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = per_epoch * config.epochs;
  train::Adam adam(model.params());
  Rng rng(derive_seed(config.seed, 51));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;

  QLearnResult result;
  std::size_t step_count = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * batch, end = std::min(n, begin + batch);
      std::vector<Sample> samples;
      samples.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const Step& st = steps[order[i]];
        const Trajectory& tr = data.trajectories[st.traj];
        // Future states are states[t + 1 .. T].
        const std::size_t future = st.t + 1 + rng.index(tr.actions.size() - st.t);
        samples.push_back({tr.states[st.t], tr.actions[st.t], tr.states[st.t + 1],
                           tr.states[future], rng.index(kNumActions)});
      }

      // Bootstrap values from the current parameters, without gradient.
      model::PairIndex boot;
      for (const Sample& s : samples)
        for (std::size_t a = 0; a < kNumActions; ++a) boot.push(s.next, s.goal, a, s.goal_action);
      const auto boot_d = model.predict_values(features, boot);
      std::vector<double> target(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (samples[i].next == samples[i].goal) {
          target[i] = 1.0;
          continue;
        }
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < kNumActions; ++a)
          best = std::max(best, std::pow(config.gamma, boot_d[i * kNumActions + a]));
        target[i] = config.gamma * std::min(best, 1.0);
      }

      model::PairIndex cur;
      for (const Sample& s : samples) cur.push(s.s, s.goal, s.a, s.goal_action);
      diff::Tape tape;
      const model::Prediction pred = model.predict(tape, features, cur, enc::Mode::kTrain);
      const diff::Var loss = train::discounted_mse(tape, pred.distance, target, config.gamma);
      const double value = tape.value(loss).item();
      if (!std::isfinite(value)) {
        result.diverged = true;
        result.steps = step_count;
        return result;
      }
      model.params().zero_grad();
      tape.backward(loss);
      adam.step(train::cosine_lr(step_count, total, config.lr));
      ++step_count;
      loss_sum += value;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(per_epoch));
  }
  result.final_loss = result.epoch_loss.back();
  result.steps = step_count;
  return result;
}

PlanTable plan_table_from_model(model::Model& model, const GridWorld& world,
                                bool average_goal_actions, std::size_t goal_action) {
  const std::size_t S = world.num_states();
  if (goal_action >= kNumActions) throw std::invalid_argument("goal action out of range");
  const std::size_t goal_slots = average_goal_actions ? kNumActions : 1;
  model::PairIndex pairs;
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < kNumActions; ++a)
      for (std::size_t g = 0; g < S; ++g)
        for (std::size_t j = 0; j < goal_slots; ++j)
          pairs.push(s, g, a, average_goal_actions ? j : goal_action);
  const auto d = model.predict_values(world.features(), pairs, nullptr, 8192);
  PlanTable table(S * kNumActions * S);
  for (std::size_t i = 0; i < table.size(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < goal_slots; ++j) sum += d[i * goal_slots + j];
    table[i] = sum / static_cast<double>(goal_slots) - 1.0;
  }
  return table;
}

PlanTable plan_table_from_oracle(const GridWorld& world, const graphs::DistanceOracle& oracle) {
  const std::size_t S = world.num_states();
  PlanTable table(S * kNumActions * S);
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t a = 0; a < kNumActions; ++a)
      for (std::size_t g = 0; g < S; ++g)
        table[(s * kNumActions + a) * S + g] = oracle(world.step(s, a), g);
  return table;
}

PlanResult plan_greedy(const GridWorld& world, const PlanTable& table, std::size_t n_goals,
                       std::size_t step_cap, std::uint64_t seed) {
  const std::size_t S = world.num_states();
  if (table.size() != S * kNumActions * S) throw std::invalid_argument("plan table size mismatch");
  if (n_goals == 0) throw std::invalid_argument("plan_greedy: need at least one goal");
  Rng rng(derive_seed(seed, 61));
  PlanResult r;
  r.goals = n_goals;
  std::size_t successes = 0, steps_total = 0;
  std::vector<std::size_t> best;
  for (std::size_t e = 0; e < n_goals; ++e) {
    std::size_t s = rng.index(S);
    std::size_t g = rng.index(S - 1);
    if (g >= s) ++g;
    std::size_t t = 0;
    while (s != g && t < step_cap) {
      double lo = std::numeric_limits<double>::infinity();
      best.clear();
      for (std::size_t a = 0; a < kNumActions; ++a) {
        const double c = table[(s * kNumActions + a) * S + g];
        if (c < lo) {
          lo = c;
          best.assign(1, a);
        } else if (c == lo) {
          best.push_back(a);
        }
      }
      // NaN costs everywhere: fall back to a uniform action.
      const std::size_t a = best.empty() ? rng.index(kNumActions) : best[rng.index(best.size())];
      s = world.step(s, a);
      ++t;
    }
    if (s == g) {
      ++successes;
      steps_total += t;
    }
  }
  r.success_rate = static_cast<double>(successes) / static_cast<double>(n_goals);
  r.mean_steps = successes ? static_cast<double>(steps_total) / static_cast<double>(successes) : 0.0;
  return r;
}

}  // namespace qmet::grid
