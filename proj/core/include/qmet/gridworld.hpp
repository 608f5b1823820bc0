#pragma once

// Grid world with one-way doors, offline data collection, goal-conditioned
// Q-learning with any distance model, and greedy 1-step planning.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qmet/graphs.hpp"
#include "qmet/model.hpp"
#include "qmet/trainer.hpp"

namespace qmet::grid {

enum class Action : std::uint8_t { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr std::size_t kNumActions = 4;

std::string_view to_string(Action a);
Action parse_action(std::string_view tag);

struct Cell {
  std::size_t x = 0;
  std::size_t y = 0;
  friend bool operator==(Cell, Cell) = default;
};

/// A door cell may only be entered and left by moving in `direction`.
struct Door {
  Cell cell;
  Action direction = Action::kRight;
};

struct GridSpec {
  std::size_t width = 8;
  std::size_t height = 8;
  std::vector<Cell> walls;
  std::vector<Door> doors;
  std::uint64_t seed = 0;

  std::string to_json() const;
  static GridSpec from_json(const std::string& text);
};

/// Vertical wall at column width/2 with `n_doors` one-way doors at distinct
/// seeded rows; directions alternate right, left, right, ...
GridSpec make_door_world(std::size_t width, std::size_t height, std::size_t n_doors,
                         std::uint64_t seed);

class GridWorld {
 public:
  /// Validates geometry only; connectivity is checked by groundtruth_qmet().
  explicit GridWorld(GridSpec spec);

  const GridSpec& spec() const { return spec_; }
  std::size_t num_states() const { return cells_.size(); }
  Cell cell(std::size_t state) const { return cells_.at(state); }
  /// State id of a free cell; throws for walls or out-of-range cells.
  std::size_t state_of(Cell c) const;

  /// Deterministic dynamics: blocked moves leave the state unchanged.
  std::size_t step(std::size_t state, Action a) const;
  std::size_t step(std::size_t state, std::size_t a) const {
    return step(state, static_cast<Action>(a));
  }

  /// Directed state graph without self-loops.
  graphs::DirectedGraph transition_graph() const;

  /// One-hot x concatenated with one-hot y: [states, width + height].
  diff::Array features() const;

 private:
  bool blocked(Cell c) const;
  const Door* door_at(Cell c) const;

  GridSpec spec_;
  std::vector<Cell> cells_;
  std::vector<std::size_t> index_;  // cell -> state id, or npos for walls
};

/// BFS over states. Rejects worlds where some state cannot reach another.
graphs::DistanceOracle groundtruth_qmet(const GridWorld& world);

/// True if d(s, g) != d(g, s) for some pair.
bool has_asymmetry(const graphs::DistanceOracle& oracle);

struct Trajectory {
  std::vector<std::size_t> states;   // length actions.size() + 1
  std::vector<std::uint8_t> actions;
  std::size_t goal = 0;
};

struct TrajectoryDataset {
  std::vector<Trajectory> trajectories;
  double epsilon = 0.0;
  std::size_t cap = 0;
  std::uint64_t seed = 0;

  std::size_t transitions() const;
};

/// Episodes from uniform start/goal pairs (start != goal); each step acts
/// uniformly with probability epsilon, otherwise greedily on the oracle (ties
/// random). Episodes end at the goal or after `cap` steps.
TrajectoryDataset collect_offline(const GridWorld& world, const graphs::DistanceOracle& oracle,
                                  std::size_t n_trajectories, double epsilon, std::size_t cap,
                                  std::uint64_t seed);

struct QLearnConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 256;
  double lr = 1e-3;
  double gamma = 0.95;
  std::uint64_t seed = 0;
};

struct QLearnResult {
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
  bool diverged = false;
  std::size_t steps = 0;
};

/// TD regression in discounted space with goals as state-action pairs:
/// Q(s, a, g, a_g) = gamma^d((s, a), (g, a_g)), target 1 if s' = g else
/// gamma * max_a' Q(s', a', g, a_g) (evaluated without gradient). Goals are
/// relabeled uniformly from the future states of the same trajectory and
/// goal actions are uniform.
QLearnResult q_learn(model::Model& model, const GridWorld& world, const TrajectoryDataset& data,
                     const QLearnConfig& config);

/// Cost-to-go table c[(s * A + a) * S + g] used by the greedy planner.
using PlanTable = std::vector<double>;

/// mean over a' of d((s, a), (g, a')) - 1, or d((s, a), (g, goal_action)) - 1
/// when `average_goal_actions` is false.
PlanTable plan_table_from_model(model::Model& model, const GridWorld& world,
                                bool average_goal_actions = true, std::size_t goal_action = 0);

/// d(step(s, a), g) from the exact oracle.
PlanTable plan_table_from_oracle(const GridWorld& world, const graphs::DistanceOracle& oracle);

struct PlanResult {
  double success_rate = 0.0;
  double mean_steps = 0.0;  // over successful episodes
  std::size_t goals = 0;
};

/// Greedy 1-step planning for `n_goals` seeded (start, goal) pairs; ties are
/// broken uniformly at random.
PlanResult plan_greedy(const GridWorld& world, const PlanTable& table, std::size_t n_goals,
                       std::size_t step_cap, std::uint64_t seed);

}  // namespace qmet::grid
