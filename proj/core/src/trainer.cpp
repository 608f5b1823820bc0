#include "qmet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "qmet/random.hpp"

namespace qmet::train {

using diff::Shape;

Adam::Adam(ParamStore& store, AdamConfig config) : store_(&store), config_(config) {
  for (auto id : store.ids()) {
    m_.emplace_back(store.value(id).shape(), 0.0);
    v_.emplace_back(store.value(id).shape(), 0.0);
  }
}

bool Adam::step(double lr) {
  if (!store_->grads_finite()) {
    ++skipped_;
    return false;
  }
  ++steps_;
  const double t = static_cast<double>(steps_);
  const double c1 = 1.0 - std::pow(config_.beta1, t);
  const double c2 = 1.0 - std::pow(config_.beta2, t);
  const auto ids = store_->ids();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto w = store_->value(ids[i]).values();
    const auto g = store_->grad(ids[i]).values();
    auto m = m_[i].values();
    auto v = v_[i].values();
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
      w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
  }
  return true;
}

double cosine_lr(std::size_t step, std::size_t total, double base) {
  if (total == 0) return base;
  const double frac = static_cast<double>(std::min(step, total)) / static_cast<double>(total);
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

Var discount(Tape& tape, Var distance, double gamma) {
  return tape.exp(tape.affine(distance, std::log(gamma)));
}

Var discounted_mse(Tape& tape, Var pred, const std::vector<double>& discounted_target,
                   double gamma) {
  const Var target = tape.constant(Array::vector(discounted_target));
  return tape.mean_reduce(tape.square(tape.sub(discount(tape, pred, gamma), target)));
}

Var triangle_regularizer(Tape& tape, Var d_xy, Var d_yz, Var d_xz, double gamma) {
  const Var via = discount(tape, tape.add(d_xy, d_yz), gamma);
  const Var direct = discount(tape, d_xz, gamma);
  return tape.mean_reduce(tape.square(tape.relu(tape.sub(via, direct))));
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("train.epochs must be >= 1");
  if (batch_size == 0) throw std::invalid_argument("train.batch_size must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be > 0");
  if (!(gamma > 0.0 && gamma < 1.0)) throw std::invalid_argument("train.gamma must lie in (0, 1)");
  if (!(reg_weight >= 0.0)) throw std::invalid_argument("train.reg_weight must be >= 0");
}

MetricsRecord metrics_from(std::span<const double> predicted, std::span<const double> truth,
                           double gamma) {
  if (predicted.size() != truth.size())
    throw std::invalid_argument("metrics: prediction/truth length mismatch");
  MetricsRecord r;
  r.n_pairs = predicted.size();
  double se = 0.0, l1 = 0.0, inf_sum = 0.0;
  const double lg = std::log(gamma);
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double p = predicted[i];
    const double d = truth[i];
    if (!std::isfinite(p)) r.overflow = true;
    const double gp = std::isinf(p) && p > 0 ? 0.0 : std::exp(p * lg);
    const double gd = std::isinf(d) ? 0.0 : std::exp(d * lg);
    se += (gp - gd) * (gp - gd);
    if (std::isinf(d)) {
      ++r.n_inf;
      inf_sum += p;
    } else {
      ++r.n_finite;
      l1 += std::abs(p - d);
    }
  }
  const auto mean = [](double s, std::size_t n) {
    return n ? s / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  };
  r.mse = mean(se, r.n_pairs);
  r.l1_finite = mean(l1, r.n_finite);
  r.pred_inf = mean(inf_sum, r.n_inf);
  return r;
}

namespace {

model::PairIndex to_pairs(const std::vector<graphs::PairRecord>& records) {
  model::PairIndex p;
  p.src.reserve(records.size());
  p.tgt.reserve(records.size());
  for (const auto& r : records) p.push(r.source, r.target);
  return p;
}

bool regularized(const model::Model& m, const TrainConfig& c) {
  return c.reg_weight > 0.0 && is_pair_baseline(m.spec().head.family);
}

}  // namespace

MetricsRecord evaluate(model::Model& model, const Array& features,
                       const std::vector<graphs::PairRecord>& pairs, double gamma) {
  if (pairs.empty()) throw std::invalid_argument("evaluate: empty split");
  std::size_t clamped = 0;
  const auto pred = model.predict_values(features, to_pairs(pairs), &clamped);
  std::vector<double> truth(pairs.size());
  for (std::size_t i = 0; i < pairs.size(); ++i) truth[i] = pairs[i].distance;
  MetricsRecord r = metrics_from(pred, truth, gamma);
  r.clamped = clamped;
  return r;
}

TrainResult train(model::Model& model, const graphs::PairDataset& data, const TrainConfig& config,
                  const EpochHook& hook) {
  config.validate();
  if (data.train.empty()) throw std::invalid_argument("train: empty training split");
  const std::size_t n_train = data.train.size();
  const std::size_t batch = std::min(config.batch_size, n_train);
  const std::size_t steps_per_epoch = (n_train + batch - 1) / batch;
  const std::size_t total_steps = steps_per_epoch * config.epochs;
  const bool use_reg = regularized(model, config);
  const std::size_t triplets = config.triplets ? config.triplets : std::max<std::size_t>(1, batch / 3);

  // Nodes seen in training pairs; triples are drawn from these only.
  std::vector<std::uint32_t> nodes;
  if (use_reg) {
    std::vector<char> seen(data.features.dim(0), 0);
    for (const auto& r : data.train) seen[r.source] = seen[r.target] = 1;
    for (std::size_t x = 0; x < seen.size(); ++x)
      if (seen[x]) nodes.push_back(static_cast<std::uint32_t>(x));
  }

  Adam adam(model.params(), config.adam);
  Rng order_rng(derive_seed(config.seed, 21));
  Rng triple_rng(derive_seed(config.seed, 22));
  std::vector<std::size_t> order(n_train);
  for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

  TrainResult result;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    order_rng.shuffle(order);
    double loss_sum = 0.0, mse_sum = 0.0;
    double lr = config.lr;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * batch;
      const std::size_t end = std::min(n_train, begin + batch);
      model::PairIndex pairs;
      std::vector<double> target;
      target.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) {
        const auto& r = data.train[order[i]];
        pairs.push(r.source, r.target);
        target.push_back(r.discounted);
      }
      const std::size_t b = end - begin;
      if (use_reg) {
        for (std::size_t t = 0; t < triplets; ++t) {
          const std::size_t x = nodes[triple_rng.index(nodes.size())];
          const std::size_t y = nodes[triple_rng.index(nodes.size())];
          const std::size_t z = nodes[triple_rng.index(nodes.size())];
          pairs.push(x, y);
          pairs.push(y, z);
          pairs.push(x, z);
        }
      }

      Tape tape;
      const model::Prediction pred = model.predict(tape, data.features, pairs, enc::Mode::kTrain);
      Var d = pred.distance;
      const Var fit_pred = use_reg ? tape.slice(d, 0, 0, b) : d;
      const Var mse = discounted_mse(tape, fit_pred, target, config.gamma);
      Var loss = mse;
      if (use_reg) {
        const Var triples = tape.reshape(tape.slice(d, 0, b, b + 3 * triplets), Shape{triplets, 3});
        const Var reg = triangle_regularizer(tape, tape.reshape(tape.slice(triples, 1, 0, 1), Shape{triplets}),
                                             tape.reshape(tape.slice(triples, 1, 1, 2), Shape{triplets}),
                                             tape.reshape(tape.slice(triples, 1, 2, 3), Shape{triplets}),
                                             config.gamma);
        loss = tape.add(mse, tape.affine(reg, config.reg_weight));
      }
      const double loss_value = tape.value(loss).item();
      result.step_loss.push_back(loss_value);
      if (!std::isfinite(loss_value)) {
        result.diverged = true;
        result.steps = step;
        result.skipped_steps = adam.skipped();
        return result;
      }
      model.params().zero_grad();
      tape.backward(loss);
      lr = cosine_lr(step, total_steps, config.lr);
      adam.step(lr);
      ++step;
      loss_sum += loss_value;
      mse_sum += tape.value(mse).item();
    }
    const double epoch_loss = loss_sum / static_cast<double>(steps_per_epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.split = "train";
    rec.metrics.mse = mse_sum / static_cast<double>(steps_per_epoch);
    rec.metrics.l1_finite = std::numeric_limits<double>::quiet_NaN();
    rec.metrics.pred_inf = std::numeric_limits<double>::quiet_NaN();
    rec.lr = lr;
    rec.loss = epoch_loss;
    result.history.push_back(rec);
    if (hook) hook(epoch, epoch_loss);

    const bool last = epoch + 1 == config.epochs;
    const bool periodic = config.eval_every && (epoch + 1) % config.eval_every == 0;
    if (!data.val.empty() && (last || periodic)) {
      EpochRecord v = rec;
      v.split = "val";
      v.metrics = evaluate(model, data.features, data.val, config.gamma);
      result.history.push_back(v);
      if (last) result.final_val = v.metrics;
    }
  }
  result.final_train = evaluate(model, data.features, data.train, config.gamma);
  result.steps = step;
  result.skipped_steps = adam.skipped();
  return result;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "epoch,split,mse,l1_finite,pred_inf,lr,loss\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%s,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.epoch,
                  r.split.c_str(), r.metrics.mse, r.metrics.l1_finite, r.metrics.pred_inf, r.lr,
                  r.loss);
    os << buf;
  }
}

}  // namespace qmet::train
