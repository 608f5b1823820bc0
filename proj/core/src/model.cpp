#include "qmet/model.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "qmet/random.hpp"

namespace qmet::model {

using diff::Shape;

void ModelSpec::validate() const {
  head.validate();
  if (feature_dim == 0) throw std::invalid_argument("model.feature_dim must be >= 1");
  if (hidden.empty()) throw std::invalid_argument("model.hidden must list at least one layer");
  if (slots == 0) throw std::invalid_argument("model.slots must be >= 1");
}

enc::EncoderSpec ModelSpec::encoder_spec() const {
  enc::EncoderSpec e;
  e.hidden = hidden;
  e.feature_norm = feature_norm;
  if (head.family == HeadFamily::kUnconstrained) {
    e.input_dim = 2 * feature_dim;
    e.output_dim = slots * slots;
  } else {
    e.input_dim = feature_dim;
    e.output_dim = slots * head.latent_dim();
  }
  return e;
}

void PairIndex::push(std::size_t s, std::size_t t, std::size_t s_slot, std::size_t t_slot) {
  // Slot vectors are materialized lazily so single-slot callers stay cheap.
  if ((s_slot != 0 || t_slot != 0) && src_slot.empty()) {
    src_slot.assign(src.size(), 0);
    tgt_slot.assign(tgt.size(), 0);
  }
  src.push_back(s);
  tgt.push_back(t);
  if (!src_slot.empty()) {
    src_slot.push_back(s_slot);
    tgt_slot.push_back(t_slot);
  }
}

PairIndex PairIndex::range(std::size_t begin, std::size_t end) const {
  PairIndex out;
  out.src.assign(src.begin() + static_cast<std::ptrdiff_t>(begin),
                 src.begin() + static_cast<std::ptrdiff_t>(end));
  out.tgt.assign(tgt.begin() + static_cast<std::ptrdiff_t>(begin),
                 tgt.begin() + static_cast<std::ptrdiff_t>(end));
  if (!src_slot.empty()) {
    out.src_slot.assign(src_slot.begin() + static_cast<std::ptrdiff_t>(begin),
                        src_slot.begin() + static_cast<std::ptrdiff_t>(end));
    out.tgt_slot.assign(tgt_slot.begin() + static_cast<std::ptrdiff_t>(begin),
                        tgt_slot.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

Model::Model(ModelSpec spec, std::uint64_t seed)
    : spec_(std::move(spec)), seed_(seed), store_(std::make_unique<ParamStore>()) {
  spec_.validate();
  const enc::EncoderSpec es = spec_.encoder_spec();
  encoder_ = std::make_unique<enc::Encoder>(es, *store_, derive_seed(seed, 1), "enc");
  const HeadFamily f = spec_.head.family;
  if (f == HeadFamily::kAsymDot) {
    target_encoder_ = std::make_unique<enc::Encoder>(es, *store_, derive_seed(seed, 2), "enc_t");
  } else if (!is_pair_baseline(f)) {
    head_.emplace(spec_.head, *store_, derive_seed(seed, 3));
  }
}

std::size_t Model::head_param_count() const { return head_ ? head_->param_count() : 0; }

Var Model::encode_rows(Tape& tape, enc::Encoder& encoder, const Array& features,
                       const std::vector<std::size_t>& rows, Mode mode) {
  const std::size_t width = features.dim(1);
  Array x(Shape{rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double* src = features.values().data() + rows[i] * width;
    std::copy(src, src + width, x.values().data() + i * width);
  }
  return encoder.encode(tape, tape.constant(std::move(x)), mode);
}

namespace {

// Sorted unique rows plus, for each row id, its position in that list.
struct RowSet {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> position;
};

RowSet unique_rows(std::size_t table_rows, const std::vector<std::size_t>& a,
                   const std::vector<std::size_t>* b) {
  std::vector<char> used(table_rows, 0);
  auto mark = [&](const std::vector<std::size_t>& ids) {
    for (std::size_t r : ids) {
      if (r >= table_rows)
        throw std::out_of_range("pair index " + std::to_string(r) + " outside feature table");
      used[r] = 1;
    }
  };
  mark(a);
  if (b) mark(*b);
  RowSet set;
  set.position.assign(table_rows, 0);
  for (std::size_t r = 0; r < table_rows; ++r) {
    if (used[r]) {
      set.position[r] = set.rows.size();
      set.rows.push_back(r);
    }
  }
  return set;
}

std::vector<std::size_t> slot_rows(const RowSet& set, const std::vector<std::size_t>& ids,
                                   const std::vector<std::size_t>& slot_ids, std::size_t slots) {
  std::vector<std::size_t> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::size_t slot = slot_ids.empty() ? 0 : slot_ids[i];
    if (slot >= slots) throw std::out_of_range("slot index outside model slots");
    out[i] = set.position[ids[i]] * slots + slot;
  }
  return out;
}

}  // namespace

Prediction Model::predict(Tape& tape, const Array& features, const PairIndex& pairs, Mode mode) {
  if (features.rank() != 2 || features.dim(1) != spec_.feature_dim) {
    throw std::invalid_argument("model: feature table must be [rows, " +
                                std::to_string(spec_.feature_dim) + "], got " +
                                diff::shape_string(features.shape()));
  }
  if (pairs.tgt.size() != pairs.src.size()) throw std::invalid_argument("model: ragged pair index");
  const std::size_t rows = features.dim(0);
  const std::size_t slots = spec_.slots;
  const std::size_t batch = pairs.size();
  const HeadFamily family = spec_.head.family;
  Prediction out;

  if (family == HeadFamily::kUnconstrained) {
    const std::size_t f = spec_.feature_dim;
    Array x(Shape{batch, 2 * f});
    Array select(Shape{batch, slots * slots}, 0.0);
    for (std::size_t i = 0; i < batch; ++i) {
      if (pairs.src[i] >= rows || pairs.tgt[i] >= rows)
        throw std::out_of_range("pair index outside feature table");
      const double* a = features.values().data() + pairs.src[i] * f;
      const double* b = features.values().data() + pairs.tgt[i] * f;
      double* dst = x.values().data() + i * 2 * f;
      std::copy(a, a + f, dst);
      std::copy(b, b + f, dst + f);
      const std::size_t ss = pairs.src_slot.empty() ? 0 : pairs.src_slot[i];
      const std::size_t ts = pairs.tgt_slot.empty() ? 0 : pairs.tgt_slot[i];
      if (ss >= slots || ts >= slots) throw std::out_of_range("slot index outside model slots");
      select.at(i, ss * slots + ts) = 1.0;
    }
    const Var all = encoder_->encode(tape, tape.constant(std::move(x)), mode);
    const Var raw = tape.sum_reduce(tape.mul(all, tape.constant(std::move(select))), 1);
    out.distance = heads::apply_output_transform(tape, raw, spec_.head.transform,
                                                 spec_.head.gamma, &out.clamped);
    return out;
  }

  const std::size_t dim = spec_.head.latent_dim();
  if (family == HeadFamily::kAsymDot) {
    const RowSet src_set = unique_rows(rows, pairs.src, nullptr);
    const RowSet tgt_set = unique_rows(rows, pairs.tgt, nullptr);
    const Var fu = tape.reshape(encode_rows(tape, *encoder_, features, src_set.rows, mode),
                                Shape{src_set.rows.size() * slots, dim});
    const Var gv = tape.reshape(encode_rows(tape, *target_encoder_, features, tgt_set.rows, mode),
                                Shape{tgt_set.rows.size() * slots, dim});
    const Var u = tape.gather_rows(fu, slot_rows(src_set, pairs.src, pairs.src_slot, slots));
    const Var v = tape.gather_rows(gv, slot_rows(tgt_set, pairs.tgt, pairs.tgt_slot, slots));
    const Var raw = tape.sum_reduce(tape.mul(u, v), 1);
    out.distance = heads::apply_output_transform(tape, raw, spec_.head.transform,
                                                 spec_.head.gamma, &out.clamped);
    return out;
  }

  const RowSet set = unique_rows(rows, pairs.src, &pairs.tgt);
  const Var z = tape.reshape(encode_rows(tape, *encoder_, features, set.rows, mode),
                             Shape{set.rows.size() * slots, dim});
  const Var u = tape.gather_rows(z, slot_rows(set, pairs.src, pairs.src_slot, slots));
  const Var v = tape.gather_rows(z, slot_rows(set, pairs.tgt, pairs.tgt_slot, slots));
  out.distance = head_->distance(tape, u, v);
  return out;
}

std::vector<double> Model::predict_values(const Array& features, const PairIndex& pairs,
                                          std::size_t* clamped, std::size_t chunk) {
  std::vector<double> out;
  out.reserve(pairs.size());
  chunk = std::max<std::size_t>(chunk, 1);
  for (std::size_t begin = 0; begin < pairs.size(); begin += chunk) {
    const std::size_t end = std::min(pairs.size(), begin + chunk);
    Tape tape;
    const Prediction p = predict(tape, features, pairs.range(begin, end), Mode::kEval);
    const auto values = tape.value(p.distance).values();
    out.insert(out.end(), values.begin(), values.end());
    if (clamped) *clamped += p.clamped;
  }
  return out;
}

Array Model::latents(const Array& features) {
  if (is_pair_baseline(spec_.head.family))
    throw std::invalid_argument("model: pair baselines have no latent space");
  std::vector<std::size_t> rows(features.dim(0));
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Tape tape;
  const Var z = encode_rows(tape, *encoder_, features, rows, Mode::kEval);
  return tape.value(z).reshaped(Shape{rows.size() * spec_.slots, spec_.head.latent_dim()});
}

namespace {

nlohmann::json model_sidecar(const ModelSpec& spec, std::uint64_t seed, const ParamStore& store) {
  nlohmann::json names = nlohmann::json::array();
  for (auto id : store.ids()) names.push_back(store.name(id));
  return {{"head", nlohmann::json::parse(to_json(spec.head))},
          {"feature_dim", spec.feature_dim},
          {"hidden", spec.hidden},
          {"feature_norm", spec.feature_norm},
          {"slots", spec.slots},
          {"seed", seed},
          {"tensors", names}};
}

void dump(std::ofstream& os, const Array& a) {
  os.write(reinterpret_cast<const char*>(a.values().data()),
           static_cast<std::streamsize>(a.size() * sizeof(double)));
}

void slurp(std::ifstream& is, Array& a) {
  is.read(reinterpret_cast<char*>(a.values().data()),
          static_cast<std::streamsize>(a.size() * sizeof(double)));
  if (!is) throw std::runtime_error("model: truncated parameter file");
}

}  // namespace

void Model::save(const std::filesystem::path& path, std::size_t step) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("model: cannot write " + path.string());
  for (auto id : store_->ids()) dump(os, store_->value(id));
  for (const enc::Encoder* e : {encoder_.get(), target_encoder_.get()}) {
    if (!e) continue;
    for (const auto& st : e->norm_stats()) {
      dump(os, st.running_mean);
      dump(os, st.running_var);
    }
  }
  auto side = model_sidecar(spec_, seed_, *store_);
  side["step"] = step;
  std::ofstream js(path.string() + ".json");
  js << side.dump(2) << '\n';
}

std::size_t Model::load(const std::filesystem::path& path) {
  std::ifstream js(path.string() + ".json");
  if (!js) throw std::runtime_error("model: missing sidecar for " + path.string());
  auto side = nlohmann::json::parse(js);
  const std::size_t step = side.at("step").get<std::size_t>();
  side.erase("step");
  side["seed"] = seed_;  // parameters are loaded over any init seed
  if (side != model_sidecar(spec_, seed_, *store_))
    throw std::invalid_argument("model: sidecar does not match this model's spec");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("model: cannot read " + path.string());
  for (auto id : store_->ids()) slurp(is, store_->value(id));
  for (enc::Encoder* e : {encoder_.get(), target_encoder_.get()}) {
    if (!e) continue;
    for (auto& st : e->norm_stats()) {
      slurp(is, st.running_mean);
      slurp(is, st.running_var);
    }
  }
  return step;
}

}  // namespace qmet::model
