#include <benchmark/benchmark.h>

#include <vector>

#include "qmet/graphs.hpp"
#include "qmet/heads.hpp"
#include "qmet/random.hpp"
#include "qmet/tape.hpp"

using namespace qmet;
using diff::Array;

namespace {

Array random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return Array::matrix(rows, cols, v);
}

// Forward and backward through one head on a batch of latent pairs.
void BM_HeadForwardBackward(benchmark::State& state, HeadFamily family) {
  HeadSpec spec;
  spec.family = family;
  diff::ParamStore store;
  const heads::LatentHead head(spec, store, 1);
  Rng rng(2);
  const std::size_t batch = static_cast<std::size_t>(state.range(0));
  const Array u = random_matrix(rng, batch, spec.latent_dim());
  const Array v = random_matrix(rng, batch, spec.latent_dim());
  for (auto _ : state) {
    store.zero_grad();
    diff::Tape t;
    const auto d = head.distance(t, t.constant(u), t.constant(v));
    const auto total = t.sum_reduce(d);
    t.backward(total);
    benchmark::DoNotOptimize(t.value(total).item());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch));
}

BENCHMARK_CAPTURE(BM_HeadForwardBackward, iqe_sum, HeadFamily::kIqeSum)->Arg(256)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, iqe_maxmean, HeadFamily::kIqeMaxMean)->Arg(256)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, pqe_lh, HeadFamily::kPqeLh)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, deep_norm, HeadFamily::kDeepNormFixed)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, wide_norm, HeadFamily::kWideNorm)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, mrn, HeadFamily::kMrnFixed)->Arg(2048);
BENCHMARK_CAPTURE(BM_HeadForwardBackward, metric_euclid, HeadFamily::kMetricEuclid)->Arg(2048);

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Array a = random_matrix(rng, n, n), b = random_matrix(rng, n, n);
  for (auto _ : state) {
    Array c = diff::matmul(a, b);
    benchmark::DoNotOptimize(c.data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

// Tape bookkeeping on a long chain of cheap elementwise ops.
void BM_TapeChain(benchmark::State& state) {
  diff::ParamStore store;
  Rng rng(4);
  const auto x = store.add("x", random_matrix(rng, 32, 32));
  for (auto _ : state) {
    diff::Tape t;
    auto h = t.param(store, x);
    for (int i = 0; i < state.range(0); ++i) h = t.softplus(t.affine(h, 0.5, 0.1));
    t.backward(t.sum_reduce(h));
  }
}
BENCHMARK(BM_TapeChain)->Arg(100);

void BM_AllPairsDistances(benchmark::State& state) {
  const auto g = graphs::generate_graph(graphs::GraphKind::kDense, static_cast<std::size_t>(state.range(0)), 5);
  for (auto _ : state) benchmark::DoNotOptimize(graphs::all_pairs_distances(g).d.data());
}
BENCHMARK(BM_AllPairsDistances)->Arg(300);

}  // namespace

BENCHMARK_MAIN();
