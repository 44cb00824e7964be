#include <benchmark/benchmark.h>

#include "nllpo/bilevel.hpp"
#include "nllpo/dataset.hpp"
#include "nllpo/objectives.hpp"

using namespace nllpo;

namespace {

struct Setup {
  SyntheticData syn = generate_synthetic(2, 2, 2000, 0.5, 1);
  Rng rng{1};
  GaussianPolicy policy;
  Batch batch;
  NoiseDraws noise;
  RewardParams reward = RewardParams::isotropic(2, 2.0);
  PgConfig pg{1.0, 8, Estimator::kReparameterized};

  explicit Setup(std::size_t width, std::size_t rows)
      : policy(PolicyArch{2, 2, MeanHead::kMlp, VarianceHead::kMlp, {width, width}}, rng) {
    std::vector<std::size_t> idx(syn.data.train.begin(), syn.data.train.begin() + static_cast<std::ptrdiff_t>(rows));
    batch = syn.data.batch(idx);
    noise = draw_noise(rows, 2, pg.mc_samples, rng);
  }
};

void BM_NllGradient(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)), 128);
  auto loss = [&](auto& tape, Var p) { return nll_loss(tape, s.policy, p, s.batch); };
  for (auto _ : state) benchmark::DoNotOptimize(gradient(loss, s.policy.params().values()));
  state.counters["params"] = static_cast<double>(s.policy.params().size());
}
BENCHMARK(BM_NllGradient)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_PgGradient(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)), 128);
  auto loss = [&](auto& tape, Var p) {
    return pg_loss_gaussian(tape, s.policy, p, s.batch, reward_constant(tape, s.reward), s.pg, s.noise);
  };
  for (auto _ : state) benchmark::DoNotOptimize(gradient(loss, s.policy.params().values()));
}
BENCHMARK(BM_PgGradient)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_PgHvp(benchmark::State& state) {
  Setup s(static_cast<std::size_t>(state.range(0)), 128);
  auto loss = [&](auto& tape, Var p) {
    return pg_loss_gaussian(tape, s.policy, p, s.batch, reward_constant(tape, s.reward), s.pg, s.noise);
  };
  const Vector v(s.policy.params().size(), 1e-2);
  for (auto _ : state) benchmark::DoNotOptimize(hvp(loss, s.policy.params().values(), v));
}
BENCHMARK(BM_PgHvp)->Arg(16)->Arg(64)->Unit(benchmark::kMicrosecond);

void BM_Hypergradient(benchmark::State& state) {
  Setup s(16, 256);
  const Vector phi = s.reward.raw();
  auto inner = [&](auto& tape, Var ph, Var th) {
    return pg_loss_gaussian(tape, s.policy, th, s.batch, RewardVar{RewardKind::kScalar, 2, ph}, s.pg, s.noise);
  };
  auto outer = [&](auto& tape, Var th) { return nll_loss(tape, s.policy, th, s.batch); };
  HypergradientConfig cfg;
  cfg.cg.max_iters = static_cast<std::size_t>(state.range(0));
  cfg.cg.tol = 0.0;
  for (auto _ : state) benchmark::DoNotOptimize(hypergradient(inner, outer, phi, s.policy.params().values(), cfg));
}
BENCHMARK(BM_Hypergradient)->Arg(5)->Arg(20)->Unit(benchmark::kMillisecond);

void BM_CgDense(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  const Matrix g = rng.normal_matrix(n, n);
  Matrix a = matmul(transpose(g), g);
  for (std::size_t i = 0; i < n; ++i) a(i, i) += static_cast<double>(n);
  const Vector b(n, 1.0);
  const LinearOperator op = [&](std::span<const double> v) { return matvec(a, v); };
  CgConfig cfg;
  cfg.max_iters = n;
  for (auto _ : state) benchmark::DoNotOptimize(cg_solve(op, b, cfg));
}
BENCHMARK(BM_CgDense)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

}  // namespace

BENCHMARK_MAIN();
