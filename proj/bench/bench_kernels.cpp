// Serial reference kernels against their OpenMP versions, plus one Jacobi
// window end to end. Run with OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include <vector>

#include "cllm/jacobi.hpp"
#include "cllm/kernels.hpp"
#include "cllm/rng.hpp"

namespace {

using namespace cllm;

std::vector<double> noise(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(count);
  for (double& x : v) x = rng.normal();
  return v;
}

template <bool Parallel>
void BM_gemm_nn(benchmark::State& state) {
  const std::size_t m = static_cast<std::size_t>(state.range(0)), k = 128, n = 512;
  const auto a = noise(m * k, 1), b = noise(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
    } else {
      kernels::serial::gemm_nn(a.data(), b.data(), c.data(), m, k, n, false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * k * n));
}

template <bool Parallel>
void BM_attention(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0)), offset = 48, d = 128, heads = 4;
  const auto q = noise(rows * d, 3), keys = noise((offset + rows) * d, 4), values = noise((offset + rows) * d, 5);
  std::vector<double> out(rows * d);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::attention_forward(q.data(), keys.data(), values.data(), rows, offset, d, heads, out.data(), nullptr);
    } else {
      kernels::serial::attention_forward(q.data(), keys.data(), values.data(), rows, offset, d, heads, out.data(),
                                         nullptr);
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_layer_norm(benchmark::State& state) {
  const std::size_t rows = static_cast<std::size_t>(state.range(0)), d = 128;
  const auto x = noise(rows * d, 6), gamma = noise(d, 7), beta = noise(d, 8);
  std::vector<double> y(rows * d), mean(rows), rstd(rows);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::layer_norm_forward(x.data(), gamma.data(), beta.data(), rows, d, 1e-5, y.data(), mean.data(), rstd.data());
    } else {
      kernels::serial::layer_norm_forward(x.data(), gamma.data(), beta.data(), rows, d, 1e-5, y.data(), mean.data(),
                                          rstd.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_jacobi_window(benchmark::State& state) {
  const Model model = init_model(ModelConfig{});
  const TokenSequence prompt{5, 9, 12, 3, 7, 21, 2, 14};
  const auto n = static_cast<std::size_t>(state.range(0));
  std::uint64_t seed = 0;
  for (auto _ : state) {
    KVCache cache(model.config());
    benchmark::DoNotOptimize(jacobi_decode_kv(model, prompt, n, seed++, cache));
  }
}

}  // namespace

BENCHMARK(BM_gemm_nn<false>)->Name("gemm_nn/serial")->Arg(16)->Arg(64)->Arg(256);
BENCHMARK(BM_gemm_nn<true>)->Name("gemm_nn/openmp")->Arg(16)->Arg(64)->Arg(256);
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Arg(16)->Arg(64);
BENCHMARK(BM_attention<true>)->Name("attention/openmp")->Arg(16)->Arg(64);
BENCHMARK(BM_layer_norm<false>)->Name("layer_norm/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_layer_norm<true>)->Name("layer_norm/openmp")->Arg(64)->Arg(256);
BENCHMARK(BM_jacobi_window)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
