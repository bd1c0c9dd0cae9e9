#include <benchmark/benchmark.h>
#include <omp.h>

#include <random>

#include "hila/encoder.hpp"
#include "hila/kernels.hpp"
#include "hila/kernels_serial.hpp"

using namespace hila;

namespace {

Tensor<float> rnd(Shape shape, unsigned seed) {
  std::mt19937 gen(seed);
  std::uniform_real_distribution<float> dist(-1, 1);
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = dist(gen);
  return t;
}

// Parallel variants take the thread count as their argument.
void threads(benchmark::State& st) { omp_set_num_threads(static_cast<int>(st.range(0))); }

void thread_args(benchmark::internal::Benchmark* b) {
  b->Arg(1);
  if (omp_get_num_procs() > 1) b->Arg(omp_get_num_procs());
}

constexpr std::int64_t kM = 1024, kN = 64, kK = 256;

void BM_gemm_serial(benchmark::State& st) {
  const auto a = rnd({kM, kK}, 1), b = rnd({kK, kN}, 2);
  Tensor<float> c({kM, kN});
  for (auto _ : st) {
    kernels::serial::gemm(kM, kN, kK, a.ptr(), false, b.ptr(), false, c.ptr(), false);
    benchmark::DoNotOptimize(c.ptr());
  }
  st.SetItemsProcessed(st.iterations() * kM * kN * kK);
}
void BM_gemm_omp(benchmark::State& st) {
  threads(st);
  const auto a = rnd({kM, kK}, 1), b = rnd({kK, kN}, 2);
  Tensor<float> c({kM, kN});
  for (auto _ : st) {
    kernels::gemm(kM, kN, kK, a.ptr(), false, b.ptr(), false, c.ptr(), false);
    benchmark::DoNotOptimize(c.ptr());
  }
  st.SetItemsProcessed(st.iterations() * kM * kN * kK);
}

const kernels::ConvSpec kMerge{2, 1, false};

void BM_conv_serial(benchmark::State& st) {
  const auto x = rnd({2, 32, 32, 16}, 3), w = rnd({3, 3, 16, 32}, 4), b = rnd({32}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::serial::conv2d(x, w, &b, kMerge));
}
void BM_conv_omp(benchmark::State& st) {
  threads(st);
  const auto x = rnd({2, 32, 32, 16}, 3), w = rnd({3, 3, 16, 32}, 4), b = rnd({32}, 5);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::conv2d(x, w, &b, kMerge));
}

const PatchGeometry kWindow;

void BM_unfold_serial(benchmark::State& st) {
  const auto x = rnd({2, 32, 32, 32}, 6);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::serial::unfold(x, kWindow));
}
void BM_unfold_omp(benchmark::State& st) {
  threads(st);
  const auto x = rnd({2, 32, 32, 32}, 6);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::unfold(x, kWindow));
}

void BM_fold_serial(benchmark::State& st) {
  const auto p = rnd({2, 256, 16, 32}, 7);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::serial::fold(p, 32, 32, kWindow));
}
void BM_fold_omp(benchmark::State& st) {
  threads(st);
  const auto p = rnd({2, 256, 16, 32}, 7);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::fold(p, 32, 32, kWindow));
}

void BM_softmax_serial(benchmark::State& st) {
  const auto x = rnd({4096, 64}, 8);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::serial::softmax_lastdim(x));
}
void BM_softmax_omp(benchmark::State& st) {
  threads(st);
  const auto x = rnd({4096, 64}, 8);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::softmax_lastdim(x));
}

void BM_layernorm_serial(benchmark::State& st) {
  const auto x = rnd({4096, 64}, 9), g = rnd({64}, 10), b = rnd({64}, 11);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::serial::layer_norm(x, g, b, 1e-6f));
}
void BM_layernorm_omp(benchmark::State& st) {
  threads(st);
  const auto x = rnd({4096, 64}, 9), g = rnd({64}, 10), b = rnd({64}, 11);
  for (auto _ : st) benchmark::DoNotOptimize(kernels::layer_norm(x, g, b, 1e-6f));
}

// End to end: tiny model forward on a 64x64 batch of four, with and without HILA.
void BM_forward(benchmark::State& st) {
  omp_set_num_threads(static_cast<int>(st.range(0)));
  ModelConfig cfg = tiny_config();
  if (st.range(1) == 0)
    for (auto& s : cfg.stages) s.hila = false;
  const Model<float> m(cfg, 1);
  const auto x = rnd({4, 64, 64, 3}, 12);
  NoGradGuard guard;
  for (auto _ : st) benchmark::DoNotOptimize(m.forward(Var<float>(x)));
}

}  // namespace

BENCHMARK(BM_gemm_serial);
BENCHMARK(BM_gemm_omp)->Apply(thread_args);
BENCHMARK(BM_conv_serial);
BENCHMARK(BM_conv_omp)->Apply(thread_args);
BENCHMARK(BM_unfold_serial);
BENCHMARK(BM_unfold_omp)->Apply(thread_args);
BENCHMARK(BM_fold_serial);
BENCHMARK(BM_fold_omp)->Apply(thread_args);
BENCHMARK(BM_softmax_serial);
BENCHMARK(BM_softmax_omp)->Apply(thread_args);
BENCHMARK(BM_layernorm_serial);
BENCHMARK(BM_layernorm_omp)->Apply(thread_args);
BENCHMARK(BM_forward)
    ->Apply([](benchmark::internal::Benchmark* b) {
      for (std::int64_t hila : {0, 1}) {
        b->Args({1, hila});
        if (omp_get_num_procs() > 1) b->Args({omp_get_num_procs(), hila});
      }
    })
    ->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
