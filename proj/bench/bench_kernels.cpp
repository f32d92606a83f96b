// Serial reference kernels against the OpenMP kernels at model-sized shapes.

#include <benchmark/benchmark.h>

#include <random>

#include "recipecrit/kernels.hpp"

using namespace recipecrit;

namespace {

Matrix random_matrix(int rows, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (auto& x : m.data) x = n(rng);
    return m;
}

template <auto Gemm>
void BM_gemm(benchmark::State& state) {
    const int n = static_cast<int>(state.range(0)), d = static_cast<int>(state.range(1));
    const Matrix a = random_matrix(n, d, 1), b = random_matrix(d, d, 2);
    Matrix c(n, d);
    for (auto _ : state) {
        Gemm(a, b, c, false);
        benchmark::DoNotOptimize(c.data.data());
    }
    state.SetItemsProcessed(state.iterations() * std::int64_t(n) * d * d);
}

template <auto Forward, auto Backward>
void BM_attention(benchmark::State& state) {
    // Batches of 32 sequences of length `len`, model width 64, two heads.
    const int len = static_cast<int>(state.range(0)), batch = 32, d = 64;
    std::vector<kernels::AttentionSegment> segs;
    for (int b = 0; b < batch; ++b) segs.push_back({b * len, len, b * len, len});
    const Matrix q = random_matrix(batch * len, d, 3), k = random_matrix(batch * len, d, 4),
                 v = random_matrix(batch * len, d, 5), dout = random_matrix(batch * len, d, 6);
    const kernels::AttentionShape shape{2, true};
    Matrix out(batch * len, d), dq(batch * len, d), dk(batch * len, d), dv(batch * len, d);
    std::vector<double> probs;
    for (auto _ : state) {
        Forward(q, k, v, segs, shape, out, probs);
        Backward(q, k, v, segs, shape, probs, dout, dq, dk, dv);
        benchmark::DoNotOptimize(dq.data.data());
    }
}

template <auto Forward>
void BM_layer_norm(benchmark::State& state) {
    const Matrix x = random_matrix(static_cast<int>(state.range(0)), 64, 7);
    const std::vector<double> g(64, 1.0), b(64, 0.0);
    Matrix y(x.rows, x.cols);
    std::vector<double> mean, rstd;
    for (auto _ : state) {
        Forward(x, g, b, 1e-5, y, mean, rstd);
        benchmark::DoNotOptimize(y.data.data());
    }
}

}  // namespace

BENCHMARK(BM_gemm<kernels::serial::gemm>)->Name("gemm/serial")->Args({256, 64})->Args({2048, 64})->Args({2048, 256});
BENCHMARK(BM_gemm<kernels::omp::gemm>)->Name("gemm/omp")->Args({256, 64})->Args({2048, 64})->Args({2048, 256});
BENCHMARK(BM_attention<kernels::serial::attention_forward, kernels::serial::attention_backward>)
    ->Name("attention/serial")
    ->Arg(16)
    ->Arg(64);
BENCHMARK(BM_attention<kernels::omp::attention_forward, kernels::omp::attention_backward>)
    ->Name("attention/omp")
    ->Arg(16)
    ->Arg(64);
BENCHMARK(BM_layer_norm<kernels::serial::layer_norm_forward>)->Name("layer_norm/serial")->Arg(4096);
BENCHMARK(BM_layer_norm<kernels::omp::layer_norm_forward>)->Name("layer_norm/omp")->Arg(4096);

BENCHMARK_MAIN();
