// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

// Parallel kernels against the serial reference on a decoder-sized layer.

#include <benchmark/benchmark.h>

#include <random>

#include "contseg/kernels.hpp"
#include "contseg/kernels_ref.hpp"

using namespace contseg;

namespace {

struct Layer {
  Tensor4 x;
  std::vector<float> w, b;
  Tensor4 gy;
  int oc;
};

Layer make_layer(int ic, int oc, Dims3 d) {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> n(0.f, 1.f);
  Layer l{Tensor4(ic, d), std::vector<float>(std::size_t(oc) * ic * 27), std::vector<float>(oc), Tensor4(oc, d), oc};
  for (auto& v : l.x.storage()) v = n(rng);
  for (auto& v : l.w) v = n(rng);
  for (auto& v : l.gy.storage()) v = n(rng);
  return l;
}

double flops(const Layer& l) { return 2.0 * l.x.voxels() * l.x.channels() * l.oc * 27; }

void BM_conv_forward_parallel(benchmark::State& s) {
  const auto l = make_layer(int(s.range(0)), int(s.range(0)), {24, 32, 32});
  Tensor4 y;
  for (auto _ : s) {
    kernels::conv3d_forward(l.x, l.w, l.b, l.oc, 3, 1, y);
    benchmark::DoNotOptimize(y.data());
  }
  s.counters["flops"] = benchmark::Counter(flops(l), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_conv_forward_reference(benchmark::State& s) {
  const auto l = make_layer(int(s.range(0)), int(s.range(0)), {24, 32, 32});
  for (auto _ : s) {
    auto y = ref::conv3d_forward<float>(l.x, l.w, l.b, l.oc, 3, 1);
    benchmark::DoNotOptimize(y.data());
  }
  s.counters["flops"] = benchmark::Counter(flops(l), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_conv_backward_parallel(benchmark::State& s) {
  const auto l = make_layer(int(s.range(0)), int(s.range(0)), {24, 32, 32});
  Tensor4 gx;
  std::vector<float> gw(l.w.size()), gb(l.oc);
  for (auto _ : s) {
    kernels::conv3d_backward_data(l.gy, l.w, l.x.channels(), 3, 1, l.x.dims(), gx);
    kernels::conv3d_backward_params(l.x, l.gy, 3, 1, gw, gb);
    benchmark::DoNotOptimize(gx.data());
  }
  s.counters["flops"] = benchmark::Counter(2 * flops(l), benchmark::Counter::kIsIterationInvariantRate);
}

void BM_conv_backward_reference(benchmark::State& s) {
  const auto l = make_layer(int(s.range(0)), int(s.range(0)), {24, 32, 32});
  std::vector<float> gw(l.w.size()), gb(l.oc);
  for (auto _ : s) {
    auto gx = ref::conv3d_backward_data<float>(l.gy, l.w, l.x.channels(), 3, 1, l.x.dims());
    ref::conv3d_backward_params<float>(l.x, l.gy, 3, 1, gw, gb);
    benchmark::DoNotOptimize(gx.data());
  }
  s.counters["flops"] = benchmark::Counter(2 * flops(l), benchmark::Counter::kIsIterationInvariantRate);
}

}  // namespace

BENCHMARK(BM_conv_forward_parallel)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_forward_reference)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_parallel)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_conv_backward_reference)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
