#include <benchmark/benchmark.h>

#include "vxda/data.hpp"
#include "vxda/losses.hpp"
#include "vxda/metrics.hpp"
#include "vxda/model.hpp"
#include "vxda/rng.hpp"

using namespace vxda;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, bool grad = false) {
    Rng rng(seed);
    std::vector<float> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    auto t = Tensor::from(std::move(shape), std::move(v));
    t.set_requires_grad(grad);
    return t;
}

void BM_Conv2dForward(benchmark::State& state) {
    const auto c = state.range(0);
    auto x = random_tensor({32, c, 16, 16}, 1);
    auto k = random_tensor({2 * c, c, 3, 3}, 2);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, k, 2, 1));
}
BENCHMARK(BM_Conv2dForward)->Arg(3)->Arg(16)->Arg(32);

void BM_Conv3dForwardBackward(benchmark::State& state) {
    const auto v = state.range(0);
    auto x = random_tensor({16, 1, v, v, v}, 3, true);
    auto k = random_tensor({8, 1, 4, 4, 4}, 4, true);
    for (auto _ : state) {
        auto y = sum(conv3d(x, k, 2, 1));
        y.backward();
        benchmark::DoNotOptimize(k.grad().data());
    }
}
BENCHMARK(BM_Conv3dForwardBackward)->Arg(8)->Arg(16);

void BM_ConvTranspose3dForward(benchmark::State& state) {
    const auto v = state.range(0);
    auto x = random_tensor({16, 8, v, v, v}, 5);
    auto k = random_tensor({8, 4, 4, 4, 4}, 6);
    for (auto _ : state) benchmark::DoNotOptimize(conv_transpose3d(x, k, 2, 1));
}
BENCHMARK(BM_ConvTranspose3dForward)->Arg(4)->Arg(8);

void BM_MmdRbf(benchmark::State& state) {
    const auto n = state.range(0);
    auto s = random_tensor({n, 128}, 7);
    auto t = random_tensor({n, 128}, 8);
    for (auto _ : state) benchmark::DoNotOptimize(losses::mmd_loss(s, t, losses::KernelSpec::rbf_median()));
}
BENCHMARK(BM_MmdRbf)->Arg(16)->Arg(64);

void BM_ForwardFullEval(benchmark::State& state) {
    nn::NetworkConfig cfg;
    auto params = nn::init_params<float>(cfg, 1);
    auto images = random_tensor({state.range(0), 3, 32, 32}, 9);
    NoGradGuard guard;
    for (auto _ : state) benchmark::DoNotOptimize(nn::forward_full(images, cfg, params, 1.0, Mode::eval).voxel_refined);
    state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_ForwardFullEval)->Arg(1)->Arg(32);

void BM_TrainStep(benchmark::State& state) {
    nn::NetworkConfig cfg;
    auto params = nn::init_params<float>(cfg, 1);
    auto images = random_tensor({16, 3, 32, 32}, 10);
    auto gt = random_tensor({16, 16, 16, 16}, 11);
    for (auto& x : gt.mutable_data()) x = x > 0.8f ? 1.0f : 0.0f;
    for (auto _ : state) {
        params.zero_grad();
        auto out = nn::forward_full(images, cfg, params, 1.0, Mode::train);
        auto loss = losses::recon_loss(out.voxel_refined, gt);
        loss.backward();
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_GenerateShape(benchmark::State& state) {
    std::uint64_t seed = 0;
    for (auto _ : state) benchmark::DoNotOptimize(data::generate_shape(static_cast<int>(seed % 6), seed++, 16));
}
BENCHMARK(BM_GenerateShape);

void BM_RenderView(benchmark::State& state) {
    auto grid = data::generate_shape(1, 3, 16);
    for (auto _ : state) benchmark::DoNotOptimize(data::render_view(grid, 45, 32));
}
BENCHMARK(BM_RenderView);

void BM_Iou(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(12);
    std::vector<float> p(n * n * n), g(n * n * n);
    for (auto& x : p) x = static_cast<float>(rng.uniform());
    for (auto& x : g) x = rng.uniform() < 0.1 ? 1.0f : 0.0f;
    for (auto _ : state) benchmark::DoNotOptimize(metrics::iou(p, g, 0.4));
    state.SetBytesProcessed(state.iterations() * static_cast<std::int64_t>(2 * p.size() * sizeof(float)));
}
BENCHMARK(BM_Iou)->Arg(16)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
