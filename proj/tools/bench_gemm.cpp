// Rough throughput probe for the conv/matmul path. Not a test; used to pick
// training budgets that fit on one core.
#include <chrono>
#include <cstdio>

#include "cimt/tensor.hpp"

using namespace cimt;

static double time_ms(const std::function<void()>& fn, int reps) {
    auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

int main() {
    NoGradGuard ng;
    Rng rng(7);

    {
        const int m = 256, k = 256, n = 256;
        Tensor a = Tensor::randn({m, k}, rng);
        Tensor b = Tensor::randn({k, n}, rng);
        double ms = time_ms([&] { (void)matmul(a, b); }, 20);
        double gflops = 2.0 * m * k * n / (ms * 1e6);
        std::printf("matmul %dx%dx%d: %.2f ms, %.2f GFLOP/s\n", m, k, n, ms, gflops);
    }

    {
        // encoder-ish conv: 16 -> 32 channels on a 16^3 grid
        const int ci = 16, co = 32, s = 16;
        Tensor x = Tensor::randn({ci, s, s, s}, rng);
        Tensor w = Tensor::randn({co, ci, 3, 3, 3}, rng, 0.1f);
        Tensor b = Tensor::zeros({co});
        double ms = time_ms([&] { (void)conv3(x, w, b, 1, 1); }, 10);
        double flops = 2.0 * co * ci * 27 * s * s * s;
        std::printf("conv3 %d->%d @%d^3: %.2f ms, %.2f GFLOP/s\n", ci, co, s, ms, flops / (ms * 1e6));
    }

    {
        // first encoder conv at full patch: 1 -> 8 channels on 32^3
        const int ci = 1, co = 8, s = 32;
        Tensor x = Tensor::randn({ci, s, s, s}, rng);
        Tensor w = Tensor::randn({co, ci, 3, 3, 3}, rng, 0.1f);
        Tensor b = Tensor::zeros({co});
        double ms = time_ms([&] { (void)conv3(x, w, b, 1, 1); }, 10);
        double flops = 2.0 * co * ci * 27 * s * s * s;
        std::printf("conv3 %d->%d @%d^3: %.2f ms, %.2f GFLOP/s\n", ci, co, s, ms, flops / (ms * 1e6));
    }
    return 0;
}
