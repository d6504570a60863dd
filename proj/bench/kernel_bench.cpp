#include <chrono>
#include <cstdio>
#include <vector>

#include "loom/kernels.hpp"
#include "loom/layout.hpp"
#include "loom/rng.hpp"
#include "loom/tensor.hpp"

using namespace loom;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

Tensor random_matrix(int r, int c, RandomStream& rng) {
    Tensor t(r, c);
    for (double& v : t.data) v = rng.normal();
    return t;
}

template <typename F>
double time_best_of(int reps, F&& fn) {
    double best = 1e30;
    for (int i = 0; i < reps; i++) {
        auto t0 = std::chrono::steady_clock::now();
        fn();
        best = std::min(best, seconds_since(t0));
    }
    return best;
}

void bench_matmul(int n, RandomStream& rng) {
    Tensor a = random_matrix(n, n, rng), b = random_matrix(n, n, rng);
    Tensor c1(n, n), c2(n, n);
    const double tp = time_best_of(3, [&] {
        kernels::matmul(a.data.data(), b.data.data(), c1.data.data(), n, n, n);
    });
    const double ts = time_best_of(3, [&] {
        kernels::matmul_ref(a.data.data(), b.data.data(), c2.data.data(), n, n, n);
    });
    if (!bitwise_equal(c1, c2)) {
        std::printf("matmul %d: MISMATCH\n", n);
        return;
    }
    const double gflop = 2.0 * n * n * n / 1e9;
    std::printf("matmul      n=%4d  parallel %8.2f ms (%6.2f GF/s)  serial %8.2f ms (%6.2f GF/s)  speedup %.2fx\n",
                n, tp * 1e3, gflop / tp, ts * 1e3, gflop / ts, ts / tp);
}

void bench_attention(int rows, int d, int heads, RandomStream& rng) {
    std::vector<SegmentEvent> events = {{Role::Input, rows / 4}, {Role::Text, rows / 2},
                                        {Role::Query, rows / 4}};
    SequenceLayout layout = build_layout(events);
    const int n = layout.size();
    kernels::MaskRows mask = to_mask_rows(build_mask(layout));
    Tensor q = random_matrix(n, d, rng), k = random_matrix(n, d, rng),
           v = random_matrix(n, d, rng);
    Tensor o1(n, d), o2(n, d);
    std::vector<double> w1(static_cast<size_t>(heads) * mask.idx.size());
    std::vector<double> w2(w1.size());
    const double tp = time_best_of(3, [&] {
        kernels::attention_fwd(q.data.data(), k.data.data(), v.data.data(), d, heads, mask,
                               o1.data.data(), w1.data());
    });
    const double ts = time_best_of(3, [&] {
        kernels::attention_fwd_ref(q.data.data(), k.data.data(), v.data.data(), d, heads, mask,
                                   o2.data.data(), w2.data());
    });
    if (!bitwise_equal(o1, o2)) {
        std::printf("attention n=%d: MISMATCH\n", n);
        return;
    }
    std::printf("attention   n=%4d d=%3d h=%d  parallel %8.2f ms  serial %8.2f ms  speedup %.2fx\n",
                n, d, heads, tp * 1e3, ts * 1e3, ts / tp);
}

void bench_pool(int l, int d, int window, RandomStream& rng) {
    Tensor x = random_matrix(l, d, rng);
    const int rows = (l + window - 1) / window;
    Tensor o1(rows, d), o2(rows, d);
    const double tp = time_best_of(5, [&] {
        kernels::avg_pool_rows(x.data.data(), l, d, window, o1.data.data());
    });
    const double ts = time_best_of(5, [&] {
        kernels::avg_pool_rows_ref(x.data.data(), l, d, window, o2.data.data());
    });
    if (!bitwise_equal(o1, o2)) {
        std::printf("pool l=%d: MISMATCH\n", l);
        return;
    }
    std::printf("avg_pool    l=%4d d=%3d w=%2d  parallel %8.3f ms  serial %8.3f ms  speedup %.2fx\n",
                l, d, window, tp * 1e3, ts * 1e3, ts / tp);
}

}  // namespace

int main() {
    RandomStream rng(derive_seed(7, "bench"));
    std::printf("parallel kernels vs serial reference (outputs checked bitwise)\n\n");
    bench_matmul(128, rng);
    bench_matmul(256, rng);
    bench_matmul(512, rng);
    bench_attention(256, 64, 4, rng);
    bench_attention(512, 64, 8, rng);
    bench_pool(4096, 64, 4, rng);
    return 0;
}
