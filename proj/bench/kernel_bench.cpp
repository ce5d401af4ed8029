// Compares the serial reference kernels against the OpenMP variants on the
// shapes the models actually use, and checks value agreement while at it.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#include "hemotrack/kernels.hpp"
#include "hemotrack/rng.hpp"

using namespace hemo;

namespace {

using clock_t_ = std::chrono::steady_clock;

std::vector<double> randu(int64_t n, Rng& rng) {
    std::vector<double> v;
    v.resize(size_t(n));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

template <typename F>
double time_ms(int reps, F&& f) {
    f();  // warm-up
    auto t0 = clock_t_::now();
    for (int i = 0; i < reps; ++i) f();
    auto t1 = clock_t_::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void report(const char* name, double serial_ms, double par_ms, double diff) {
    std::printf("%-26s serial %9.3f ms   omp %9.3f ms   speedup %5.2fx   max|diff| %.3g\n",
                name, serial_ms, par_ms, serial_ms / par_ms, diff);
}

}  // namespace

int main() {
    Rng rng(20260814);
    const int reps = 5;

    {  // attention-sized matmul: 3072 queries x 256 keys x 16 dims
        const int m = 3072, k = 16, n = 256;
        auto A = randu(int64_t(m) * k, rng), B = randu(int64_t(k) * n, rng);
        std::vector<double> Cs(size_t(m) * n), Cp(size_t(m) * n);
        const double ts = time_ms(reps, [&] { kern::serial::matmul(m, k, n, A.data(), B.data(), Cs.data(), false); });
        const double tp = time_ms(reps, [&] { kern::par::matmul(m, k, n, A.data(), B.data(), Cp.data(), false); });
        report("matmul 3072x16x256", ts, tp, max_abs_diff(Cs, Cp));
    }
    {  // transformer projection: 60 tokens x 64 x 64
        const int m = 60, k = 64, n = 64;
        auto A = randu(int64_t(m) * k, rng), B = randu(int64_t(n) * k, rng);
        std::vector<double> Cs(size_t(m) * n), Cp(size_t(m) * n);
        const double ts = time_ms(reps, [&] { kern::serial::matmul_nt(m, k, n, A.data(), B.data(), Cs.data(), false); });
        const double tp = time_ms(reps, [&] { kern::par::matmul_nt(m, k, n, A.data(), B.data(), Cp.data(), false); });
        report("matmul_nt 60x64x64", ts, tp, max_abs_diff(Cs, Cp));
    }
    {  // weight-gradient shape: 4096x16 ^T x 4096x16
        const int m = 4096, k = 16, n = 16;
        auto A = randu(int64_t(m) * k, rng), B = randu(int64_t(m) * n, rng);
        std::vector<double> Cs(size_t(k) * n), Cp(size_t(k) * n);
        const double ts = time_ms(reps, [&] { kern::serial::matmul_tn(m, k, n, A.data(), B.data(), Cs.data(), false); });
        const double tp = time_ms(reps, [&] { kern::par::matmul_tn(m, k, n, A.data(), B.data(), Cp.data(), false); });
        report("matmul_tn 4096x16x16", ts, tp, max_abs_diff(Cs, Cp));
    }
    {  // tracker backbone convolution at work resolution
        kern::Conv2dShape s{16, 24, 32, 32, 3, 3, 2, 1};
        auto in = randu(int64_t(s.cin) * s.hin * s.win, rng);
        auto w = randu(int64_t(s.cout) * s.cin * s.kh * s.kw, rng);
        auto b = randu(s.cout, rng);
        std::vector<double> os(size_t(s.cout) * s.hout() * s.wout()), op(os.size());
        const double ts = time_ms(reps, [&] { kern::serial::conv2d_fwd(s, in.data(), w.data(), b.data(), os.data()); });
        const double tp = time_ms(reps, [&] { kern::par::conv2d_fwd(s, in.data(), w.data(), b.data(), op.data()); });
        report("conv2d 16->32 24x32", ts, tp, max_abs_diff(os, op));
    }
    {  // localization-head upsample at native resolution
        const int c = 16, hin = 12, win = 16, hout = 96, wout = 128;
        auto in = randu(int64_t(c) * hin * win, rng);
        std::vector<double> os(size_t(c) * hout * wout), op(os.size());
        const double ts = time_ms(reps, [&] { kern::serial::resize_bilinear_fwd(c, hin, win, hout, wout, in.data(), os.data()); });
        const double tp = time_ms(reps, [&] { kern::par::resize_bilinear_fwd(c, hin, win, hout, wout, in.data(), op.data()); });
        report("resize 12x16->96x128 c16", ts, tp, max_abs_diff(os, op));
    }
    {  // attention softmax rows
        const int rows = 3072, n = 256;
        auto in = randu(int64_t(rows) * n, rng);
        std::vector<double> os(in.size()), op(in.size());
        const double ts = time_ms(reps, [&] { kern::serial::softmax_rows(rows, n, in.data(), os.data()); });
        const double tp = time_ms(reps, [&] { kern::par::softmax_rows(rows, n, in.data(), op.data()); });
        report("softmax 3072x256", ts, tp, max_abs_diff(os, op));
    }
    {  // gradient accumulation
        const int64_t n = 1 << 22;
        auto x = randu(n, rng);
        std::vector<double> ys(size_t(n), 0.0), yp(size_t(n), 0.0);
        const double ts = time_ms(reps, [&] { kern::serial::add_scaled(n, x.data(), 0.5, ys.data()); });
        const double tp = time_ms(reps, [&] { kern::par::add_scaled(n, x.data(), 0.5, yp.data()); });
        report("add_scaled 4M", ts, tp, max_abs_diff(ys, yp));
    }
    return 0;
}
