#include <atomic>

#include "hemotrack/kernels.hpp"

namespace hemo::kern {

namespace {
std::atomic<bool> g_serial{false};
}

void use_serial(bool on) { g_serial.store(on); }
bool serial_enabled() { return g_serial.load(); }

namespace dispatch {

#define HEMO_DISPATCH(fn, ...)            \
    do {                                  \
        if (g_serial.load())              \
            serial::fn(__VA_ARGS__);      \
        else                              \
            par::fn(__VA_ARGS__);         \
    } while (0)

void matmul(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate) {
    HEMO_DISPATCH(matmul, m, k, n, A, B, C, accumulate);
}
void matmul_nt(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate) {
    HEMO_DISPATCH(matmul_nt, m, k, n, A, B, C, accumulate);
}
void matmul_tn(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate) {
    HEMO_DISPATCH(matmul_tn, m, k, n, A, B, C, accumulate);
}
void conv2d_fwd(const Conv2dShape& s, const double* in, const double* w, const double* bias,
                double* out) {
    HEMO_DISPATCH(conv2d_fwd, s, in, w, bias, out);
}
void conv2d_bwd_input(const Conv2dShape& s, const double* gout, const double* w, double* gin) {
    HEMO_DISPATCH(conv2d_bwd_input, s, gout, w, gin);
}
void conv2d_bwd_weight(const Conv2dShape& s, const double* in, const double* gout, double* gw,
                       double* gbias) {
    HEMO_DISPATCH(conv2d_bwd_weight, s, in, gout, gw, gbias);
}
void resize_bilinear_fwd(int c, int hin, int win, int hout, int wout, const double* in,
                         double* out) {
    HEMO_DISPATCH(resize_bilinear_fwd, c, hin, win, hout, wout, in, out);
}
void resize_bilinear_bwd(int c, int hin, int win, int hout, int wout, const double* gout,
                         double* gin) {
    HEMO_DISPATCH(resize_bilinear_bwd, c, hin, win, hout, wout, gout, gin);
}
void softmax_rows(int rows, int n, const double* x, double* y) {
    HEMO_DISPATCH(softmax_rows, rows, n, x, y);
}
void add_scaled(int64_t n, const double* x, double a, double* y) {
    HEMO_DISPATCH(add_scaled, n, x, a, y);
}

#undef HEMO_DISPATCH

}  // namespace dispatch
}  // namespace hemo::kern
