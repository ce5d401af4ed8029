#pragma once

#include <cstdint>

namespace hemo::kern {

// Dense numeric kernels used by the autograd layer. Each kernel exists twice:
// a plain serial reference (kern::serial) and an OpenMP variant (kern::par)
// whose loops are parallelised over output elements only, so both produce the
// same values. Tests compare them; the dispatch layer picks one globally.

struct Conv2dShape {
    int cin, hin, win;
    int cout, kh, kw;
    int stride, pad;
    int hout() const { return (hin + 2 * pad - kh) / stride + 1; }
    int wout() const { return (win + 2 * pad - kw) / stride + 1; }
};

#define HEMO_KERNEL_SET                                                                          \
    /* C[m,n] = A[m,k] * B[k,n] (+C if accumulate) */                                            \
    void matmul(int m, int k, int n, const double* A, const double* B, double* C,                \
                bool accumulate);                                                                \
    /* C[m,n] = A[m,k] * B[n,k]^T */                                                             \
    void matmul_nt(int m, int k, int n, const double* A, const double* B, double* C,             \
                   bool accumulate);                                                             \
    /* C[k,n] = A[m,k]^T * B[m,n] */                                                             \
    void matmul_tn(int m, int k, int n, const double* A, const double* B, double* C,             \
                   bool accumulate);                                                             \
    void conv2d_fwd(const Conv2dShape& s, const double* in, const double* w, const double* bias, \
                    double* out);                                                                \
    void conv2d_bwd_input(const Conv2dShape& s, const double* gout, const double* w,             \
                          double* gin);                                                          \
    void conv2d_bwd_weight(const Conv2dShape& s, const double* in, const double* gout,           \
                           double* gw, double* gbias);                                           \
    void resize_bilinear_fwd(int c, int hin, int win, int hout, int wout, const double* in,      \
                             double* out);                                                       \
    void resize_bilinear_bwd(int c, int hin, int win, int hout, int wout, const double* gout,    \
                             double* gin);                                                       \
    void softmax_rows(int rows, int n, const double* x, double* y);                              \
    void add_scaled(int64_t n, const double* x, double a, double* y); /* y += a*x */

namespace serial {
HEMO_KERNEL_SET
}
namespace par {
HEMO_KERNEL_SET
}

#undef HEMO_KERNEL_SET

// Global backend switch (true = serial reference). Default is the OpenMP set.
void use_serial(bool on);
bool serial_enabled();

namespace dispatch {
void matmul(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate);
void matmul_nt(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate);
void matmul_tn(int m, int k, int n, const double* A, const double* B, double* C, bool accumulate);
void conv2d_fwd(const Conv2dShape& s, const double* in, const double* w, const double* bias,
                double* out);
void conv2d_bwd_input(const Conv2dShape& s, const double* gout, const double* w, double* gin);
void conv2d_bwd_weight(const Conv2dShape& s, const double* in, const double* gout, double* gw,
                       double* gbias);
void resize_bilinear_fwd(int c, int hin, int win, int hout, int wout, const double* in,
                         double* out);
void resize_bilinear_bwd(int c, int hin, int win, int hout, int wout, const double* gout,
                         double* gin);
void softmax_rows(int rows, int n, const double* x, double* y);
void add_scaled(int64_t n, const double* x, double a, double* y);
}  // namespace dispatch

}  // namespace hemo::kern
