#pragma once

#include <cstddef>
#include <cstdint>

// Low-level numeric kernels. Each heavy kernel comes in two flavours: a
// *_serial reference used by the tests, and an OpenMP front (same name, no
// suffix) that splits independent output elements across threads. The split
// never changes the per-element accumulation order, so the two flavours
// produce bit-identical results at any thread count. Whole-array reductions
// stay serial for the same reason.
//
// All matrices are dense row-major doubles. Time-major layouts are
// channels x T so the innermost time loop is contiguous.

namespace affuse::kernels {

// Thread budget for the OpenMP fronts: the OpenMP default, capped by the
// AFFUSE_THREADS environment variable when it is set to a positive integer.
int max_threads();

// Overrides the budget for this process (benchmarks, single-core tests).
// n < 1 restores the default.
void set_max_threads(int n);

// c[m x n] = a[m x k] * b[k x n]; trans_a / trans_b read the operand as its
// transpose (a is then stored k x m, b is stored n x k).
void matmul_serial(const double* a, const double* b, double* c,
                   std::size_t m, std::size_t k, std::size_t n,
                   bool trans_a, bool trans_b);
void matmul(const double* a, const double* b, double* c,
            std::size_t m, std::size_t k, std::size_t n,
            bool trans_a, bool trans_b);

// Dilated causal 1-d convolution over x[in_c x t_len] with filter
// w[out_c x in_c x ksize] and bias b[out_c], writing y[out_c x t_len].
// Tap ksize-1 reads the current frame; earlier taps reach back by
// dilation steps each, with implicit zero left padding.
void causal_conv_forward_serial(const double* x, const double* w, const double* b,
                                double* y, std::size_t in_c, std::size_t out_c,
                                std::size_t ksize, std::size_t dilation,
                                std::size_t t_len);
void causal_conv_forward(const double* x, const double* w, const double* b,
                         double* y, std::size_t in_c, std::size_t out_c,
                         std::size_t ksize, std::size_t dilation,
                         std::size_t t_len);

// dx[in_c x t_len] += w^T folded against dy[out_c x t_len].
void causal_conv_backward_input_serial(const double* dy, const double* w, double* dx,
                                       std::size_t in_c, std::size_t out_c,
                                       std::size_t ksize, std::size_t dilation,
                                       std::size_t t_len);
void causal_conv_backward_input(const double* dy, const double* w, double* dx,
                                std::size_t in_c, std::size_t out_c,
                                std::size_t ksize, std::size_t dilation,
                                std::size_t t_len);

// dw[out_c x in_c x ksize] += correlation of dy with x; db[out_c] += row sums
// of dy.
void causal_conv_backward_filter_serial(const double* dy, const double* x,
                                        double* dw, double* db,
                                        std::size_t in_c, std::size_t out_c,
                                        std::size_t ksize, std::size_t dilation,
                                        std::size_t t_len);
void causal_conv_backward_filter(const double* dy, const double* x,
                                 double* dw, double* db,
                                 std::size_t in_c, std::size_t out_c,
                                 std::size_t ksize, std::size_t dilation,
                                 std::size_t t_len);

// Row-wise softmax of x[rows x cols] (max-shifted, overflow safe).
void softmax_rows_serial(const double* x, double* y,
                         std::size_t rows, std::size_t cols);
void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols);

// gx[r] = y[r] .* (gy[r] - dot(gy[r], y[r])) per row, accumulated into gx.
void softmax_rows_backward_serial(const double* y, const double* gy, double* gx,
                                  std::size_t rows, std::size_t cols);
void softmax_rows_backward(const double* y, const double* gy, double* gx,
                           std::size_t rows, std::size_t cols);

// Cross-branch attention over `branches` streams of width dk. q/k/v each hold
// `branches` pointers to dk x t_len buffers. Per time step t the branch rows
// are stacked into Q,K,V in branch order, S = softmax_rows(Q K^T / sqrt(dk)),
// and (S + 1) V is written to out[(branch*dk + c) x t_len]. `scores` receives
// the softmax matrices (branches x branches per step, step-major) for reuse in
// the backward pass; pass nullptr to discard them.
void attention_forward_serial(const double* const* q, const double* const* k,
                              const double* const* v, double* out, double* scores,
                              std::size_t branches, std::size_t dk,
                              std::size_t t_len);
void attention_forward(const double* const* q, const double* const* k,
                       const double* const* v, double* out, double* scores,
                       std::size_t branches, std::size_t dk, std::size_t t_len);

// Accumulates dq/dk/dv (same shapes as q/k/v) from d_out and the saved
// softmax scores. Null rows in dq/dk/dv are skipped.
void attention_backward_serial(const double* const* q, const double* const* k,
                               const double* const* v, const double* scores,
                               const double* d_out, double* const* dq,
                               double* const* dk_out, double* const* dv,
                               std::size_t branches, std::size_t dk,
                               std::size_t t_len);
void attention_backward(const double* const* q, const double* const* k,
                        const double* const* v, const double* scores,
                        const double* d_out, double* const* dq,
                        double* const* dk_out, double* const* dv,
                        std::size_t branches, std::size_t dk, std::size_t t_len);

// Per-column layer norm of x[dim x t_len] with learned gain/shift[dim].
// xhat (dim x t_len) and inv_std (t_len) are saved for the backward pass.
void layer_norm_forward_serial(const double* x, const double* gain,
                               const double* shift, double eps, double* y,
                               double* xhat, double* inv_std,
                               std::size_t dim, std::size_t t_len);
void layer_norm_forward(const double* x, const double* gain, const double* shift,
                        double eps, double* y, double* xhat, double* inv_std,
                        std::size_t dim, std::size_t t_len);

// Accumulates dx, dgain, dshift; any of them may be null to skip.
void layer_norm_backward_serial(const double* dy, const double* gain,
                                const double* xhat, const double* inv_std,
                                double* dx, double* dgain, double* dshift,
                                std::size_t dim, std::size_t t_len);
void layer_norm_backward(const double* dy, const double* gain, const double* xhat,
                         const double* inv_std, double* dx, double* dgain,
                         double* dshift, std::size_t dim, std::size_t t_len);

// Runs body(begin, end) over disjoint chunks of [0, n). Each index is touched
// by exactly one chunk, so parallel writes to per-index slots are race free
// and deterministic.
void parallel_chunks(std::size_t n, std::size_t grain,
                     const void* ctx, void (*body)(const void*, std::size_t, std::size_t));

template <class F>
void parallel_for(std::size_t n, std::size_t grain, F&& body) {
  const F& f = body;
  parallel_chunks(n, grain, static_cast<const void*>(&f),
                  [](const void* ctx, std::size_t b, std::size_t e) {
                    (*static_cast<const F*>(ctx))(b, e);
                  });
}

}  // namespace affuse::kernels
