#include "affuse/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace affuse::kernels {

namespace {

int env_thread_cap() {
#ifdef _OPENMP
  int cap = omp_get_max_threads();
#else
  int cap = 1;
#endif
  if (const char* s = std::getenv("AFFUSE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (end != s && v >= 1) cap = std::min<long>(cap, v);
  }
  return std::max(cap, 1);
}

int g_thread_override = 0;

// Work below this many flops is not worth a parallel region.
constexpr std::size_t kGrain = 1 << 14;

}  // namespace

int max_threads() {
  if (g_thread_override >= 1) return g_thread_override;
  static const int cap = env_thread_cap();
  return cap;
}

void set_max_threads(int n) { g_thread_override = n < 1 ? 0 : n; }

void parallel_chunks(std::size_t n, std::size_t grain, const void* ctx,
                     void (*body)(const void*, std::size_t, std::size_t)) {
  if (n == 0) return;
  const int nt = max_threads();
  if (nt <= 1 || n * std::max<std::size_t>(grain, 1) < kGrain) {
    body(ctx, 0, n);
    return;
  }
#ifdef _OPENMP
  const std::int64_t sn = static_cast<std::int64_t>(n);
#pragma omp parallel for num_threads(nt) schedule(static)
  for (std::int64_t i = 0; i < sn; ++i) {
    body(ctx, static_cast<std::size_t>(i), static_cast<std::size_t>(i) + 1);
  }
#else
  body(ctx, 0, n);
#endif
}

namespace {

// One output row of c. The t loop order is the determinism contract shared by
// the serial and parallel fronts.
inline void matmul_row(const double* a, const double* b, double* c, std::size_t i,
                       std::size_t k, std::size_t n, std::size_t m,
                       bool trans_a, bool trans_b) {
  double* ci = c + i * n;
  std::fill(ci, ci + n, 0.0);
  if (!trans_a && !trans_b) {
    const double* ai = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  } else if (!trans_a && trans_b) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += ai[t] * bj[t];
      ci[j] = acc;
    }
  } else if (trans_a && !trans_b) {
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a[t * m + i];
      const double* bt = b + t * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a[t * m + i] * bj[t];
      ci[j] = acc;
    }
  }
}

}  // namespace

void matmul_serial(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, c, i, k, n, m, trans_a, trans_b);
}

void matmul(const double* a, const double* b, double* c, std::size_t m,
            std::size_t k, std::size_t n, bool trans_a, bool trans_b) {
  parallel_for(m, k * n, [=](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      matmul_row(a, b, c, i, k, n, m, trans_a, trans_b);
  });
}

namespace {

inline void conv_forward_channel(const double* x, const double* w, const double* b,
                                 double* y, std::size_t o, std::size_t in_c,
                                 std::size_t ksize, std::size_t dilation,
                                 std::size_t t_len) {
  double* yo = y + o * t_len;
  std::fill(yo, yo + t_len, b[o]);
  for (std::size_t i = 0; i < in_c; ++i) {
    const double* xi = x + i * t_len;
    const double* wo = w + (o * in_c + i) * ksize;
    for (std::size_t kk = 0; kk < ksize; ++kk) {
      const std::size_t shift = (ksize - 1 - kk) * dilation;
      if (shift >= t_len) continue;
      const double wv = wo[kk];
      for (std::size_t t = shift; t < t_len; ++t) yo[t] += wv * xi[t - shift];
    }
  }
}

inline void conv_backward_input_channel(const double* dy, const double* w, double* dx,
                                        std::size_t i, std::size_t in_c,
                                        std::size_t out_c, std::size_t ksize,
                                        std::size_t dilation, std::size_t t_len) {
  double* dxi = dx + i * t_len;
  for (std::size_t o = 0; o < out_c; ++o) {
    const double* dyo = dy + o * t_len;
    const double* wo = w + (o * in_c + i) * ksize;
    for (std::size_t kk = 0; kk < ksize; ++kk) {
      const std::size_t shift = (ksize - 1 - kk) * dilation;
      if (shift >= t_len) continue;
      const double wv = wo[kk];
      for (std::size_t t = 0; t + shift < t_len; ++t) dxi[t] += wv * dyo[t + shift];
    }
  }
}

inline void conv_backward_filter_channel(const double* dy, const double* x,
                                         double* dw, double* db, std::size_t o,
                                         std::size_t in_c, std::size_t ksize,
                                         std::size_t dilation, std::size_t t_len) {
  const double* dyo = dy + o * t_len;
  for (std::size_t i = 0; i < in_c; ++i) {
    const double* xi = x + i * t_len;
    double* dwo = dw + (o * in_c + i) * ksize;
    for (std::size_t kk = 0; kk < ksize; ++kk) {
      const std::size_t shift = (ksize - 1 - kk) * dilation;
      if (shift >= t_len) continue;
      double acc = 0.0;
      for (std::size_t t = shift; t < t_len; ++t) acc += dyo[t] * xi[t - shift];
      dwo[kk] += acc;
    }
  }
  double acc = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) acc += dyo[t];
  db[o] += acc;
}

}  // namespace

void causal_conv_forward_serial(const double* x, const double* w, const double* b,
                                double* y, std::size_t in_c, std::size_t out_c,
                                std::size_t ksize, std::size_t dilation,
                                std::size_t t_len) {
  for (std::size_t o = 0; o < out_c; ++o)
    conv_forward_channel(x, w, b, y, o, in_c, ksize, dilation, t_len);
}

void causal_conv_forward(const double* x, const double* w, const double* b,
                         double* y, std::size_t in_c, std::size_t out_c,
                         std::size_t ksize, std::size_t dilation,
                         std::size_t t_len) {
  parallel_for(out_c, in_c * ksize * t_len, [=](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o)
      conv_forward_channel(x, w, b, y, o, in_c, ksize, dilation, t_len);
  });
}

void causal_conv_backward_input_serial(const double* dy, const double* w, double* dx,
                                       std::size_t in_c, std::size_t out_c,
                                       std::size_t ksize, std::size_t dilation,
                                       std::size_t t_len) {
  for (std::size_t i = 0; i < in_c; ++i)
    conv_backward_input_channel(dy, w, dx, i, in_c, out_c, ksize, dilation, t_len);
}

void causal_conv_backward_input(const double* dy, const double* w, double* dx,
                                std::size_t in_c, std::size_t out_c,
                                std::size_t ksize, std::size_t dilation,
                                std::size_t t_len) {
  parallel_for(in_c, out_c * ksize * t_len, [=](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i)
      conv_backward_input_channel(dy, w, dx, i, in_c, out_c, ksize, dilation, t_len);
  });
}

void causal_conv_backward_filter_serial(const double* dy, const double* x,
                                        double* dw, double* db, std::size_t in_c,
                                        std::size_t out_c, std::size_t ksize,
                                        std::size_t dilation, std::size_t t_len) {
  for (std::size_t o = 0; o < out_c; ++o)
    conv_backward_filter_channel(dy, x, dw, db, o, in_c, ksize, dilation, t_len);
}

void causal_conv_backward_filter(const double* dy, const double* x, double* dw,
                                 double* db, std::size_t in_c, std::size_t out_c,
                                 std::size_t ksize, std::size_t dilation,
                                 std::size_t t_len) {
  parallel_for(out_c, in_c * ksize * t_len, [=](std::size_t begin, std::size_t end) {
    for (std::size_t o = begin; o < end; ++o)
      conv_backward_filter_channel(dy, x, dw, db, o, in_c, ksize, dilation, t_len);
  });
}

namespace {

inline void softmax_row(const double* x, double* y, std::size_t r, std::size_t cols) {
  const double* xr = x + r * cols;
  double* yr = y + r * cols;
  double mx = xr[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    yr[j] = std::exp(xr[j] - mx);
    sum += yr[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) yr[j] *= inv;
}

inline void softmax_row_backward(const double* y, const double* gy, double* gx,
                                 std::size_t r, std::size_t cols) {
  const double* yr = y + r * cols;
  const double* gr = gy + r * cols;
  double* xr = gx + r * cols;
  double dot = 0.0;
  for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
  for (std::size_t j = 0; j < cols; ++j) xr[j] += yr[j] * (gr[j] - dot);
}

}  // namespace

void softmax_rows_serial(const double* x, double* y, std::size_t rows,
                         std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(x, y, r, cols);
}

void softmax_rows(const double* x, double* y, std::size_t rows, std::size_t cols) {
  parallel_for(rows, cols * 4, [=](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) softmax_row(x, y, r, cols);
  });
}

void softmax_rows_backward_serial(const double* y, const double* gy, double* gx,
                                  std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(y, gy, gx, r, cols);
}

void softmax_rows_backward(const double* y, const double* gy, double* gx,
                           std::size_t rows, std::size_t cols) {
  parallel_for(rows, cols * 4, [=](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) softmax_row_backward(y, gy, gx, r, cols);
  });
}

namespace {

constexpr std::size_t kMaxBranches = 8;

inline void attention_step(const double* const* q, const double* const* k,
                           const double* const* v, double* out, double* scores,
                           std::size_t t, std::size_t branches, std::size_t dk,
                           std::size_t t_len) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  double z[kMaxBranches * kMaxBranches];
  for (std::size_t i = 0; i < branches; ++i) {
    for (std::size_t j = 0; j < branches; ++j) {
      double acc = 0.0;
      const double* qi = q[i];
      const double* kj = k[j];
      for (std::size_t c = 0; c < dk; ++c) acc += qi[c * t_len + t] * kj[c * t_len + t];
      z[i * branches + j] = acc * inv_sqrt;
    }
  }
  double s[kMaxBranches * kMaxBranches];
  softmax_rows_serial(z, s, branches, branches);
  if (scores) {
    double* st = scores + t * branches * branches;
    for (std::size_t i = 0; i < branches * branches; ++i) st[i] = s[i];
  }
  for (std::size_t i = 0; i < branches; ++i) {
    for (std::size_t c = 0; c < dk; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < branches; ++j)
        acc += (s[i * branches + j] + 1.0) * v[j][c * t_len + t];
      out[(i * dk + c) * t_len + t] = acc;
    }
  }
}

inline void attention_step_backward(const double* const* q, const double* const* k,
                                    const double* const* v, const double* scores,
                                    const double* d_out, double* const* dq,
                                    double* const* dk_out, double* const* dv,
                                    std::size_t t, std::size_t branches,
                                    std::size_t dk, std::size_t t_len) {
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));
  const double* s = scores + t * branches * branches;
  double ds[kMaxBranches * kMaxBranches];
  for (std::size_t i = 0; i < branches; ++i) {
    for (std::size_t j = 0; j < branches; ++j) {
      double acc = 0.0;
      const double* vj = v[j];
      for (std::size_t c = 0; c < dk; ++c)
        acc += d_out[(i * dk + c) * t_len + t] * vj[c * t_len + t];
      ds[i * branches + j] = acc;
    }
  }
  if (dv) {
    for (std::size_t j = 0; j < branches; ++j) {
      if (!dv[j]) continue;
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < branches; ++i)
          acc += (s[i * branches + j] + 1.0) * d_out[(i * dk + c) * t_len + t];
        dv[j][c * t_len + t] += acc;
      }
    }
  }
  double dz[kMaxBranches * kMaxBranches];
  for (std::size_t i = 0; i < branches; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < branches; ++j)
      dot += ds[i * branches + j] * s[i * branches + j];
    for (std::size_t j = 0; j < branches; ++j)
      dz[i * branches + j] = s[i * branches + j] * (ds[i * branches + j] - dot);
  }
  if (dq) {
    for (std::size_t i = 0; i < branches; ++i) {
      if (!dq[i]) continue;
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < branches; ++j)
          acc += dz[i * branches + j] * k[j][c * t_len + t];
        dq[i][c * t_len + t] += acc * inv_sqrt;
      }
    }
  }
  if (dk_out) {
    for (std::size_t j = 0; j < branches; ++j) {
      if (!dk_out[j]) continue;
      for (std::size_t c = 0; c < dk; ++c) {
        double acc = 0.0;
        for (std::size_t i = 0; i < branches; ++i)
          acc += dz[i * branches + j] * q[i][c * t_len + t];
        dk_out[j][c * t_len + t] += acc * inv_sqrt;
      }
    }
  }
}

}  // namespace

void attention_forward_serial(const double* const* q, const double* const* k,
                              const double* const* v, double* out, double* scores,
                              std::size_t branches, std::size_t dk,
                              std::size_t t_len) {
  for (std::size_t t = 0; t < t_len; ++t)
    attention_step(q, k, v, out, scores, t, branches, dk, t_len);
}

void attention_forward(const double* const* q, const double* const* k,
                       const double* const* v, double* out, double* scores,
                       std::size_t branches, std::size_t dk, std::size_t t_len) {
  parallel_for(t_len, branches * branches * dk, [=](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t)
      attention_step(q, k, v, out, scores, t, branches, dk, t_len);
  });
}

void attention_backward_serial(const double* const* q, const double* const* k,
                               const double* const* v, const double* scores,
                               const double* d_out, double* const* dq,
                               double* const* dk_out, double* const* dv,
                               std::size_t branches, std::size_t dk,
                               std::size_t t_len) {
  for (std::size_t t = 0; t < t_len; ++t)
    attention_step_backward(q, k, v, scores, d_out, dq, dk_out, dv, t, branches, dk,
                            t_len);
}

void attention_backward(const double* const* q, const double* const* k,
                        const double* const* v, const double* scores,
                        const double* d_out, double* const* dq,
                        double* const* dk_out, double* const* dv,
                        std::size_t branches, std::size_t dk, std::size_t t_len) {
  parallel_for(t_len, branches * branches * dk, [=](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t)
      attention_step_backward(q, k, v, scores, d_out, dq, dk_out, dv, t, branches,
                              dk, t_len);
  });
}

namespace {

inline void layer_norm_col(const double* x, const double* gain, const double* shift,
                           double eps, double* y, double* xhat, double* inv_std,
                           std::size_t t, std::size_t dim, std::size_t t_len) {
  double mu = 0.0;
  for (std::size_t d = 0; d < dim; ++d) mu += x[d * t_len + t];
  mu /= static_cast<double>(dim);
  double var = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double c = x[d * t_len + t] - mu;
    var += c * c;
  }
  var /= static_cast<double>(dim);
  const double inv = 1.0 / std::sqrt(var + eps);
  inv_std[t] = inv;
  for (std::size_t d = 0; d < dim; ++d) {
    const double h = (x[d * t_len + t] - mu) * inv;
    xhat[d * t_len + t] = h;
    y[d * t_len + t] = gain[d] * h + shift[d];
  }
}

inline void layer_norm_col_backward(const double* dy, const double* gain,
                                    const double* xhat, const double* inv_std,
                                    double* dx, std::size_t t, std::size_t dim,
                                    std::size_t t_len) {
  double m1 = 0.0;
  double m2 = 0.0;
  for (std::size_t d = 0; d < dim; ++d) {
    const double gd = dy[d * t_len + t] * gain[d];
    m1 += gd;
    m2 += gd * xhat[d * t_len + t];
  }
  m1 /= static_cast<double>(dim);
  m2 /= static_cast<double>(dim);
  const double inv = inv_std[t];
  for (std::size_t d = 0; d < dim; ++d) {
    const double gd = dy[d * t_len + t] * gain[d];
    dx[d * t_len + t] += inv * (gd - m1 - xhat[d * t_len + t] * m2);
  }
}

}  // namespace

void layer_norm_forward_serial(const double* x, const double* gain,
                               const double* shift, double eps, double* y,
                               double* xhat, double* inv_std, std::size_t dim,
                               std::size_t t_len) {
  for (std::size_t t = 0; t < t_len; ++t)
    layer_norm_col(x, gain, shift, eps, y, xhat, inv_std, t, dim, t_len);
}

void layer_norm_forward(const double* x, const double* gain, const double* shift,
                        double eps, double* y, double* xhat, double* inv_std,
                        std::size_t dim, std::size_t t_len) {
  parallel_for(t_len, dim * 4, [=](std::size_t begin, std::size_t end) {
    for (std::size_t t = begin; t < end; ++t)
      layer_norm_col(x, gain, shift, eps, y, xhat, inv_std, t, dim, t_len);
  });
}

void layer_norm_backward_serial(const double* dy, const double* gain,
                                const double* xhat, const double* inv_std,
                                double* dx, double* dgain, double* dshift,
                                std::size_t dim, std::size_t t_len) {
  if (dx) {
    for (std::size_t t = 0; t < t_len; ++t)
      layer_norm_col_backward(dy, gain, xhat, inv_std, dx, t, dim, t_len);
  }
  if (dgain || dshift) {
    for (std::size_t d = 0; d < dim; ++d) {
      double sg = 0.0;
      double ss = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) {
        sg += dy[d * t_len + t] * xhat[d * t_len + t];
        ss += dy[d * t_len + t];
      }
      if (dgain) dgain[d] += sg;
      if (dshift) dshift[d] += ss;
    }
  }
}

void layer_norm_backward(const double* dy, const double* gain, const double* xhat,
                         const double* inv_std, double* dx, double* dgain,
                         double* dshift, std::size_t dim, std::size_t t_len) {
  if (dx) {
    parallel_for(t_len, dim * 4, [=](std::size_t begin, std::size_t end) {
      for (std::size_t t = begin; t < end; ++t)
        layer_norm_col_backward(dy, gain, xhat, inv_std, dx, t, dim, t_len);
    });
  }
  if (dgain || dshift) {
    parallel_for(dim, t_len * 2, [=](std::size_t begin, std::size_t end) {
      for (std::size_t d = begin; d < end; ++d) {
        double sg = 0.0;
        double ss = 0.0;
        for (std::size_t t = 0; t < t_len; ++t) {
          sg += dy[d * t_len + t] * xhat[d * t_len + t];
          ss += dy[d * t_len + t];
        }
        if (dgain) dgain[d] += sg;
        if (dshift) dshift[d] += ss;
      }
    });
  }
}

}  // namespace affuse::kernels
