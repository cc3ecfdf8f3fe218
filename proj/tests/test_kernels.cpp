#include <cmath>
#include <cstring>
#include <vector>

#include "affuse/kernels.hpp"
#include "affuse/rng.hpp"
#include "doctest.h"
#include "support/helpers.hpp"

using namespace affuse;
namespace kn = affuse::kernels;

namespace {

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_SUITE("kernels") {

TEST_CASE("matmul reproduces a hand-worked product") {
  const std::vector<double> a{1, 2, 3, 4};
  const std::vector<double> b{5, 6, 7, 8};
  std::vector<double> c(4);
  kn::matmul_serial(a.data(), b.data(), c.data(), 2, 2, 2, false, false);
  CHECK(c == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul transpose flags act like explicit transposition") {
  Rng rng(7);
  const std::size_t m = 5, k = 7, n = 4;
  const std::vector<double> a = test::rand_vec(rng, m * k);
  const std::vector<double> b = test::rand_vec(rng, k * n);
  std::vector<double> at(k * m), bt(n * k);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < k; ++c) at[c * m + r] = a[r * k + c];
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t c = 0; c < n; ++c) bt[c * k + r] = b[r * n + c];

  std::vector<double> base(m * n), out(m * n);
  kn::matmul_serial(a.data(), b.data(), base.data(), m, k, n, false, false);

  // Every variant accumulates over the inner index in ascending order, so the
  // results agree bit for bit, not just approximately.
  kn::matmul_serial(at.data(), b.data(), out.data(), m, k, n, true, false);
  CHECK(bitwise_equal(out, base));
  kn::matmul_serial(a.data(), bt.data(), out.data(), m, k, n, false, true);
  CHECK(bitwise_equal(out, base));
  kn::matmul_serial(at.data(), bt.data(), out.data(), m, k, n, true, true);
  CHECK(bitwise_equal(out, base));
}

TEST_CASE("softmax rows are normalized and shift invariant") {
  Rng rng(9);
  const std::size_t rows = 7, cols = 9;
  std::vector<double> x = test::rand_vec(rng, rows * cols, 3.0);
  std::vector<double> y(rows * cols);
  kn::softmax_rows_serial(x.data(), y.data(), rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      CHECK(y[r * cols + c] > 0.0);
      s += y[r * cols + c];
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }

  std::vector<double> shifted = x;
  for (double& v : shifted) v += 250.0;  // would overflow exp without max shift
  std::vector<double> y2(rows * cols);
  kn::softmax_rows_serial(shifted.data(), y2.data(), rows, cols);
  for (std::size_t i = 0; i < y.size(); ++i)
    CHECK(y2[i] == doctest::Approx(y[i]).epsilon(1e-12));
}

TEST_CASE("attention forward matches a per-step brute force") {
  Rng rng(21);
  const std::size_t branches = 3, dk = 4, t_len = 6;
  std::vector<std::vector<double>> q(branches), k(branches), v(branches);
  std::vector<const double*> qp, kp, vp;
  for (std::size_t b = 0; b < branches; ++b) {
    q[b] = test::rand_vec(rng, dk * t_len);
    k[b] = test::rand_vec(rng, dk * t_len);
    v[b] = test::rand_vec(rng, dk * t_len);
    qp.push_back(q[b].data());
    kp.push_back(k[b].data());
    vp.push_back(v[b].data());
  }
  std::vector<double> out(branches * dk * t_len);
  std::vector<double> scores(t_len * branches * branches);
  kn::attention_forward_serial(qp.data(), kp.data(), vp.data(), out.data(),
                               scores.data(), branches, dk, t_len);

  for (std::size_t t = 0; t < t_len; ++t) {
    // Stack the branch rows at step t and redo the arithmetic longhand.
    double logits[3][3];
    for (std::size_t i = 0; i < branches; ++i)
      for (std::size_t j = 0; j < branches; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dk; ++c)
          dot += q[i][c * t_len + t] * k[j][c * t_len + t];
        logits[i][j] = dot / std::sqrt(static_cast<double>(dk));
      }
    double soft[3][3];
    for (std::size_t i = 0; i < branches; ++i) {
      double mx = logits[i][0];
      for (std::size_t j = 1; j < branches; ++j) mx = std::max(mx, logits[i][j]);
      double denom = 0.0;
      for (std::size_t j = 0; j < branches; ++j) {
        soft[i][j] = std::exp(logits[i][j] - mx);
        denom += soft[i][j];
      }
      for (std::size_t j = 0; j < branches; ++j) soft[i][j] /= denom;
    }
    for (std::size_t i = 0; i < branches; ++i)
      for (std::size_t j = 0; j < branches; ++j)
        CHECK(scores[(t * branches + i) * branches + j] ==
              doctest::Approx(soft[i][j]).epsilon(1e-12));
    for (std::size_t i = 0; i < branches; ++i)
      for (std::size_t c = 0; c < dk; ++c) {
        double expect = 0.0;
        for (std::size_t j = 0; j < branches; ++j)
          expect += (soft[i][j] + 1.0) * v[j][c * t_len + t];
        const double got = out[(i * dk + c) * t_len + t];
        CHECK(got == doctest::Approx(expect).epsilon(1e-10));
      }
  }
}

TEST_CASE("openmp fronts match the serial reference bit for bit") {
  // Sizes are chosen so n * grain clears the internal split threshold; with a
  // smaller problem the front would just run the serial path and the test
  // would prove nothing.
  kn::set_max_threads(4);
  Rng rng(33);

  SUBCASE("matmul") {
    const std::size_t m = 48, k = 64, n = 56;
    const std::vector<double> a = test::rand_vec(rng, m * k);
    const std::vector<double> b = test::rand_vec(rng, k * n);
    std::vector<double> cs(m * n), cp(m * n);
    kn::matmul_serial(a.data(), b.data(), cs.data(), m, k, n, false, false);
    kn::matmul(a.data(), b.data(), cp.data(), m, k, n, false, false);
    CHECK(bitwise_equal(cs, cp));
  }

  SUBCASE("causal convolution, forward and both backwards") {
    const std::size_t in_c = 24, out_c = 16, ksize = 5, dil = 2, t_len = 120;
    const std::vector<double> x = test::rand_vec(rng, in_c * t_len);
    const std::vector<double> w = test::rand_vec(rng, out_c * in_c * ksize);
    const std::vector<double> b = test::rand_vec(rng, out_c);
    std::vector<double> ys(out_c * t_len), yp(out_c * t_len);
    kn::causal_conv_forward_serial(x.data(), w.data(), b.data(), ys.data(),
                                   in_c, out_c, ksize, dil, t_len);
    kn::causal_conv_forward(x.data(), w.data(), b.data(), yp.data(), in_c,
                            out_c, ksize, dil, t_len);
    CHECK(bitwise_equal(ys, yp));

    const std::vector<double> dy = test::rand_vec(rng, out_c * t_len);
    // Backwards accumulate, so both flavours start from the same nonzero fill.
    const std::vector<double> seed_dx = test::rand_vec(rng, in_c * t_len);
    std::vector<double> dxs = seed_dx, dxp = seed_dx;
    kn::causal_conv_backward_input_serial(dy.data(), w.data(), dxs.data(),
                                          in_c, out_c, ksize, dil, t_len);
    kn::causal_conv_backward_input(dy.data(), w.data(), dxp.data(), in_c,
                                   out_c, ksize, dil, t_len);
    CHECK(bitwise_equal(dxs, dxp));

    const std::vector<double> seed_dw = test::rand_vec(rng, out_c * in_c * ksize);
    const std::vector<double> seed_db = test::rand_vec(rng, out_c);
    std::vector<double> dws = seed_dw, dwp = seed_dw;
    std::vector<double> dbs = seed_db, dbp = seed_db;
    kn::causal_conv_backward_filter_serial(dy.data(), x.data(), dws.data(),
                                           dbs.data(), in_c, out_c, ksize, dil,
                                           t_len);
    kn::causal_conv_backward_filter(dy.data(), x.data(), dwp.data(), dbp.data(),
                                    in_c, out_c, ksize, dil, t_len);
    CHECK(bitwise_equal(dws, dwp));
    CHECK(bitwise_equal(dbs, dbp));
  }

  SUBCASE("softmax rows, forward and backward") {
    const std::size_t rows = 300, cols = 50;
    const std::vector<double> x = test::rand_vec(rng, rows * cols, 4.0);
    std::vector<double> ys(rows * cols), yp(rows * cols);
    kn::softmax_rows_serial(x.data(), ys.data(), rows, cols);
    kn::softmax_rows(x.data(), yp.data(), rows, cols);
    CHECK(bitwise_equal(ys, yp));

    const std::vector<double> gy = test::rand_vec(rng, rows * cols);
    const std::vector<double> seed_gx = test::rand_vec(rng, rows * cols);
    std::vector<double> gxs = seed_gx, gxp = seed_gx;
    kn::softmax_rows_backward_serial(ys.data(), gy.data(), gxs.data(), rows, cols);
    kn::softmax_rows_backward(ys.data(), gy.data(), gxp.data(), rows, cols);
    CHECK(bitwise_equal(gxs, gxp));
  }

  SUBCASE("attention, forward and backward") {
    const std::size_t branches = 3, dk = 16, t_len = 200;
    std::vector<std::vector<double>> q(branches), k(branches), v(branches);
    std::vector<const double*> qp, kp, vp;
    for (std::size_t b = 0; b < branches; ++b) {
      q[b] = test::rand_vec(rng, dk * t_len);
      k[b] = test::rand_vec(rng, dk * t_len);
      v[b] = test::rand_vec(rng, dk * t_len);
      qp.push_back(q[b].data());
      kp.push_back(k[b].data());
      vp.push_back(v[b].data());
    }
    std::vector<double> outs(branches * dk * t_len), outp(branches * dk * t_len);
    std::vector<double> scs(t_len * branches * branches),
        scp(t_len * branches * branches);
    kn::attention_forward_serial(qp.data(), kp.data(), vp.data(), outs.data(),
                                 scs.data(), branches, dk, t_len);
    kn::attention_forward(qp.data(), kp.data(), vp.data(), outp.data(),
                          scp.data(), branches, dk, t_len);
    CHECK(bitwise_equal(outs, outp));
    CHECK(bitwise_equal(scs, scp));

    const std::vector<double> d_out = test::rand_vec(rng, branches * dk * t_len);
    std::vector<std::vector<double>> dq_s(branches), dk_s(branches), dv_s(branches);
    std::vector<std::vector<double>> dq_p(branches), dk_p(branches), dv_p(branches);
    std::vector<double*> dqs, dks, dvs, dqp, dkp, dvp;
    for (std::size_t b = 0; b < branches; ++b) {
      const std::vector<double> seed = test::rand_vec(rng, dk * t_len);
      dq_s[b] = seed; dq_p[b] = seed;
      dk_s[b] = seed; dk_p[b] = seed;
      dv_s[b] = seed; dv_p[b] = seed;
      dqs.push_back(dq_s[b].data());
      dks.push_back(dk_s[b].data());
      dvs.push_back(dv_s[b].data());
      dqp.push_back(dq_p[b].data());
      dkp.push_back(dk_p[b].data());
      dvp.push_back(dv_p[b].data());
    }
    kn::attention_backward_serial(qp.data(), kp.data(), vp.data(), scs.data(),
                                  d_out.data(), dqs.data(), dks.data(),
                                  dvs.data(), branches, dk, t_len);
    kn::attention_backward(qp.data(), kp.data(), vp.data(), scs.data(),
                           d_out.data(), dqp.data(), dkp.data(), dvp.data(),
                           branches, dk, t_len);
    for (std::size_t b = 0; b < branches; ++b) {
      CHECK(bitwise_equal(dq_s[b], dq_p[b]));
      CHECK(bitwise_equal(dk_s[b], dk_p[b]));
      CHECK(bitwise_equal(dv_s[b], dv_p[b]));
    }
  }

  SUBCASE("layer norm, forward and backward") {
    const std::size_t dim = 48, t_len = 400;
    const std::vector<double> x = test::rand_vec(rng, dim * t_len, 2.0);
    const std::vector<double> gain = test::rand_vec(rng, dim);
    const std::vector<double> shift = test::rand_vec(rng, dim);
    std::vector<double> ys(dim * t_len), xh_s(dim * t_len), inv_s(t_len);
    std::vector<double> yp(dim * t_len), xh_p(dim * t_len), inv_p(t_len);
    kn::layer_norm_forward_serial(x.data(), gain.data(), shift.data(), 1e-5,
                                  ys.data(), xh_s.data(), inv_s.data(), dim,
                                  t_len);
    kn::layer_norm_forward(x.data(), gain.data(), shift.data(), 1e-5, yp.data(),
                           xh_p.data(), inv_p.data(), dim, t_len);
    CHECK(bitwise_equal(ys, yp));
    CHECK(bitwise_equal(xh_s, xh_p));
    CHECK(bitwise_equal(inv_s, inv_p));

    const std::vector<double> dy = test::rand_vec(rng, dim * t_len);
    const std::vector<double> seed_dx = test::rand_vec(rng, dim * t_len);
    const std::vector<double> seed_dg = test::rand_vec(rng, dim);
    const std::vector<double> seed_ds = test::rand_vec(rng, dim);
    std::vector<double> dxs = seed_dx, dxp = seed_dx;
    std::vector<double> dgs = seed_dg, dgp = seed_dg;
    std::vector<double> dss = seed_ds, dsp = seed_ds;
    kn::layer_norm_backward_serial(dy.data(), gain.data(), xh_s.data(),
                                   inv_s.data(), dxs.data(), dgs.data(),
                                   dss.data(), dim, t_len);
    kn::layer_norm_backward(dy.data(), gain.data(), xh_p.data(), inv_p.data(),
                            dxp.data(), dgp.data(), dsp.data(), dim, t_len);
    CHECK(bitwise_equal(dxs, dxp));
    CHECK(bitwise_equal(dgs, dgp));
    CHECK(bitwise_equal(dss, dsp));
  }

  kn::set_max_threads(0);
}

TEST_CASE("parallel_for touches every index exactly once") {
  kn::set_max_threads(4);
  const std::size_t n = 4096;
  std::vector<int> hits(n, 0);
  // grain large enough to force the threaded path; disjoint chunks make the
  // unsynchronized increments race free.
  kn::parallel_for(n, 16, [&](std::size_t b, std::size_t e) {
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  });
  for (int h : hits) CHECK(h == 1);

  std::fill(hits.begin(), hits.end(), 0);
  kn::parallel_for(10, 1, [&](std::size_t b, std::size_t e) {  // serial path
    for (std::size_t i = b; i < e; ++i) ++hits[i];
  });
  for (std::size_t i = 0; i < n; ++i) CHECK(hits[i] == (i < 10 ? 1 : 0));
  kn::set_max_threads(0);
}

TEST_CASE("thread budget overrides are honored") {
  const int before = kn::max_threads();
  kn::set_max_threads(3);
  CHECK(kn::max_threads() == 3);
  kn::set_max_threads(0);
  CHECK(kn::max_threads() == before);
}

}  // TEST_SUITE
