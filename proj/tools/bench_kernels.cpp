// Times the OpenMP kernel fronts against their serial references and checks
// that the outputs match bit for bit, which is the contract the training
// pipeline's determinism rests on.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "affuse/kernels.hpp"
#include "affuse/rng.hpp"

namespace {

using affuse::Rng;
namespace kernels = affuse::kernels;

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double time_best_ms(std::size_t repeat, const std::function<void()>& fn) {
  double best = 1e300;
  for (std::size_t r = 0; r < repeat; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    best = std::min(best, std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  return best;
}

bool report(const char* name, std::size_t repeat,
            const std::function<void()>& serial,
            const std::function<void()>& parallel,
            const std::vector<double>& serial_out,
            const std::vector<double>& parallel_out) {
  const double ts = time_best_ms(repeat, serial);
  const double tp = time_best_ms(repeat, parallel);
  const bool exact =
      serial_out.size() == parallel_out.size() &&
      std::memcmp(serial_out.data(), parallel_out.data(),
                  serial_out.size() * sizeof(double)) == 0;
  std::printf("%-14s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   %s\n",
              name, ts, tp, ts / tp, exact ? "bit-exact" : "MISMATCH");
  return exact;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"serial vs OpenMP kernel benchmark"};
  int threads = 0;
  std::size_t repeat = 5;
  app.add_option("--threads", threads, "thread budget (default: all available)");
  app.add_option("--repeat", repeat, "timing repetitions, best-of")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);

  if (threads > 0) kernels::set_max_threads(threads);
  std::printf("threads: %d\n", kernels::max_threads());

  Rng rng(7);
  bool all_exact = true;

  {
    const std::size_t m = 384, k = 384, n = 384;
    const auto a = random_vec(rng, m * k);
    const auto b = random_vec(rng, k * n);
    std::vector<double> cs(m * n), cp(m * n);
    all_exact &= report(
        "matmul", repeat,
        [&] { kernels::matmul_serial(a.data(), b.data(), cs.data(), m, k, n, false, false); },
        [&] { kernels::matmul(a.data(), b.data(), cp.data(), m, k, n, false, false); },
        cs, cp);
  }

  {
    const std::size_t in_c = 128, out_c = 128, ksize = 5, dilation = 4, t = 300;
    const auto x = random_vec(rng, in_c * t);
    const auto w = random_vec(rng, out_c * in_c * ksize);
    const auto b = random_vec(rng, out_c);
    std::vector<double> ys(out_c * t), yp(out_c * t);
    all_exact &= report(
        "causal_conv", repeat,
        [&] {
          kernels::causal_conv_forward_serial(x.data(), w.data(), b.data(), ys.data(),
                                              in_c, out_c, ksize, dilation, t);
        },
        [&] {
          kernels::causal_conv_forward(x.data(), w.data(), b.data(), yp.data(),
                                       in_c, out_c, ksize, dilation, t);
        },
        ys, yp);
  }

  {
    const std::size_t branches = 3, dk = 32, t = 3000;
    std::vector<std::vector<double>> q, k, v;
    for (std::size_t b = 0; b < branches; ++b) {
      q.push_back(random_vec(rng, dk * t));
      k.push_back(random_vec(rng, dk * t));
      v.push_back(random_vec(rng, dk * t));
    }
    const double* qp[3] = {q[0].data(), q[1].data(), q[2].data()};
    const double* kp[3] = {k[0].data(), k[1].data(), k[2].data()};
    const double* vp[3] = {v[0].data(), v[1].data(), v[2].data()};
    std::vector<double> outs(branches * dk * t), outp(branches * dk * t);
    all_exact &= report(
        "attention", repeat,
        [&] { kernels::attention_forward_serial(qp, kp, vp, outs.data(), nullptr, branches, dk, t); },
        [&] { kernels::attention_forward(qp, kp, vp, outp.data(), nullptr, branches, dk, t); },
        outs, outp);
  }

  {
    const std::size_t dim = 96, t = 30000;
    const auto x = random_vec(rng, dim * t);
    const auto gain = random_vec(rng, dim);
    const auto shift = random_vec(rng, dim);
    std::vector<double> ys(dim * t), yp(dim * t);
    std::vector<double> xhs(dim * t), xhp(dim * t);
    std::vector<double> invs(t), invp(t);
    all_exact &= report(
        "layer_norm", repeat,
        [&] {
          kernels::layer_norm_forward_serial(x.data(), gain.data(), shift.data(), 1e-5,
                                             ys.data(), xhs.data(), invs.data(), dim, t);
        },
        [&] {
          kernels::layer_norm_forward(x.data(), gain.data(), shift.data(), 1e-5,
                                      yp.data(), xhp.data(), invp.data(), dim, t);
        },
        ys, yp);
  }

  if (!all_exact) {
    std::fprintf(stderr, "error: serial and parallel outputs differ\n");
    return 1;
  }
  return 0;
}
