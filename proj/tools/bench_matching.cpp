// Times the OT matching grid (the training hot spot) with the OpenMP kernel
// against the serial reference and checks they agree bitwise.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <vector>

#include "otcclip/matching.hpp"
#include "otcclip/rng.hpp"

using namespace otcclip;

namespace {

SpatialFeatures random_features(Rng& rng, std::size_t k, std::size_t d) {
  SpatialFeatures f;
  f.z = Matrix(k, d);
  for (std::size_t i = 0; i < k; ++i) {
    double n2 = 0;
    for (std::size_t j = 0; j < d; ++j) {
      f.z(i, j) = rng.normal();
      n2 += f.z(i, j) * f.z(i, j);
    }
    const double n = std::sqrt(n2);
    for (std::size_t j = 0; j < d; ++j) f.z(i, j) /= n;
  }
  return f;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = 32, p = 256;
  if (argc > 1) n = static_cast<std::size_t>(std::atoi(argv[1]));
  if (argc > 2) p = static_cast<std::size_t>(std::atoi(argv[2]));

  Rng rng(7);
  const std::size_t hw = 9, l = 6, d = 16;
  std::vector<SpatialFeatures> imgs(n);
  for (auto& f : imgs) f = random_features(rng, hw, d);
  std::vector<PoolEntry> entries(p);
  for (auto& e : entries) {
    e.fine = random_features(rng, l, d);
    e.global.g.assign(d, 0.0);
    e.global.g[0] = 1.0;
  }
  CaptionPool pool(entries);
  SinkhornConfig cfg;

  std::printf("matching grid: N=%zu P=%zu (%zu solves of %zux%zu), threads=%d\n", n, p, n * p, hw,
              l, omp_get_max_threads());

  auto t0 = std::chrono::steady_clock::now();
  const MatchResult serial = match_batch_serial(imgs, pool, cfg);
  const double ts = seconds_since(t0);

  t0 = std::chrono::steady_clock::now();
  const MatchResult parallel = match_batch(imgs, pool, cfg);
  const double tp = seconds_since(t0);

  const bool identical = serial.scores == parallel.scores && serial.chosen == parallel.chosen;
  std::printf("serial:   %8.3f ms  (%.1f us/solve)\n", ts * 1e3, ts * 1e6 / double(n * p));
  std::printf("parallel: %8.3f ms  (%.1f us/solve)  speedup %.2fx\n", tp * 1e3,
              tp * 1e6 / double(n * p), ts / tp);
  std::printf("bitwise identical: %s\n", identical ? "yes" : "NO");
  return identical ? 0 : 1;
}
