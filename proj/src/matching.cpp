#include "otcclip/matching.hpp"

#include <stdexcept>

namespace otcclip {

CaptionPool::CaptionPool(std::vector<PoolEntry> entries) : entries_(std::move(entries)) {
  if (entries_.empty()) throw std::invalid_argument("CaptionPool: capacity must be >= 1");
}

void CaptionPool::push_batch(const std::vector<PoolEntry>& batch) {
  if (entries_.empty()) throw std::invalid_argument("CaptionPool: pool not initialized");
  if (batch.size() > entries_.size())
    throw std::invalid_argument("CaptionPool: batch larger than pool capacity");
  for (const PoolEntry& e : batch) {
    entries_[head_] = e;
    head_ = (head_ + 1) % entries_.size();
  }
}

double ot_match_score(const SpatialFeatures& img, const SpatialFeatures& cap,
                      const SinkhornConfig& cfg, bool include_entropy) {
  if (img.z.rows() == 0 || cap.z.rows() == 0)
    throw std::invalid_argument("ot_match_score: empty feature set");
  Matrix s = pairwise_similarity(img, cap);
  Matrix c(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.size(); ++i) c.data()[i] = 1.0 - s.data()[i];
  const Weights a = Weights::uniform(c.rows());
  const Weights b = Weights::uniform(c.cols());
  TransportPlan plan = sinkhorn_solve(a, b, c, cfg);
  return 1.0 - ot_value(plan, c, cfg.lambda, include_entropy);
}

namespace {

MatchResult argmax_rows(Matrix scores, const CaptionPool& pool) {
  const std::size_t n = scores.rows(), p = scores.cols();
  MatchResult out;
  out.chosen.resize(n);
  out.chosen_source_ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t q = 1; q < p; ++q) {
      if (scores(i, q) > scores(i, best)) best = q;  // ties keep the lowest index
    }
    out.chosen[i] = best;
    out.chosen_source_ids[i] = pool.entry(best).source_id;
  }
  out.scores = std::move(scores);
  return out;
}

}  // namespace

MatchResult match_batch(const std::vector<SpatialFeatures>& imgs, const CaptionPool& pool,
                        const SinkhornConfig& cfg, bool include_entropy) {
  if (!pool.full()) throw std::invalid_argument("match_batch: empty pool");
  if (imgs.empty()) throw std::invalid_argument("match_batch: empty batch");
  const std::size_t n = imgs.size(), p = pool.capacity();
  Matrix scores(n, p);
  const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(n * p);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t cell = 0; cell < total; ++cell) {
    const std::size_t i = static_cast<std::size_t>(cell) / p;
    const std::size_t q = static_cast<std::size_t>(cell) % p;
    scores(i, q) = ot_match_score(imgs[i], pool.entry(q).fine, cfg, include_entropy);
  }
  return argmax_rows(std::move(scores), pool);
}

MatchResult match_batch_serial(const std::vector<SpatialFeatures>& imgs, const CaptionPool& pool,
                               const SinkhornConfig& cfg, bool include_entropy) {
  if (!pool.full()) throw std::invalid_argument("match_batch: empty pool");
  if (imgs.empty()) throw std::invalid_argument("match_batch: empty batch");
  const std::size_t n = imgs.size(), p = pool.capacity();
  Matrix scores(n, p);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t q = 0; q < p; ++q)
      scores(i, q) = ot_match_score(imgs[i], pool.entry(q).fine, cfg, include_entropy);
  return argmax_rows(std::move(scores), pool);
}

MatchResult global_match_baseline(const std::vector<GlobalFeature>& imgs, const CaptionPool& pool) {
  if (!pool.full()) throw std::invalid_argument("global_match_baseline: empty pool");
  if (imgs.empty()) throw std::invalid_argument("global_match_baseline: empty batch");
  const std::size_t n = imgs.size(), p = pool.capacity();
  Matrix scores(n, p);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const std::size_t ii = static_cast<std::size_t>(i);
    for (std::size_t q = 0; q < p; ++q) {
      const Vec& g = pool.entry(q).global.g;
      scores(ii, q) = dot(imgs[ii].g.data(), g.data(), g.size());
    }
  }
  return argmax_rows(std::move(scores), pool);
}

}  // namespace otcclip
