#pragma once

#include <cstdint>
#include <vector>

#include "otcclip/features.hpp"
#include "otcclip/ot.hpp"

namespace otcclip {

struct PoolEntry {
  SpatialFeatures fine;
  GlobalFeature global;
  std::int64_t source_id = -1;  // dataset row id, or -1 for synthetic init entries
};

/// FIFO queue of the P most recent caption representations, stored as a ring.
/// Positional index 0 is the oldest entry.
class CaptionPool {
 public:
  CaptionPool() = default;
  explicit CaptionPool(std::vector<PoolEntry> entries);

  std::size_t capacity() const { return entries_.size(); }
  bool full() const { return !entries_.empty(); }

  const PoolEntry& entry(std::size_t pos) const { return entries_[(head_ + pos) % entries_.size()]; }

  /// Discards the oldest batch.size() entries and appends the batch at the
  /// tail. Throws if the batch is larger than the pool.
  void push_batch(const std::vector<PoolEntry>& batch);

 private:
  std::vector<PoolEntry> entries_;
  std::size_t head_ = 0;
};

/// Free-function form of the FIFO update.
inline void pool_update(CaptionPool& pool, const std::vector<PoolEntry>& batch) {
  pool.push_batch(batch);
}

struct MatchResult {
  Matrix scores;                          // N x P
  std::vector<std::size_t> chosen;        // argmax per row, ties to lowest index
  std::vector<std::int64_t> chosen_source_ids;
};

/// OT matching score between one image's patch features and one caption's
/// token features: builds C = 1 - S with uniform marginals, solves Sinkhorn
/// and returns 1 - (transport cost [+ lambda * negentropy]). Higher means more
/// similar.
double ot_match_score(const SpatialFeatures& img, const SpatialFeatures& cap,
                      const SinkhornConfig& cfg, bool include_entropy = true);

/// Scores every image against every pool entry (N*P independent solves) and
/// picks the argmax per image. The grid is OpenMP-parallel; each cell writes a
/// disjoint score slot, so results are bitwise independent of thread count.
MatchResult match_batch(const std::vector<SpatialFeatures>& imgs, const CaptionPool& pool,
                        const SinkhornConfig& cfg, bool include_entropy = true);

/// Straight-loop reference used by tests and the benchmark; must produce
/// bitwise-identical results to match_batch.
MatchResult match_batch_serial(const std::vector<SpatialFeatures>& imgs, const CaptionPool& pool,
                               const SinkhornConfig& cfg, bool include_entropy = true);

/// Pooled-feature ablation: scores are plain inner products of global
/// features, same argmax and tie rule.
MatchResult global_match_baseline(const std::vector<GlobalFeature>& imgs, const CaptionPool& pool);

}  // namespace otcclip
