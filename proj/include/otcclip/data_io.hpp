#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "otcclip/features.hpp"

namespace otcclip {

/// Synthetic multimodal world: each class has a unit patch prototype and an
/// exclusive vocabulary block. Images are noisy prototype copies per patch;
/// captions are token draws from the class block.
struct WorldSpec {
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 200;
  double margin = 0.5;  // pairwise prototype cosine stays <= 1 - margin
  double noise_sigma = 0.05;
  std::size_t tokens_per_class = 6;
  std::uint64_t seed = 0;  // 0 lets the experiment config derive it
  // Desk-scale extras, recorded in the config rather than ground truth.
  std::size_t test_per_class = 20;
  std::size_t caption_len = 6;

  void validate(const ModelDims& dims) const;
};

/// Zero-shot prompts are a fixed 3-token prefix plus the class token; the
/// prefix ids live at the top of the vocabulary, outside every class block.
constexpr std::size_t kPromptPrefixLen = 3;

std::uint32_t class_token(const WorldSpec& spec, std::uint32_t class_id);
RawCaption class_prompt(const WorldSpec& spec, const ModelDims& dims, std::uint32_t class_id);

struct DataRow {
  std::int64_t id = 0;
  std::uint32_t class_id = 0;
  RawImage image;
  RawCaption caption;
  bool poisoned = false;
};

struct Dataset {
  WorldSpec spec;
  ModelDims dims;
  Matrix prototypes;  // num_classes x d_in
  std::vector<DataRow> rows;
  std::vector<DataRow> test_rows;  // held-out, never trained on
};

/// Deterministic per seed; rows derive per-row seeds so construction order is
/// irrelevant. Throws when prototype rejection sampling exceeds its budget
/// (margin infeasible for d_in).
Dataset generate_world(const WorldSpec& spec, const ModelDims& dims);

// --- OTF1 tensor files -------------------------------------------------
// magic "OTF1", u32 LE rank (<= 4), rank u32 LE dims, row-major f32 LE payload.
// f64 in memory, f32 on disk: the write path is the quantization point.

struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

void write_matrix(const std::string& path, const Matrix& m);
Matrix read_matrix(const std::string& path);

// --- dataset / model persistence ---------------------------------------
// The manifest is JSON (version field starting at 1); tensors are separate
// files referenced by relative path, with per-row byte offsets into the image
// tensor recorded in the manifest.

void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

/// Hash of the dataset's identity (world spec + dims + manifest rows), used by
/// report aggregation to refuse mixing runs from different worlds.
std::string dataset_world_hash(const Dataset& ds);

void save_model(const ModelState& m, const std::string& dir);
ModelState load_model(const std::string& dir);

/// FNV-1a/64 over a byte string, rendered as 16 hex digits.
std::string fnv1a_hex(const std::string& bytes);

}  // namespace otcclip
