#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "otcclip/common.hpp"

namespace otcclip {

struct ModelDims {
  std::size_t d_in = 12;       // raw patch dimension
  std::size_t d = 16;          // feature dimension
  std::size_t d_e = 16;        // token embedding dimension
  std::size_t vocab_size = 64;
  std::size_t h = 3;
  std::size_t w = 3;
  std::size_t l_max = 8;

  bool operator==(const ModelDims&) const = default;
};

/// Raw image as an (h*w) x d_in matrix of patch vectors.
struct RawImage {
  Matrix patches;
  std::size_t h = 0;
  std::size_t w = 0;

  void validate() const;
};

struct RawCaption {
  std::vector<std::uint32_t> tokens;
  std::size_t vocab_size = 0;

  void validate(std::size_t l_max) const;
};

/// k x d feature matrix, every row unit L2 norm.
struct SpatialFeatures {
  Matrix z;
};

struct GlobalFeature {
  Vec g;
};

/// All trainable parameters plus the fixed temperature. Feature convention is
/// row vectors: a patch p maps to tanh(p * img_proj + img_bias).
struct ModelState {
  ModelDims dims;
  Matrix img_proj;   // d_in x d
  Vec img_bias;      // d
  Matrix txt_embed;  // vocab_size x d_e
  Matrix txt_proj;   // d_e x d
  Vec txt_bias;      // d
  double tau = 0.1;
  std::uint64_t rng_seed = 0;
  std::uint64_t step = 0;

  void validate() const;
};

ModelState init_model_state(const ModelDims& dims, std::uint64_t seed);

/// Per-sample forward activations kept for the backward pass.
struct EncodeCache {
  Matrix pre;     // k x d, tanh outputs before row normalization
  Vec row_norms;  // k
  Vec mean;       // d, mean of normalized rows
  double mean_norm = 0;
};

struct Encoded {
  SpatialFeatures spatial;
  GlobalFeature global;
  EncodeCache cache;
};

/// Per patch j: z_j = normalize(tanh(patch_j * W + b)); global is the
/// normalized mean of the rows. A row or mean norm below 1e-12 is a hard
/// error, not a silent epsilon.
Encoded encode_image(const RawImage& img, const ModelState& m);

/// Token path: the token embedding row goes through the text projection and
/// the same tanh/normalize/mean pipeline.
Encoded encode_text(const RawCaption& cap, const ModelState& m);

struct ImageGrads {
  Matrix d_img_proj;  // d_in x d
  Vec d_img_bias;     // d
  Matrix d_patches;   // k x d_in
};

struct TextGrads {
  Matrix d_txt_embed;  // vocab_size x d_e (dense; only used rows are nonzero)
  Matrix d_txt_proj;   // d_e x d
  Vec d_txt_bias;      // d
};

/// Reverse-mode adjoints for encode_image. d_spatial is dLoss/d(spatial rows)
/// (k x d, may be empty for none) and d_global is dLoss/d(global) (may be
/// empty).
ImageGrads encode_image_backward(const RawImage& img, const ModelState& m, const EncodeCache& cache,
                                 const Matrix& d_spatial, const Vec& d_global);

TextGrads encode_text_backward(const RawCaption& cap, const ModelState& m, const EncodeCache& cache,
                               const Matrix& d_spatial, const Vec& d_global);

/// S[u][v] = <x_u, y_v>; with unit rows this is the pairwise cosine matrix.
Matrix pairwise_similarity(const SpatialFeatures& x, const SpatialFeatures& y);

/// Gradient accumulator mirroring ModelState's trainable parameters.
struct ModelGrads {
  Matrix img_proj;
  Vec img_bias;
  Matrix txt_embed;
  Matrix txt_proj;
  Vec txt_bias;

  static ModelGrads zeros_like(const ModelState& m);
  void add_scaled(const ImageGrads& g, double s);
  void add_scaled(const TextGrads& g, double s);
  void add_scaled(const ModelGrads& g, double s);

  /// Fixed parameter order: img_proj, img_bias, txt_embed, txt_proj, txt_bias.
  std::map<std::string, Matrix> as_map() const;
};

/// Plain SGD: state <- state - lr * grads; bumps step.
void apply_sgd(ModelState& m, const ModelGrads& g, double lr);

}  // namespace otcclip
