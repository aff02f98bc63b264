#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "otcclip/data_io.hpp"
#include "otcclip/rng.hpp"

using namespace otcclip;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("otcclip_test_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

WorldSpec tiny_world() {
  WorldSpec w;
  w.num_classes = 4;
  w.samples_per_class = 10;
  w.tokens_per_class = 4;
  w.test_per_class = 3;
  w.caption_len = 4;
  w.seed = 5;
  return w;
}

ModelDims tiny_dims() {
  ModelDims d;
  d.d_in = 8;
  d.d = 6;
  d.d_e = 5;
  d.vocab_size = 4 * 4 + 3;
  d.h = 2;
  d.w = 2;
  d.l_max = 6;
  return d;
}

}  // namespace

TEST_CASE("zero noise collapses a class to identical images") {
  WorldSpec w = tiny_world();
  w.noise_sigma = 0.0;
  const Dataset ds = generate_world(w, tiny_dims());
  CHECK(ds.rows.size() == w.num_classes * w.samples_per_class);
  for (std::size_t i = 1; i < w.samples_per_class; ++i)
    CHECK(ds.rows[i].image.patches == ds.rows[0].image.patches);
}

TEST_CASE("margin 1 forces orthogonal-or-better prototypes") {
  WorldSpec w = tiny_world();
  w.num_classes = 2;
  w.margin = 1.0;
  const Dataset ds = generate_world(w, tiny_dims());
  CHECK(dot(ds.prototypes.row(0), ds.prototypes.row(1), tiny_dims().d_in) <= 1e-12);
}

TEST_CASE("same seed gives a bitwise-identical dataset") {
  const Dataset a = generate_world(tiny_world(), tiny_dims());
  const Dataset b = generate_world(tiny_world(), tiny_dims());
  CHECK(a.prototypes == b.prototypes);
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    CHECK(a.rows[i].image.patches == b.rows[i].image.patches);
    CHECK(a.rows[i].caption.tokens == b.rows[i].caption.tokens);
  }
}

TEST_CASE("default-margin world is separable by nearest prototype") {
  WorldSpec w;
  w.seed = 9;
  ModelDims dims;  // library defaults: d_in 12, 10 classes
  const Dataset ds = generate_world(w, dims);
  std::size_t correct = 0;
  for (const DataRow& r : ds.rows) {
    Vec mean(dims.d_in, 0.0);
    for (std::size_t p = 0; p < r.image.patches.rows(); ++p)
      for (std::size_t q = 0; q < dims.d_in; ++q)
        mean[q] += r.image.patches(p, q) / static_cast<double>(r.image.patches.rows());
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t c = 0; c < w.num_classes; ++c) {
      const double s = dot(mean.data(), ds.prototypes.row(c), dims.d_in);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    if (best == r.class_id) ++correct;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(ds.rows.size()) >= 0.99);
}

TEST_CASE("caption tokens stay inside the class block") {
  const WorldSpec w = tiny_world();
  const Dataset ds = generate_world(w, tiny_dims());
  for (const DataRow& r : ds.rows) {
    const std::uint32_t block = r.class_id * static_cast<std::uint32_t>(w.tokens_per_class);
    for (std::uint32_t t : r.caption.tokens) {
      CHECK(t >= block);
      CHECK(t < block + w.tokens_per_class);
    }
  }
}

TEST_CASE("infeasible margin exhausts the rejection budget") {
  WorldSpec w = tiny_world();
  w.num_classes = 40;  // cannot pack 40 pairwise cos<=0 vectors into R^8
  w.margin = 1.0;
  ModelDims d = tiny_dims();
  d.vocab_size = 40 * 4 + 3;
  CHECK_THROWS_AS(generate_world(w, d), std::runtime_error);
}

TEST_CASE("OTF1 scalar file is 12 bytes and round-trips") {
  TempDir tmp;
  const std::string path = tmp.str() + "/scalar.otf1";
  Tensor t;
  t.data = {1.0};
  write_tensor(path, t);
  CHECK(fs::file_size(path) == 12);
  const Tensor back = read_tensor(path);
  CHECK(back.shape.empty());
  CHECK(back.data == std::vector<double>{1.0});
}

TEST_CASE("OTF1 empty dimension writes a header-only file") {
  TempDir tmp;
  const std::string path = tmp.str() + "/empty.otf1";
  Tensor t;
  t.shape = {2, 0};
  write_tensor(path, t);
  CHECK(fs::file_size(path) == 4 + 4 + 8);  // magic + rank + two dims, no payload
  const Tensor back = read_tensor(path);
  CHECK(back.shape == std::vector<std::size_t>{2, 0});
  CHECK(back.data.empty());
}

TEST_CASE("OTF1 round-trip is exact after one f32 quantization") {
  TempDir tmp;
  Rng rng(17);
  Matrix m(7, 5);
  for (double& v : m.data()) v = rng.normal();
  const std::string path = tmp.str() + "/m.otf1";
  write_matrix(path, m);
  const Matrix once = read_matrix(path);
  write_matrix(path, once);
  const Matrix twice = read_matrix(path);
  CHECK(once == twice);  // quantization is idempotent
  for (std::size_t i = 0; i < m.size(); ++i)
    CHECK(once.data()[i] == doctest::Approx(m.data()[i]).epsilon(1e-6));
}

TEST_CASE("OTF1 rejects bad magic, truncation and high rank") {
  TempDir tmp;
  const std::string path = tmp.str() + "/bad.otf1";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE";
  }
  CHECK_THROWS_AS(read_tensor(path), std::runtime_error);
  {
    std::ofstream f(path, std::ios::binary);
    f << "OTF1";
    const unsigned char rank[4] = {2, 0, 0, 0};
    f.write(reinterpret_cast<const char*>(rank), 4);
    // dims missing entirely
  }
  CHECK_THROWS_AS(read_tensor(path), std::runtime_error);

  Tensor t;
  t.shape = {1, 1, 1, 1, 1};
  t.data = {1.0};
  CHECK_THROWS_AS(write_tensor(tmp.str() + "/rank5.otf1", t), std::runtime_error);

  Tensor nf;
  nf.shape = {1};
  nf.data = {std::numeric_limits<double>::quiet_NaN()};
  CHECK_THROWS_AS(write_tensor(tmp.str() + "/nan.otf1", nf), std::runtime_error);
}

TEST_CASE("dataset save/load round-trips through the manifest") {
  TempDir tmp;
  Dataset ds = generate_world(tiny_world(), tiny_dims());
  ds.rows[3].poisoned = true;
  save_dataset(ds, tmp.str());
  const Dataset back = load_dataset(tmp.str());

  CHECK(back.spec.num_classes == ds.spec.num_classes);
  CHECK(back.rows.size() == ds.rows.size());
  CHECK(back.test_rows.size() == ds.test_rows.size());
  CHECK(back.rows[3].poisoned);
  CHECK_FALSE(back.rows[2].poisoned);
  for (std::size_t i = 0; i < ds.rows.size(); ++i) {
    CHECK(back.rows[i].id == ds.rows[i].id);
    CHECK(back.rows[i].class_id == ds.rows[i].class_id);
    CHECK(back.rows[i].caption.tokens == ds.rows[i].caption.tokens);
    for (std::size_t j = 0; j < ds.rows[i].image.patches.size(); ++j)
      CHECK(back.rows[i].image.patches.data()[j] ==
            doctest::Approx(ds.rows[i].image.patches.data()[j]).epsilon(1e-6));
  }
  CHECK(dataset_world_hash(ds) == dataset_world_hash(back));
}

TEST_CASE("world hash distinguishes different worlds") {
  WorldSpec w = tiny_world();
  const Dataset a = generate_world(w, tiny_dims());
  w.seed = 6;
  const Dataset b = generate_world(w, tiny_dims());
  CHECK(dataset_world_hash(a) != dataset_world_hash(b));
}

TEST_CASE("model state save/load round-trips") {
  TempDir tmp;
  ModelState m = init_model_state(tiny_dims(), 77);
  m.tau = 0.25;
  m.step = 42;
  save_model(m, tmp.str());
  const ModelState back = load_model(tmp.str());
  CHECK(back.tau == 0.25);
  CHECK(back.step == 42);
  CHECK(back.rng_seed == 77);
  CHECK(back.dims == m.dims);
  for (std::size_t i = 0; i < m.img_proj.size(); ++i)
    CHECK(back.img_proj.data()[i] == doctest::Approx(m.img_proj.data()[i]).epsilon(1e-6));
  // Saving the loaded state reproduces identical parameter bytes.
  save_model(back, tmp.str() + "/again");
  const ModelState twice = load_model(tmp.str() + "/again");
  CHECK(twice.img_proj == back.img_proj);
  CHECK(twice.txt_embed == back.txt_embed);
}

TEST_CASE("class prompt layout") {
  const WorldSpec w = tiny_world();
  const ModelDims d = tiny_dims();
  const RawCaption prompt = class_prompt(w, d, 2);
  REQUIRE(prompt.tokens.size() == kPromptPrefixLen + 1);
  for (std::size_t i = 0; i < kPromptPrefixLen; ++i)
    CHECK(prompt.tokens[i] == d.vocab_size - kPromptPrefixLen + i);
  CHECK(prompt.tokens.back() == class_token(w, 2));
  CHECK(prompt.tokens.back() == 2 * w.tokens_per_class);
}
