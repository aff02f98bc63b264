#include "otcclip/data_io.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "otcclip/rng.hpp"

namespace otcclip {

namespace {

using nlohmann::json;

constexpr std::size_t kPrototypeBudget = 10000;

Vec unit_vector(Rng& rng, std::size_t d) {
  Vec v(d);
  for (double& x : v) x = rng.normal();
  const double n = l2_norm(v);
  if (n < 1e-9) return unit_vector(rng, d);
  for (double& x : v) x /= n;
  return v;
}

json dims_to_json(const ModelDims& d) {
  return json{{"d_in", d.d_in},         {"d", d.d},   {"d_e", d.d_e}, {"vocab_size", d.vocab_size},
              {"h", d.h},               {"w", d.w},   {"l_max", d.l_max}};
}

ModelDims dims_from_json(const json& j) {
  ModelDims d;
  d.d_in = j.at("d_in").get<std::size_t>();
  d.d = j.at("d").get<std::size_t>();
  d.d_e = j.at("d_e").get<std::size_t>();
  d.vocab_size = j.at("vocab_size").get<std::size_t>();
  d.h = j.at("h").get<std::size_t>();
  d.w = j.at("w").get<std::size_t>();
  d.l_max = j.at("l_max").get<std::size_t>();
  return d;
}

json world_to_json(const WorldSpec& s) {
  return json{{"num_classes", s.num_classes},
              {"samples_per_class", s.samples_per_class},
              {"margin", s.margin},
              {"noise_sigma", s.noise_sigma},
              {"tokens_per_class", s.tokens_per_class},
              {"seed", s.seed},
              {"test_per_class", s.test_per_class},
              {"caption_len", s.caption_len}};
}

WorldSpec world_from_json(const json& j) {
  WorldSpec s;
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.samples_per_class = j.at("samples_per_class").get<std::size_t>();
  s.margin = j.at("margin").get<double>();
  s.noise_sigma = j.at("noise_sigma").get<double>();
  s.tokens_per_class = j.at("tokens_per_class").get<std::size_t>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.test_per_class = j.at("test_per_class").get<std::size_t>();
  s.caption_len = j.at("caption_len").get<std::size_t>();
  return s;
}

DataRow make_row(const WorldSpec& spec, const ModelDims& dims, const Matrix& protos,
                 std::uint64_t seed_tag_base, std::int64_t id, std::uint32_t class_id) {
  DataRow row;
  row.id = id;
  row.class_id = class_id;
  const std::size_t k = dims.h * dims.w;

  Rng img_rng(derive_seed(seed_tag_base, "img", static_cast<std::uint64_t>(id)));
  row.image.h = dims.h;
  row.image.w = dims.w;
  row.image.patches = Matrix(k, dims.d_in);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t q = 0; q < dims.d_in; ++q)
      row.image.patches(p, q) = protos(class_id, q) + img_rng.normal(0.0, spec.noise_sigma);

  Rng cap_rng(derive_seed(seed_tag_base, "cap", static_cast<std::uint64_t>(id)));
  row.caption.vocab_size = dims.vocab_size;
  row.caption.tokens.resize(spec.caption_len);
  const std::uint32_t block = class_id * static_cast<std::uint32_t>(spec.tokens_per_class);
  // Every caption leads with the canonical class token (the "class name"),
  // followed by draws from the class block.
  row.caption.tokens[0] = block;
  for (std::size_t t = 1; t < spec.caption_len; ++t)
    row.caption.tokens[t] =
        block + static_cast<std::uint32_t>(cap_rng.uniform_index(spec.tokens_per_class));
  return row;
}

void write_u32(std::ofstream& f, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::ifstream& f, const std::string& path) {
  unsigned char b[4];
  if (!f.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error("read_tensor: truncated file: " + path);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

json load_json(const std::string& path, const char* what) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error(std::string(what) + ": cannot open " + path);
  json j;
  f >> j;
  return j;
}

void store_json(const json& j, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << j.dump(2) << "\n";
}

}  // namespace

void WorldSpec::validate(const ModelDims& dims) const {
  if (num_classes < 2) throw std::invalid_argument("WorldSpec: num_classes must be >= 2");
  if (!(margin > 0.0) || margin > 1.0)
    throw std::invalid_argument("WorldSpec: margin must be in (0, 1]");
  if (noise_sigma < 0.0) throw std::invalid_argument("WorldSpec: noise_sigma must be >= 0");
  if (samples_per_class == 0) throw std::invalid_argument("WorldSpec: samples_per_class must be >= 1");
  if (caption_len == 0 || caption_len > dims.l_max)
    throw std::invalid_argument("WorldSpec: caption_len must be in [1, l_max]");
  if (num_classes * tokens_per_class + kPromptPrefixLen > dims.vocab_size)
    throw std::invalid_argument(
        "WorldSpec: vocabulary too small for the class blocks plus the prompt prefix");
}

std::uint32_t class_token(const WorldSpec& spec, std::uint32_t class_id) {
  return class_id * static_cast<std::uint32_t>(spec.tokens_per_class);
}

RawCaption class_prompt(const WorldSpec& spec, const ModelDims& dims, std::uint32_t class_id) {
  RawCaption cap;
  cap.vocab_size = dims.vocab_size;
  for (std::size_t i = 0; i < kPromptPrefixLen; ++i)
    cap.tokens.push_back(static_cast<std::uint32_t>(dims.vocab_size - kPromptPrefixLen + i));
  cap.tokens.push_back(class_token(spec, class_id));
  return cap;
}

Dataset generate_world(const WorldSpec& spec, const ModelDims& dims) {
  spec.validate(dims);
  Dataset ds;
  ds.spec = spec;
  ds.dims = dims;

  Rng proto_rng(derive_seed(spec.seed, "prototypes"));
  ds.prototypes = Matrix(spec.num_classes, dims.d_in);
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < kPrototypeBudget && !placed; ++attempt) {
      Vec cand = unit_vector(proto_rng, dims.d_in);
      placed = true;
      for (std::size_t prev = 0; prev < c && placed; ++prev) {
        if (dot(cand.data(), ds.prototypes.row(prev), dims.d_in) > 1.0 - spec.margin) placed = false;
      }
      if (placed)
        for (std::size_t q = 0; q < dims.d_in; ++q) ds.prototypes(c, q) = cand[q];
    }
    if (!placed)
      throw std::runtime_error("generate_world: prototype rejection budget exhausted; margin " +
                               std::to_string(spec.margin) + " is infeasible for d_in");
  }

  const std::size_t rows = spec.num_classes * spec.samples_per_class;
  ds.rows.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto cls = static_cast<std::uint32_t>(i / spec.samples_per_class);
    ds.rows[i] = make_row(spec, dims, ds.prototypes, spec.seed, static_cast<std::int64_t>(i), cls);
  }

  const std::size_t tests = spec.num_classes * spec.test_per_class;
  ds.test_rows.resize(tests);
  const std::uint64_t test_seed = derive_seed(spec.seed, "test_split");
  for (std::size_t i = 0; i < tests; ++i) {
    const auto cls = static_cast<std::uint32_t>(i / spec.test_per_class);
    ds.test_rows[i] = make_row(spec, dims, ds.prototypes, test_seed, static_cast<std::int64_t>(i), cls);
  }
  return ds;
}

void write_tensor(const std::string& path, const Tensor& t) {
  if (t.shape.size() > 4) throw std::runtime_error("write_tensor: rank > 4");
  std::size_t count = 1;
  for (std::size_t d : t.shape) count *= d;
  if (count != t.data.size()) throw std::runtime_error("write_tensor: shape does not match data");
  for (double v : t.data)
    if (!std::isfinite(v)) throw std::runtime_error("write_tensor: non-finite entry");

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_tensor: cannot open " + path);
  f.write("OTF1", 4);
  write_u32(f, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t d : t.shape) write_u32(f, static_cast<std::uint32_t>(d));
  for (double v : t.data) {
    const float x = static_cast<float>(v);  // quantization point
    static_assert(sizeof(float) == 4);
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    write_u32(f, bits);
  }
  if (!f) throw std::runtime_error("write_tensor: write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_tensor: cannot open " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "OTF1", 4) != 0)
    throw std::runtime_error("read_tensor: bad magic: " + path);
  const std::uint32_t rank = read_u32(f, path);
  if (rank > 4) throw std::runtime_error("read_tensor: rank > 4: " + path);
  Tensor t;
  std::size_t count = 1;
  for (std::uint32_t i = 0; i < rank; ++i) {
    const std::uint32_t d = read_u32(f, path);
    t.shape.push_back(d);
    count *= d;
  }
  t.data.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = read_u32(f, path);
    float x;
    std::memcpy(&x, &bits, 4);
    t.data[i] = static_cast<double>(x);
  }
  // Exactly at the payload end: one stray byte means a malformed file.
  char extra;
  if (f.read(&extra, 1))
    throw std::runtime_error("read_tensor: trailing bytes: " + path);
  return t;
}

void write_matrix(const std::string& path, const Matrix& m) {
  Tensor t;
  t.shape = {m.rows(), m.cols()};
  t.data = m.data();
  write_tensor(path, t);
}

Matrix read_matrix(const std::string& path) {
  Tensor t = read_tensor(path);
  if (t.shape.size() != 2) throw std::runtime_error("read_matrix: expected rank 2: " + path);
  Matrix m(t.shape[0], t.shape[1]);
  m.data() = t.data;
  return m;
}

namespace {

json rows_to_json(const std::vector<DataRow>& rows, std::size_t row_floats,
                  std::size_t header_bytes) {
  json out = json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const DataRow& r = rows[i];
    out.push_back(json{{"id", r.id},
                       {"class", r.class_id},
                       {"image_offset", header_bytes + i * row_floats * 4},
                       {"tokens", r.caption.tokens},
                       {"poisoned", r.poisoned}});
  }
  return out;
}

std::vector<DataRow> rows_from_json(const json& jrows, const Tensor& images, const WorldSpec& spec,
                                    const ModelDims& dims) {
  const std::size_t k = dims.h * dims.w;
  std::vector<DataRow> rows(jrows.size());
  for (std::size_t i = 0; i < jrows.size(); ++i) {
    const json& jr = jrows[i];
    DataRow& r = rows[i];
    r.id = jr.at("id").get<std::int64_t>();
    r.class_id = jr.at("class").get<std::uint32_t>();
    r.poisoned = jr.at("poisoned").get<bool>();
    r.caption.vocab_size = dims.vocab_size;
    r.caption.tokens = jr.at("tokens").get<std::vector<std::uint32_t>>();
    r.image.h = dims.h;
    r.image.w = dims.w;
    r.image.patches = Matrix(k, dims.d_in);
    const std::size_t base = i * k * dims.d_in;
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t q = 0; q < dims.d_in; ++q)
        r.image.patches(p, q) = images.data[base + p * dims.d_in + q];
  }
  (void)spec;
  return rows;
}

Tensor images_tensor(const std::vector<DataRow>& rows, const ModelDims& dims) {
  const std::size_t k = dims.h * dims.w;
  Tensor t;
  t.shape = {rows.size(), k, dims.d_in};
  t.data.reserve(rows.size() * k * dims.d_in);
  for (const DataRow& r : rows)
    t.data.insert(t.data.end(), r.image.patches.data().begin(), r.image.patches.data().end());
  return t;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const std::size_t row_floats = ds.dims.h * ds.dims.w * ds.dims.d_in;
  const std::size_t header_bytes = 4 + 4 + 3 * 4;  // magic + rank + three dims

  write_tensor(dir + "/images.otf1", images_tensor(ds.rows, ds.dims));
  write_tensor(dir + "/test_images.otf1", images_tensor(ds.test_rows, ds.dims));
  write_matrix(dir + "/prototypes.otf1", ds.prototypes);

  json manifest{{"version", 1},
                {"world", world_to_json(ds.spec)},
                {"dims", dims_to_json(ds.dims)},
                {"row_count", ds.rows.size()},
                {"rows", rows_to_json(ds.rows, row_floats, header_bytes)},
                {"test_row_count", ds.test_rows.size()},
                {"test_rows", rows_to_json(ds.test_rows, row_floats, header_bytes)}};
  store_json(manifest, dir + "/manifest.json");
}

Dataset load_dataset(const std::string& dir) {
  const json manifest = load_json(dir + "/manifest.json", "load_dataset");
  if (manifest.at("version").get<int>() != 1)
    throw std::runtime_error("load_dataset: unsupported manifest version");
  Dataset ds;
  ds.spec = world_from_json(manifest.at("world"));
  ds.dims = dims_from_json(manifest.at("dims"));
  ds.prototypes = read_matrix(dir + "/prototypes.otf1");

  const Tensor images = read_tensor(dir + "/images.otf1");
  const Tensor test_images = read_tensor(dir + "/test_images.otf1");
  ds.rows = rows_from_json(manifest.at("rows"), images, ds.spec, ds.dims);
  ds.test_rows = rows_from_json(manifest.at("test_rows"), test_images, ds.spec, ds.dims);
  if (ds.rows.size() != manifest.at("row_count").get<std::size_t>())
    throw std::runtime_error("load_dataset: row count mismatch");
  return ds;
}

std::string dataset_world_hash(const Dataset& ds) {
  json j{{"world", world_to_json(ds.spec)}, {"dims", dims_to_json(ds.dims)}};
  // Row identity: ids, classes and caption tokens pin the world; image bytes
  // are already determined by the seed.
  json rows = json::array();
  for (const DataRow& r : ds.rows)
    rows.push_back(json{{"id", r.id}, {"class", r.class_id}, {"tokens", r.caption.tokens}});
  j["rows"] = std::move(rows);
  return fnv1a_hex(j.dump());
}

void save_model(const ModelState& m, const std::string& dir) {
  std::filesystem::create_directories(dir);
  m.validate();
  const auto grads_like = [&](const std::string& name, const Matrix& mat) {
    write_matrix(dir + "/" + name + ".otf1", mat);
    return json{{"name", name},
                {"shape", json::array({mat.rows(), mat.cols()})},
                {"file", name + ".otf1"}};
  };
  Matrix ib(1, m.img_bias.size());
  for (std::size_t i = 0; i < m.img_bias.size(); ++i) ib(0, i) = m.img_bias[i];
  Matrix tb(1, m.txt_bias.size());
  for (std::size_t i = 0; i < m.txt_bias.size(); ++i) tb(0, i) = m.txt_bias[i];

  json params = json::array();
  params.push_back(grads_like("img_proj", m.img_proj));
  params.push_back(grads_like("img_bias", ib));
  params.push_back(grads_like("txt_embed", m.txt_embed));
  params.push_back(grads_like("txt_proj", m.txt_proj));
  params.push_back(grads_like("txt_bias", tb));

  json desc{{"version", 1},      {"dims", dims_to_json(m.dims)}, {"tau", m.tau},
            {"seed", m.rng_seed}, {"step", m.step},               {"params", params}};
  store_json(desc, dir + "/model.json");
}

ModelState load_model(const std::string& dir) {
  const json desc = load_json(dir + "/model.json", "load_model");
  ModelState m;
  m.dims = dims_from_json(desc.at("dims"));
  m.tau = desc.at("tau").get<double>();
  m.rng_seed = desc.at("seed").get<std::uint64_t>();
  m.step = desc.at("step").get<std::uint64_t>();
  for (const json& p : desc.at("params")) {
    const std::string name = p.at("name").get<std::string>();
    Matrix mat = read_matrix(dir + "/" + p.at("file").get<std::string>());
    if (name == "img_proj")
      m.img_proj = std::move(mat);
    else if (name == "img_bias")
      m.img_bias = mat.row_vec(0);
    else if (name == "txt_embed")
      m.txt_embed = std::move(mat);
    else if (name == "txt_proj")
      m.txt_proj = std::move(mat);
    else if (name == "txt_bias")
      m.txt_bias = mat.row_vec(0);
    else
      throw std::runtime_error("load_model: unknown parameter " + name);
  }
  m.validate();
  return m;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  static const char* hex = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = hex[h & 0xf];
    h >>= 4;
  }
  return out;
}

}  // namespace otcclip
