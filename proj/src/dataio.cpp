#include "acseg/dataio.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace acseg {
namespace {

constexpr char kFeatureMagic[4] = {'A', 'C', 'F', 'T'};
constexpr char kCheckpointMagic[4] = {'A', 'C', 'C', 'K'};
constexpr char kLabelMagic[4] = {'A', 'C', 'L', 'M'};
constexpr std::uint16_t kDtypeF32 = 1;
constexpr std::uint64_t kRegionHeaderBytes = 20;

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
  void uint(T v) {
    char b[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out_.write(b, sizeof(T));
  }
  void i32(std::int32_t v) { uint(static_cast<std::uint32_t>(v)); }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string section) : in_(in), section_(std::move(section)) {}

  void section(std::string s) { section_ = std::move(s); }
  const std::string& section() const { return section_; }

  template <typename T>
  T uint() {
    unsigned char b[sizeof(T)];
    raw(reinterpret_cast<char*>(b), sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(static_cast<T>(b[i]) << (8 * i));
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(uint<std::uint32_t>()); }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  double f64() { return std::bit_cast<double>(uint<std::uint64_t>()); }
  std::string str(std::uint32_t max_len = 1u << 20) {
    const auto n = uint<std::uint32_t>();
    if (n > max_len) throw FormatError(section_, "string length " + std::to_string(n) + " exceeds limit");
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  void raw(char* p, std::size_t n) {
    in_.read(p, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw FormatError(section_, "truncated: expected " + std::to_string(n) + " bytes, got " +
                                      std::to_string(in_.gcount()));
    }
  }

 private:
  std::istream& in_;
  std::string section_;
};

struct FeatureHeader {
  GridSize grid, image;
  std::string id;
  std::vector<SectionInfo> sections;
};

FeatureHeader read_header(std::istream& in) {
  Reader r(in, "header");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kFeatureMagic, 4) != 0) throw FormatError("header", "bad magic, not a feature file");
  const auto version = r.uint<std::uint16_t>();
  if (version != kFeatureFileVersion) throw FormatError("header", "unsupported version " + std::to_string(version));
  const auto dtype = r.uint<std::uint16_t>();
  if (dtype != kDtypeF32) throw FormatError("header", "unsupported dtype code " + std::to_string(dtype));
  FeatureHeader h;
  h.grid.height = static_cast<int>(r.uint<std::uint32_t>());
  h.grid.width = static_cast<int>(r.uint<std::uint32_t>());
  h.image.height = static_cast<int>(r.uint<std::uint32_t>());
  h.image.width = static_cast<int>(r.uint<std::uint32_t>());
  h.id = r.str();
  r.section("section table");
  const auto count = r.uint<std::uint32_t>();
  if (count > 4096) throw FormatError("section table", "implausible section count " + std::to_string(count));
  for (std::uint32_t s = 0; s < count; ++s) {
    SectionInfo info;
    char tag[4];
    r.raw(tag, 4);
    info.tag.assign(tag, 4);
    r.uint<std::uint32_t>();
    info.rows = r.uint<std::uint64_t>();
    info.cols = r.uint<std::uint64_t>();
    info.offset = r.uint<std::uint64_t>();
    info.bytes = r.uint<std::uint64_t>();
    h.sections.push_back(info);
  }
  return h;
}

std::uint64_t header_bytes(const std::string& id, std::size_t sections) {
  return 4 + 2 + 2 + 4 * 4 + 4 + id.size() + 4 + sections * (4 + 4 + 4 * 8);
}

void expect_bytes(const SectionInfo& s, std::uint64_t expected) {
  if (s.bytes != expected) {
    throw FormatError(s.tag, "declares " + std::to_string(s.bytes) + " bytes, shape " + std::to_string(s.rows) + "x" +
                                 std::to_string(s.cols) + " needs " + std::to_string(expected));
  }
}

MatrixF read_f32_matrix(Reader& r, const SectionInfo& s) {
  expect_bytes(s, f32_section_bytes(s.rows, s.cols));
  MatrixF m(static_cast<Index>(s.rows), static_cast<Index>(s.cols));
  for (Index i = 0; i < m.rows(); ++i) {
    for (Index j = 0; j < m.cols(); ++j) m(i, j) = r.f32();
  }
  return m;
}

std::string manifest_error(const std::string& origin, int line, const std::string& what) {
  return origin + ":" + std::to_string(line) + ": " + what;
}

}  // namespace

void write_feature_map(std::ostream& out, const FeatureMap& fm) {
  fm.validate();
  std::vector<SectionInfo> sections;
  auto add = [&](const char* tag, std::uint64_t rows, std::uint64_t cols, std::uint64_t bytes) {
    sections.push_back({tag, rows, cols, 0, bytes});
  };
  const auto n = static_cast<std::uint64_t>(fm.features.rows()), d = static_cast<std::uint64_t>(fm.features.cols());
  add("FEAT", n, d, f32_section_bytes(n, d));
  if (fm.has_attention()) {
    add("ATTN", static_cast<std::uint64_t>(fm.attention.rows()), n, f32_section_bytes(fm.attention.rows(), n));
  }
  if (fm.has_labels()) {
    const GridSize lg = fm.label_grid();
    add("LABL", static_cast<std::uint64_t>(lg.height), static_cast<std::uint64_t>(lg.width), 4ull * fm.labels.size());
  }
  if (!fm.regions.empty()) {
    const auto dim = static_cast<std::uint64_t>(fm.regions.front().embedding.size());
    for (const auto& reg : fm.regions) {
      if (reg.embedding.size() != dim) throw ShapeError("write_feature_map: ragged region embeddings");
    }
    add("REGN", fm.regions.size(), dim, fm.regions.size() * (kRegionHeaderBytes + 4 * dim));
  }
  std::uint64_t offset = header_bytes(fm.id, sections.size());
  for (auto& s : sections) {
    s.offset = offset;
    offset += s.bytes;
  }

  Writer w(out);
  w.bytes(kFeatureMagic, 4);
  w.uint(kFeatureFileVersion);
  w.uint(kDtypeF32);
  w.uint(static_cast<std::uint32_t>(fm.grid.height));
  w.uint(static_cast<std::uint32_t>(fm.grid.width));
  w.uint(static_cast<std::uint32_t>(fm.image_size.height));
  w.uint(static_cast<std::uint32_t>(fm.image_size.width));
  w.str(fm.id);
  w.uint(static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    w.bytes(s.tag.data(), 4);
    w.uint(std::uint32_t{0});
    w.uint(s.rows);
    w.uint(s.cols);
    w.uint(s.offset);
    w.uint(s.bytes);
  }
  for (Index i = 0; i < fm.features.rows(); ++i) {
    for (Index j = 0; j < fm.features.cols(); ++j) w.f32(fm.features(i, j));
  }
  for (Index i = 0; i < fm.attention.rows(); ++i) {
    for (Index j = 0; j < fm.attention.cols(); ++j) w.f32(fm.attention(i, j));
  }
  for (auto l : fm.labels) w.i32(l);
  for (const auto& reg : fm.regions) {
    w.i32(reg.concept_id);
    w.i32(reg.pixel_count);
    w.i32(reg.label);
    w.uint(static_cast<std::uint32_t>(reg.source));
    w.f32(reg.foreground_score);
    for (float v : reg.embedding) w.f32(v);
  }
  if (!out) throw std::runtime_error("write_feature_map: stream error");
}

std::vector<SectionInfo> read_section_table(std::istream& in) { return read_header(in).sections; }

FeatureMap read_feature_map(std::istream& in) {
  const auto start = in.tellg();
  const FeatureHeader h = read_header(in);
  FeatureMap fm;
  fm.id = h.id;
  fm.grid = h.grid;
  fm.image_size = h.image;
  in.clear();
  in.seekg(0, std::ios::end);
  const auto available = static_cast<std::uint64_t>(in.tellg() - start);
  bool have_features = false;
  for (const auto& s : h.sections) {
    const bool known = s.tag == "FEAT" || s.tag == "ATTN" || s.tag == "LABL" || s.tag == "REGN";
    if (!known) continue;
    in.clear();
    in.seekg(start + static_cast<std::streamoff>(s.offset));
    if (!in) throw FormatError(s.tag, "truncated: offset " + std::to_string(s.offset) + " past end of file");
    if (s.offset + s.bytes > available) {
      const std::uint64_t got = s.offset < available ? available - s.offset : 0;
      throw FormatError(s.tag, "truncated: expected " + std::to_string(s.bytes) + " bytes, got " + std::to_string(got));
    }
    Reader r(in, s.tag);
    if (s.tag == "FEAT") {
      fm.features = read_f32_matrix(r, s);
      have_features = true;
    } else if (s.tag == "ATTN") {
      fm.attention = read_f32_matrix(r, s);
    } else if (s.tag == "LABL") {
      expect_bytes(s, 4 * s.rows * s.cols);
      fm.labels.resize(static_cast<std::size_t>(s.rows * s.cols));
      for (auto& l : fm.labels) l = r.i32();
    } else {
      expect_bytes(s, s.rows * (kRegionHeaderBytes + 4 * s.cols));
      fm.regions.resize(static_cast<std::size_t>(s.rows));
      for (auto& reg : fm.regions) {
        reg.concept_id = r.i32();
        reg.pixel_count = r.i32();
        reg.label = r.i32();
        const auto src = r.uint<std::uint32_t>();
        if (src > 2) throw FormatError(s.tag, "unknown region source " + std::to_string(src));
        reg.source = static_cast<RegionEmbedding::Source>(src);
        reg.foreground_score = r.f32();
        reg.embedding.resize(static_cast<std::size_t>(s.cols));
        for (auto& v : reg.embedding) v = r.f32();
      }
    }
  }
  if (!have_features) throw FormatError("FEAT", "missing feature section");
  try {
    fm.validate();
  } catch (const std::exception& e) {
    throw FormatError("header", e.what());
  }
  return fm;
}

void write_feature_file(const std::string& path, const FeatureMap& fm) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_feature_map(out, fm);
}

FeatureMap read_feature_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  try {
    return read_feature_map(in);
  } catch (const FormatError& e) {
    throw FormatError(e.section(), path + ": " + std::string(e.what()).substr(e.section().size() + 2));
  }
}

std::vector<std::int32_t> Manifest::remap_labels(const std::vector<std::int32_t>& labels) const {
  if (remap.empty()) return labels;
  std::vector<std::int32_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto it = remap.find(labels[i]);
    out[i] = it == remap.end() ? ignore_index : it->second;
  }
  return out;
}

Manifest parse_manifest(std::istream& in, const std::string& origin) {
  Manifest m;
  std::map<int, std::string> classes;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string key;
    if (!(ls >> key)) continue;
    if (key == "ignore") {
      if (!(ls >> m.ignore_index)) throw std::runtime_error(manifest_error(origin, lineno, "ignore needs an index"));
    } else if (key == "class") {
      int idx = 0;
      std::string name;
      if (!(ls >> idx) || !(ls >> std::ws) || !std::getline(ls, name) || name.empty()) {
        throw std::runtime_error(manifest_error(origin, lineno, "class needs an index and a name"));
      }
      if (!classes.emplace(idx, name).second) {
        throw std::runtime_error(manifest_error(origin, lineno, "duplicate class index " + std::to_string(idx)));
      }
    } else if (key == "remap") {
      std::int32_t from = 0, to = 0;
      if (!(ls >> from >> to)) throw std::runtime_error(manifest_error(origin, lineno, "remap needs two labels"));
      m.remap[from] = to;
    } else if (key == "image") {
      std::string path;
      if (!(ls >> std::ws) || !std::getline(ls, path) || path.empty()) {
        throw std::runtime_error(manifest_error(origin, lineno, "image needs a path"));
      }
      m.images.push_back(path);
    } else {
      throw std::runtime_error(manifest_error(origin, lineno, "unknown directive '" + key + "'"));
    }
  }
  int expected = 0;
  for (const auto& [idx, name] : classes) {
    if (idx != expected++) throw std::runtime_error(origin + ": class indices must be contiguous from 0");
    m.class_names.push_back(name);
  }
  return m;
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  return parse_manifest(in, path);
}

void write_manifest(std::ostream& out, const Manifest& m) {
  out << "ignore " << m.ignore_index << "\n";
  for (std::size_t c = 0; c < m.class_names.size(); ++c) out << "class " << c << " " << m.class_names[c] << "\n";
  for (const auto& [from, to] : m.remap) out << "remap " << from << " " << to << "\n";
  for (const auto& img : m.images) out << "image " << img << "\n";
}

void write_manifest(const std::string& path, const Manifest& m) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_manifest(out, m);
}

std::vector<std::string> manifest_image_paths(const std::string& manifest_path, const Manifest& m) {
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  std::vector<std::string> out;
  for (const auto& img : m.images) {
    const std::filesystem::path p(img);
    out.push_back(p.is_absolute() ? p.string() : (dir / p).string());
  }
  return out;
}

void write_checkpoint(std::ostream& out, const AcgParams<double>& params) {
  const AcgConfig& c = params.config;
  Writer w(out);
  w.bytes(kCheckpointMagic, 4);
  w.uint(kCheckpointVersion);
  w.uint(static_cast<std::uint32_t>(c.num_prototypes));
  w.uint(static_cast<std::uint32_t>(c.embed_dim));
  w.uint(static_cast<std::uint32_t>(c.num_steps));
  w.uint(static_cast<std::uint32_t>(c.num_heads));
  w.uint(static_cast<std::uint32_t>(c.ffn_expansion));
  w.f64(c.prototype_init_std);
  w.f64(c.layer_norm_eps);
  w.uint(static_cast<std::uint64_t>(c.seed));
  std::vector<std::pair<std::string, const Matrix<double>*>> table;
  for_each_parameter(params, [&](const std::string& name, const Matrix<double>& m, bool) { table.emplace_back(name, &m); });
  w.uint(static_cast<std::uint32_t>(table.size()));
  for (const auto& [name, m] : table) {
    w.str(name);
    w.uint(static_cast<std::uint64_t>(m->rows()));
    w.uint(static_cast<std::uint64_t>(m->cols()));
  }
  for (const auto& [name, m] : table) {
    for (Index i = 0; i < m->rows(); ++i) {
      for (Index j = 0; j < m->cols(); ++j) w.f64((*m)(i, j));
    }
  }
  if (!out) throw std::runtime_error("write_checkpoint: stream error");
}

AcgParams<double> read_checkpoint(std::istream& in) {
  Reader r(in, "checkpoint header");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("checkpoint header", "bad magic");
  const auto version = r.uint<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint header", "unsupported version " + std::to_string(version));
  }
  AcgConfig c;
  c.num_prototypes = static_cast<int>(r.uint<std::uint32_t>());
  c.embed_dim = static_cast<int>(r.uint<std::uint32_t>());
  c.num_steps = static_cast<int>(r.uint<std::uint32_t>());
  c.num_heads = static_cast<int>(r.uint<std::uint32_t>());
  c.ffn_expansion = static_cast<int>(r.uint<std::uint32_t>());
  c.prototype_init_std = r.f64();
  c.layer_norm_eps = r.f64();
  c.seed = r.uint<std::uint64_t>();
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw FormatError("checkpoint header", e.what());
  }
  AcgParams<double> params = init_acg<double>(c);
  r.section("shape table");
  const auto count = r.uint<std::uint32_t>();
  std::vector<Matrix<double>*> slots;
  std::vector<std::string> names;
  for_each_parameter(params, [&](const std::string& name, Matrix<double>& m, bool) {
    slots.push_back(&m);
    names.push_back(name);
  });
  if (count != slots.size()) {
    throw FormatError("shape table", std::to_string(count) + " entries, configuration implies " +
                                         std::to_string(slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const std::string name = r.str(4096);
    const auto rows = r.uint<std::uint64_t>(), cols = r.uint<std::uint64_t>();
    if (name != names[i] || rows != static_cast<std::uint64_t>(slots[i]->rows()) ||
        cols != static_cast<std::uint64_t>(slots[i]->cols())) {
      throw FormatError("shape table", "entry " + std::to_string(i) + " '" + name + "' " + std::to_string(rows) + "x" +
                                           std::to_string(cols) + " does not match '" + names[i] + "' " +
                                           shape_string(slots[i]->rows(), slots[i]->cols()));
    }
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    r.section(names[i]);
    for (Index a = 0; a < slots[i]->rows(); ++a) {
      for (Index b = 0; b < slots[i]->cols(); ++b) (*slots[i])(a, b) = r.f64();
    }
  }
  return params;
}

void write_checkpoint(const std::string& path, const AcgParams<double>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  write_checkpoint(out, params);
}

AcgParams<double> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(in);
}

void write_label_map(const std::string& path, const std::vector<std::int32_t>& labels, GridSize grid) {
  if (static_cast<int>(labels.size()) != grid.count()) throw ShapeError("write_label_map: label count vs grid");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  Writer w(out);
  w.bytes(kLabelMagic, 4);
  w.uint(static_cast<std::uint32_t>(grid.height));
  w.uint(static_cast<std::uint32_t>(grid.width));
  for (auto l : labels) w.i32(l);
}

std::vector<std::int32_t> read_label_map(const std::string& path, GridSize* grid) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  Reader r(in, "label map");
  char magic[4];
  r.raw(magic, 4);
  if (std::memcmp(magic, kLabelMagic, 4) != 0) throw FormatError("label map", "bad magic");
  GridSize g;
  g.height = static_cast<int>(r.uint<std::uint32_t>());
  g.width = static_cast<int>(r.uint<std::uint32_t>());
  std::vector<std::int32_t> labels(static_cast<std::size_t>(g.count()));
  for (auto& l : labels) l = r.i32();
  if (grid) *grid = g;
  return labels;
}

void write_pgm(const std::string& path, const std::vector<std::int32_t>& labels, GridSize grid) {
  if (static_cast<int>(labels.size()) != grid.count()) throw ShapeError("write_pgm: label count vs grid");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "P5\n" << grid.width << " " << grid.height << "\n255\n";
  for (auto l : labels) out.put(static_cast<char>(std::clamp(l, 0, 255)));
}

}  // namespace acseg
