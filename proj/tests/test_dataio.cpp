#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "acseg/dataio.hpp"
#include "gradcheck.hpp"

using namespace acseg;
namespace fs = std::filesystem;

namespace {

// Independent little-endian writer for hand-built files.
struct Bytes {
  std::string s;
  template <typename T>
  void put(T v) {
    auto raw = std::bit_cast<std::array<char, sizeof(T)>>(v);
    s.append(raw.data(), raw.size());
  }
  void tag(const char* t) { s.append(t, 4); }
};

struct RawSection {
  const char* tag;
  std::uint64_t rows, cols;
  std::string payload;
};

std::string build_file(GridSize grid, const std::string& id, const std::vector<RawSection>& sections) {
  Bytes h;
  h.tag("ACFT");
  h.put<std::uint16_t>(1);
  h.put<std::uint16_t>(1);
  h.put<std::uint32_t>(static_cast<std::uint32_t>(grid.height));
  h.put<std::uint32_t>(static_cast<std::uint32_t>(grid.width));
  h.put<std::uint32_t>(0);
  h.put<std::uint32_t>(0);
  h.put<std::uint32_t>(static_cast<std::uint32_t>(id.size()));
  h.s += id;
  h.put<std::uint32_t>(static_cast<std::uint32_t>(sections.size()));
  std::uint64_t offset = h.s.size() + 40 * sections.size();
  for (const auto& sec : sections) {
    h.tag(sec.tag);
    h.put<std::uint32_t>(0);
    h.put<std::uint64_t>(sec.rows);
    h.put<std::uint64_t>(sec.cols);
    h.put<std::uint64_t>(offset);
    h.put<std::uint64_t>(sec.payload.size());
    offset += sec.payload.size();
  }
  for (const auto& sec : sections) h.s += sec.payload;
  return h.s;
}

std::string f32_payload(const MatrixF& m) {
  Bytes b;
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) b.put(m(i, j));
  return b.s;
}

MatrixF random_f32(int rows, int cols, std::mt19937_64& rng) {
  return acseg::testing::random_matrix(rows, cols, rng).cast<float>();
}

FeatureMap sample_map() {
  std::mt19937_64 rng(1);
  FeatureMap fm;
  fm.id = "img_0001";
  fm.grid = {3, 4};
  fm.features = random_f32(12, 5, rng);
  fm.attention = random_f32(2, 12, rng);
  fm.image_size = {6, 8};
  fm.labels.resize(48);
  for (std::size_t i = 0; i < fm.labels.size(); ++i) fm.labels[i] = static_cast<std::int32_t>(i % 7);
  fm.labels[3] = kIgnoreLabel;
  RegionEmbedding r;
  r.concept_id = 2;
  r.pixel_count = 5;
  r.label = 3;
  r.source = RegionEmbedding::Source::kClipAverage;
  r.foreground_score = 0.75f;
  r.embedding = {0.5f, -1.0f, 2.0f};
  fm.regions = {r, r};
  fm.regions[1].concept_id = 4;
  fm.regions[1].source = RegionEmbedding::Source::kVitMatting;
  return fm;
}

std::string serialize(const FeatureMap& fm) {
  std::ostringstream out;
  write_feature_map(out, fm);
  return out.str();
}

FeatureMap parse(const std::string& bytes) {
  std::istringstream in(bytes);
  return read_feature_map(in);
}

struct TempDir {
  fs::path path = fs::temp_directory_path() / ("acseg_test_" + std::to_string(std::random_device{}()));
  TempDir() { fs::create_directories(path); }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("dense section size") {
  CHECK(f32_section_bytes(196, 384) == 301056);
  static_assert(f32_section_bytes(2, 3) == 24);
}

TEST_CASE("feature map round trip is bit exact") {
  const FeatureMap fm = sample_map();
  const FeatureMap back = parse(serialize(fm));
  CHECK(back.id == fm.id);
  CHECK(back.grid == fm.grid);
  CHECK(back.image_size == fm.image_size);
  CHECK(std::memcmp(back.features.data(), fm.features.data(), sizeof(float) * 60) == 0);
  CHECK(back.attention == fm.attention);
  CHECK(back.labels == fm.labels);
  REQUIRE(back.regions.size() == 2);
  CHECK(back.regions[1].concept_id == 4);
  CHECK(back.regions[1].source == RegionEmbedding::Source::kVitMatting);
  CHECK(back.regions[0].foreground_score == 0.75f);
  CHECK(back.regions[0].embedding == fm.regions[0].embedding);
  CHECK(serialize(back) == serialize(fm));
}

TEST_CASE("optional sections may be absent") {
  FeatureMap fm = sample_map();
  fm.attention.resize(0, 0);
  fm.labels.clear();
  fm.regions.clear();
  fm.image_size = {0, 0};
  const FeatureMap back = parse(serialize(fm));
  CHECK_FALSE(back.has_attention());
  CHECK_FALSE(back.has_labels());
  CHECK(back.features == fm.features);
}

TEST_CASE("section table lists each payload") {
  const std::string bytes = serialize(sample_map());
  std::istringstream in(bytes);
  const auto table = read_section_table(in);
  REQUIRE(table.size() == 4);
  CHECK(table[0].tag == "FEAT");
  CHECK(table[0].rows == 12);
  CHECK(table[0].cols == 5);
  CHECK(table[0].bytes == f32_section_bytes(12, 5));
  for (const auto& s : table) CHECK(s.offset + s.bytes <= bytes.size());
}

TEST_CASE("hand-built file is read and unknown sections are skipped") {
  std::mt19937_64 rng(2);
  const MatrixF feats = random_f32(4, 3, rng);
  const std::string file = build_file({2, 2}, "x", {{"XTRA", 1, 3, std::string(12, '\x7f')}, {"FEAT", 4, 3, f32_payload(feats)}});
  const FeatureMap fm = parse(file);
  CHECK(fm.id == "x");
  CHECK(fm.features == feats);
}

TEST_CASE("truncation names the section") {
  std::mt19937_64 rng(3);
  const std::string file = build_file({2, 2}, "t", {{"FEAT", 4, 3, f32_payload(random_f32(4, 3, rng))}});
  try {
    parse(file.substr(0, file.size() - 5));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.section() == "FEAT");
    CHECK(std::string(e.what()).find("truncated: expected 48 bytes, got 43") != std::string::npos);
  }
}

TEST_CASE("header errors") {
  std::string file = serialize(sample_map());
  std::string bad_magic = file;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(parse(bad_magic), FormatError);
  std::string bad_version = file;
  bad_version[4] = 9;
  try {
    parse(bad_version);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.section() == "header");
  }
  CHECK_THROWS_AS(parse(""), FormatError);
}

TEST_CASE("feature section with the wrong shape is rejected") {
  std::mt19937_64 rng(4);
  const std::string file = build_file({2, 3}, "s", {{"FEAT", 4, 3, f32_payload(random_f32(4, 3, rng))}});
  CHECK_THROWS(parse(file));
}

TEST_CASE("file source reads from disk") {
  TempDir dir;
  const FeatureMap fm = sample_map();
  const std::string path = (dir.path / "a.acft").string();
  write_feature_file(path, fm);
  FileSource src({path});
  CHECK(src.size() == 1);
  CHECK(src.get(0).features == fm.features);
  CHECK_THROWS(read_feature_file((dir.path / "missing.acft").string()));
}

TEST_CASE("manifest parsing and remap") {
  std::istringstream in(
      "# toy\n"
      "ignore 255\n"
      "class 0 sky\n"
      "class 1 ground\n"
      "remap 10 0\n"
      "remap 11 1\n"
      "image a.acft\n"
      "image sub/b.acft\n");
  const Manifest m = parse_manifest(in);
  CHECK(m.num_classes() == 2);
  CHECK(m.class_names[1] == "ground");
  CHECK(m.images.size() == 2);
  CHECK(m.remap_labels({10, 11, 12, 255}) == std::vector<std::int32_t>{0, 1, 255, 255});

  std::ostringstream out;
  write_manifest(out, m);
  std::istringstream again(out.str());
  const Manifest m2 = parse_manifest(again);
  CHECK(m2.class_names == m.class_names);
  CHECK(m2.remap == m.remap);
  CHECK(m2.images == m.images);

  const auto paths = manifest_image_paths("/data/set/list.txt", m);
  CHECK(fs::path(paths[1]) == fs::path("/data/set/sub/b.acft"));
}

TEST_CASE("manifest errors") {
  std::istringstream gap("class 0 a\nclass 2 b\n");
  CHECK_THROWS(parse_manifest(gap));
  std::istringstream junk("colour 0 red\n");
  CHECK_THROWS(parse_manifest(junk));
}

TEST_CASE("manifest without a remap table passes labels through") {
  std::istringstream in("class 0 a\n");
  CHECK(parse_manifest(in).remap_labels({0, 7}) == std::vector<std::int32_t>{0, 7});
}

TEST_CASE("shipped class tables") {
  const Manifest coco = read_manifest(std::string(ACSEG_DATA_DIR) + "/cocostuff27.txt");
  CHECK(coco.num_classes() == 27);
  CHECK(coco.class_names[9] == "person");
  CHECK(coco.remap.size() == 182);
  CHECK(coco.remap_labels({0, 1, 181, 255}) == std::vector<std::int32_t>{9, 11, 24, 255});
  std::set<std::int32_t> targets;
  for (const auto& [from, to] : coco.remap) targets.insert(to);
  CHECK(targets.size() == 27);

  const Manifest voc = read_manifest(std::string(ACSEG_DATA_DIR) + "/voc21.txt");
  CHECK(voc.num_classes() == 21);
  CHECK(voc.class_names[0] == "background");
}

TEST_CASE("checkpoint round trip") {
  AcgConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_steps = 2;
  cfg.num_prototypes = 3;
  cfg.seed = 11;
  const auto params = init_acg<double>(cfg);
  std::stringstream buf;
  write_checkpoint(buf, params);
  const auto back = read_checkpoint(buf);
  CHECK(back.config.embed_dim == 8);
  CHECK(back.config.seed == 11);
  std::vector<Matrix<double>> a, b;
  for_each_parameter(params, [&](const std::string&, const Matrix<double>& m, bool) { a.push_back(m); });
  for_each_parameter(back, [&](const std::string&, const Matrix<double>& m, bool) { b.push_back(m); });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i] == b[i]);

  std::string bytes = buf.str();
  std::istringstream truncated(bytes.substr(0, bytes.size() / 2));
  CHECK_THROWS_AS(read_checkpoint(truncated), FormatError);
  bytes[0] = 'Z';
  std::istringstream bad(bytes);
  CHECK_THROWS_AS(read_checkpoint(bad), FormatError);
}

TEST_CASE("label map round trip and pgm") {
  TempDir dir;
  const std::vector<std::int32_t> labels{0, 1, 2, 255, 300, -4};
  const std::string path = (dir.path / "m.aclm").string();
  write_label_map(path, labels, {2, 3});
  GridSize g;
  CHECK(read_label_map(path, &g) == labels);
  CHECK(g == GridSize{2, 3});

  const std::string pgm = (dir.path / "m.pgm").string();
  write_pgm(pgm, labels, {2, 3});
  std::ifstream in(pgm, std::ios::binary);
  std::string content((std::istreambuf_iterator<char>(in)), {});
  const std::string header = "P5\n3 2\n255\n";
  REQUIRE(content.size() == header.size() + 6);
  CHECK(content.substr(0, header.size()) == header);
  CHECK(static_cast<unsigned char>(content[header.size() + 4]) == 255);
  CHECK(static_cast<unsigned char>(content[header.size() + 5]) == 0);
}
