#pragma once

// On-disk formats. All multi-byte values are little-endian.
//
// Feature file ("ACFT"):
//   char[4] magic, u16 version, u16 dtype (1 = f32)
//   u32 grid height, grid width, image height, image width
//   u32 id length, id bytes
//   u32 section count, then per section:
//     char[4] tag, u32 reserved, u64 rows, u64 cols, u64 offset, u64 bytes
//   section payloads at their absolute offsets
// Known tags: FEAT (n x d f32), ATTN (heads x n f32), LABL (h x w i32),
// REGN (regions x dim records of i32 concept, i32 pixels, i32 label,
// u32 source, f32 score, dim f32). Readers skip unknown tags.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "acseg/acg.hpp"
#include "acseg/feature_map.hpp"
#include "acseg/trainer.hpp"

namespace acseg {

inline constexpr std::uint16_t kFeatureFileVersion = 1;
inline constexpr std::uint16_t kCheckpointVersion = 1;

// Format violation; `section()` names the part of the file that failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::string section, const std::string& what)
      : std::runtime_error(section + ": " + what), section_(std::move(section)) {}
  const std::string& section() const { return section_; }

 private:
  std::string section_;
};

struct SectionInfo {
  std::string tag;
  std::uint64_t rows = 0, cols = 0, offset = 0, bytes = 0;
};

// Payload size of a dense f32 section.
constexpr std::uint64_t f32_section_bytes(std::uint64_t rows, std::uint64_t cols) { return rows * cols * 4; }

void write_feature_map(std::ostream& out, const FeatureMap& fm);
FeatureMap read_feature_map(std::istream& in);
std::vector<SectionInfo> read_section_table(std::istream& in);

void write_feature_file(const std::string& path, const FeatureMap& fm);
FeatureMap read_feature_file(const std::string& path);

// Reads feature files one at a time on demand.
class FileSource : public FeatureSource {
 public:
  explicit FileSource(std::vector<std::string> paths) : paths_(std::move(paths)) {}
  std::size_t size() const override { return paths_.size(); }
  FeatureMap get(std::size_t index) const override { return read_feature_file(paths_.at(index)); }
  const std::vector<std::string>& paths() const { return paths_; }

 private:
  std::vector<std::string> paths_;
};

// Line-oriented dataset description:
//   # comment
//   ignore <index>
//   class <index> <name>
//   remap <source label> <target label>
//   image <path relative to the manifest>
struct Manifest {
  std::vector<std::string> class_names;
  std::int32_t ignore_index = kIgnoreLabel;
  std::map<std::int32_t, std::int32_t> remap;
  std::vector<std::string> images;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  // Applies the remap table; labels without an entry become the ignore index
  // when a table is present.
  std::vector<std::int32_t> remap_labels(const std::vector<std::int32_t>& labels) const;
};

Manifest parse_manifest(std::istream& in, const std::string& origin = "manifest");
Manifest read_manifest(const std::string& path);
void write_manifest(std::ostream& out, const Manifest& m);
void write_manifest(const std::string& path, const Manifest& m);
// Image paths resolved against the manifest's directory.
std::vector<std::string> manifest_image_paths(const std::string& manifest_path, const Manifest& m);

// Checkpoint ("ACCK"): u16 version, config, then a shape table of named f64
// matrices in parameter order.
void write_checkpoint(std::ostream& out, const AcgParams<double>& params);
AcgParams<double> read_checkpoint(std::istream& in);
void write_checkpoint(const std::string& path, const AcgParams<double>& params);
AcgParams<double> read_checkpoint(const std::string& path);

// Label maps: raw ("ACLM", u32 height, u32 width, i32 labels) or binary PGM
// with labels clamped to [0, 255].
void write_label_map(const std::string& path, const std::vector<std::int32_t>& labels, GridSize grid);
std::vector<std::int32_t> read_label_map(const std::string& path, GridSize* grid = nullptr);
void write_pgm(const std::string& path, const std::vector<std::int32_t>& labels, GridSize grid);

}  // namespace acseg
