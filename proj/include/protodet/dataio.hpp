#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "protodet/geometry.hpp"

namespace protodet {

struct Annotation {
  int class_id = 0;
  Box box;
  bool difficult = false;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Interleaved RGB image, row-major, values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  std::vector<float> pixels;  // height * width * 3

  float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  ImageBounds bounds() const { return {static_cast<double>(width), static_cast<double>(height)}; }
};

struct ImageRecord {
  std::string image_id;
  Image image;
  std::vector<Annotation> annotations;
};

/// Immutable collection of records plus the class -> image lookup.
class DatasetIndex {
 public:
  DatasetIndex() = default;
  DatasetIndex(std::vector<std::string> class_names, std::vector<ImageRecord> records);

  const std::vector<std::string>& class_names() const { return class_names_; }
  int num_classes() const { return static_cast<int>(class_names_.size()); }
  const std::vector<ImageRecord>& records() const { return records_; }
  /// Image ids (in record order) holding at least one instance of each class.
  const std::map<int, std::vector<std::string>>& per_class_index() const { return per_class_; }

  const ImageRecord& record(const std::string& image_id) const;
  bool contains(const std::string& image_id) const { return by_id_.count(image_id) > 0; }

  /// Keeps only the listed records, in their original order.
  DatasetIndex subset(const std::vector<std::string>& image_ids) const;

  static std::map<int, std::vector<std::string>> build_class_index(
      const std::vector<ImageRecord>& records);

 private:
  std::vector<std::string> class_names_;
  std::vector<ImageRecord> records_;
  std::map<int, std::vector<std::string>> per_class_;
  std::map<std::string, std::size_t> by_id_;
};

/// Throws ValidationError when the annotation is degenerate or outside
/// [0, width] x [0, height] or carries an unknown class.
void validate_annotation(const Annotation& a, int num_classes, const ImageBounds& bounds);

struct SynthConfig {
  int num_images = 100;
  int image_size = 128;
  int num_classes = 7;
  int min_objects = 1;
  int max_objects = 4;
  double min_object_size = 14.0;
  double max_object_size = 40.0;
  std::uint64_t seed = 0;
};

DatasetIndex generate_synthetic_dataset(const SynthConfig& config);

/// Name of the shape family used for a class id.
std::string synthetic_class_name(int class_id);

// Annotation text format: one object per line,
// `class_id x_min y_min x_max y_max difficult_flag`, integer coordinates.
std::vector<Annotation> parse_annotations(const std::filesystem::path& path);
std::vector<Annotation> parse_annotations_text(const std::string& text);
void write_annotations(const std::vector<Annotation>& annotations,
                       const std::filesystem::path& path);
std::string format_annotations(const std::vector<Annotation>& annotations);

void write_png(const Image& image, const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

/// Writes images/<id>.png, labels/<id>.txt and classes.txt.
void save_dataset(const DatasetIndex& dataset, const std::filesystem::path& root);
DatasetIndex load_dataset(const std::filesystem::path& root);

/// Hex SHA-256 over every file of a dataset directory, in sorted path order.
std::string dataset_content_hash(const std::filesystem::path& root);

/// Deterministic three-way image split by record position.
struct ImageSplit {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> eval;
};

ImageSplit split_images(const DatasetIndex& dataset, double val_fraction, double eval_fraction);

}  // namespace protodet
