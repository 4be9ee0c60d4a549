#include "protodet/dataio.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace fs = std::filesystem;

namespace protodet {

DatasetIndex::DatasetIndex(std::vector<std::string> class_names, std::vector<ImageRecord> records)
    : class_names_(std::move(class_names)), records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const ImageRecord& r = records_[i];
    if (!by_id_.emplace(r.image_id, i).second) {
      throw ValidationError("duplicate image id '" + r.image_id + "'");
    }
    for (const Annotation& a : r.annotations) {
      validate_annotation(a, num_classes(), r.image.bounds());
    }
  }
  per_class_ = build_class_index(records_);
}

const ImageRecord& DatasetIndex::record(const std::string& image_id) const {
  auto it = by_id_.find(image_id);
  if (it == by_id_.end()) throw ContractError("unknown image id '" + image_id + "'");
  return records_[it->second];
}

DatasetIndex DatasetIndex::subset(const std::vector<std::string>& image_ids) const {
  std::set<std::string> wanted(image_ids.begin(), image_ids.end());
  std::vector<ImageRecord> kept;
  for (const ImageRecord& r : records_) {
    if (wanted.count(r.image_id)) kept.push_back(r);
  }
  return DatasetIndex(class_names_, std::move(kept));
}

std::map<int, std::vector<std::string>> DatasetIndex::build_class_index(
    const std::vector<ImageRecord>& records) {
  std::map<int, std::vector<std::string>> index;
  for (const ImageRecord& r : records) {
    std::set<int> seen;
    for (const Annotation& a : r.annotations) {
      if (seen.insert(a.class_id).second) index[a.class_id].push_back(r.image_id);
    }
  }
  return index;
}

void validate_annotation(const Annotation& a, int num_classes, const ImageBounds& bounds) {
  if (a.class_id < 0 || a.class_id >= num_classes) {
    throw ValidationError("class id " + std::to_string(a.class_id) + " outside [0, " +
                          std::to_string(num_classes) + ")");
  }
  const Box& b = a.box;
  if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max)) {
    throw ValidationError("degenerate box");
  }
  if (b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > bounds.width || b.y_max > bounds.height) {
    throw ValidationError("box outside image bounds");
  }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

constexpr int kShapeFamilies = 7;
const std::array<const char*, kShapeFamilies> kShapeNames = {
    "circle", "square", "triangle", "ring", "cross", "bar", "blob"};

struct Rgb {
  double r, g, b;
};

Rgb hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1) { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else { r = c; b = x; }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

float quantize(double v) {
  const double clamped = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(clamped * 255.0)) / 255.0f;
}

struct ShapeInstance {
  int family = 0;
  double cx = 0, cy = 0, radius = 0, angle = 0;
  double phase1 = 0, phase2 = 0;

  // Membership test in the shape's local frame, where the shape fits the unit disk.
  bool contains(double px, double py) const {
    const double dx = (px - cx) / radius;
    const double dy = (py - cy) / radius;
    const double c = std::cos(angle), s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    const double r2 = u * u + v * v;
    const double sqrt3 = std::sqrt(3.0);
    switch (family) {
      case 0: return r2 <= 1.0;
      case 1: return std::abs(u) <= 0.7 && std::abs(v) <= 0.7;
      case 2: return v >= -0.5 && sqrt3 * u + v <= 1.0 && -sqrt3 * u + v <= 1.0;
      case 3: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
      case 4:
        return (std::abs(u) <= 0.28 && std::abs(v) <= 0.95) ||
               (std::abs(v) <= 0.28 && std::abs(u) <= 0.95);
      case 5: return std::abs(u) <= 0.95 && std::abs(v) <= 0.3;
      default: {
        const double theta = std::atan2(v, u);
        const double edge =
            0.8 * (1.0 + 0.2 * std::sin(3.0 * theta + phase1) + 0.1 * std::sin(5.0 * theta + phase2));
        return std::sqrt(r2) <= edge;
      }
    }
  }
};

void paint_background(Image& img, Rng& rng) {
  const int grid = 9;
  std::vector<double> coarse(static_cast<std::size_t>(grid * grid * 3));
  const Rgb base = hsv_to_rgb(rng.uniform(0.05, 0.35), rng.uniform(0.1, 0.35), rng.uniform(0.3, 0.6));
  for (double& v : coarse) v = rng.uniform(-0.12, 0.12);
  const double cell = static_cast<double>(img.width) / (grid - 1);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const double gx = x / cell, gy = y * static_cast<double>(grid - 1) / img.height;
      const int x0 = std::min(static_cast<int>(gx), grid - 2);
      const int y0 = std::min(static_cast<int>(gy), grid - 2);
      const double fx = gx - x0, fy = gy - y0;
      for (int c = 0; c < 3; ++c) {
        auto at = [&](int yy, int xx) { return coarse[(static_cast<std::size_t>(yy) * grid + xx) * 3 + c]; };
        const double smooth = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                              fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        const double channel = c == 0 ? base.r : (c == 1 ? base.g : base.b);
        img.at(y, x, c) = quantize(channel + smooth + rng.uniform(-0.05, 0.05));
      }
    }
  }
}

ImageRecord generate_image(const SynthConfig& config, int index) {
  Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(index)));
  ImageRecord record;
  std::ostringstream id;
  id << "img_" << std::setw(5) << std::setfill('0') << index;
  record.image_id = id.str();
  Image& img = record.image;
  img.width = img.height = config.image_size;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height * 3, 0.0f);
  paint_background(img, rng);

  const int count = rng.uniform_int(config.min_objects, config.max_objects);
  std::vector<Box> placed;
  for (int o = 0; o < count; ++o) {
    const int class_id = static_cast<int>(rng.index(static_cast<std::size_t>(config.num_classes)));
    for (int attempt = 0; attempt < 50; ++attempt) {
      ShapeInstance shape;
      shape.family = class_id % kShapeFamilies;
      const double size = rng.uniform(config.min_object_size, config.max_object_size);
      shape.radius = 0.5 * size;
      shape.angle = rng.uniform(0.0, 2.0 * M_PI);
      shape.phase1 = rng.uniform(0.0, 2.0 * M_PI);
      shape.phase2 = rng.uniform(0.0, 2.0 * M_PI);
      // Blobs may poke slightly outside the unit disk.
      const double reach = 1.05 * shape.radius;
      shape.cx = rng.uniform(reach + 1.0, img.width - reach - 1.0);
      shape.cy = rng.uniform(reach + 1.0, img.height - reach - 1.0);

      const int x0 = std::max(0, static_cast<int>(std::floor(shape.cx - reach)));
      const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(shape.cx + reach)));
      const int y0 = std::max(0, static_cast<int>(std::floor(shape.cy - reach)));
      const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(shape.cy + reach)));
      int bx0 = img.width, by0 = img.height, bx1 = -1, by1 = -1;
      std::vector<std::pair<int, int>> mask;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          if (shape.contains(x + 0.5, y + 0.5)) {
            mask.emplace_back(y, x);
            bx0 = std::min(bx0, x);
            by0 = std::min(by0, y);
            bx1 = std::max(bx1, x);
            by1 = std::max(by1, y);
          }
        }
      }
      if (mask.size() < 16) continue;
      const Box box{static_cast<double>(bx0), static_cast<double>(by0),
                    static_cast<double>(bx1 + 1), static_cast<double>(by1 + 1)};
      bool overlaps = false;
      for (const Box& other : placed) {
        if (iou(box, other) > 0.1) overlaps = true;
      }
      if (overlaps) continue;

      // Hue family per class; later classes reuse a shape with a shifted hue.
      const double hue = std::fmod(class_id * 0.618034, 1.0) + rng.uniform(-0.05, 0.05);
      const Rgb color = hsv_to_rgb(hue, rng.uniform(0.55, 0.9), rng.uniform(0.6, 0.95));
      for (const auto& [y, x] : mask) {
        const double shade = rng.uniform(-0.06, 0.06);
        img.at(y, x, 0) = quantize(color.r + shade);
        img.at(y, x, 1) = quantize(color.g + shade);
        img.at(y, x, 2) = quantize(color.b + shade);
      }
      placed.push_back(box);
      record.annotations.push_back(Annotation{class_id, box, false});
      break;
    }
  }
  return record;
}

}  // namespace

std::string synthetic_class_name(int class_id) {
  std::string name = kShapeNames[static_cast<std::size_t>(class_id % kShapeFamilies)];
  if (class_id >= kShapeFamilies) name += "_" + std::to_string(class_id / kShapeFamilies);
  return name;
}

DatasetIndex generate_synthetic_dataset(const SynthConfig& config) {
  if (config.num_images <= 0) throw ConfigError("num_images must be positive");
  if (config.num_classes < 5) throw ConfigError("num_classes must be at least 5");
  if (config.image_size < 64) throw ConfigError("image_size must be at least 64");
  if (config.min_objects < 0 || config.max_objects < config.min_objects || config.max_objects <= 0) {
    throw ConfigError("invalid objects_per_image range");
  }
  if (config.min_object_size <= 4.0 || config.max_object_size < config.min_object_size ||
      1.05 * config.max_object_size + 2.0 > config.image_size) {
    throw ConfigError("invalid object size range");
  }
  std::vector<std::string> names;
  for (int c = 0; c < config.num_classes; ++c) names.push_back(synthetic_class_name(c));
  std::vector<ImageRecord> records;
  records.reserve(static_cast<std::size_t>(config.num_images));
  for (int i = 0; i < config.num_images; ++i) records.push_back(generate_image(config, i));
  return DatasetIndex(std::move(names), std::move(records));
}

// ---------------------------------------------------------------------------
// Annotation text format

namespace {

bool integral(double v) { return std::floor(v) == v && std::abs(v) < 1e9; }

}  // namespace

std::vector<Annotation> parse_annotations_text(const std::string& text) {
  std::vector<Annotation> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream fields(line);
    long long v[6];
    for (int i = 0; i < 6; ++i) {
      if (!(fields >> v[i])) throw ParseError("expected 6 integer fields", line_no);
    }
    std::string extra;
    if (fields >> extra) throw ParseError("trailing field '" + extra + "'", line_no);
    if (v[5] != 0 && v[5] != 1) throw ParseError("difficult flag must be 0 or 1", line_no);
    Annotation a{static_cast<int>(v[0]),
                 Box{static_cast<double>(v[1]), static_cast<double>(v[2]),
                     static_cast<double>(v[3]), static_cast<double>(v[4])},
                 v[5] == 1};
    if (a.class_id < 0) {
      throw ValidationError("line " + std::to_string(line_no) + ": negative class id");
    }
    if (!a.box.valid()) {
      throw ValidationError("line " + std::to_string(line_no) + ": degenerate box");
    }
    out.push_back(a);
  }
  return out;
}

std::vector<Annotation> parse_annotations(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_annotations_text(buf.str());
}

std::string format_annotations(const std::vector<Annotation>& annotations) {
  std::ostringstream out;
  for (const Annotation& a : annotations) {
    const Box& b = a.box;
    if (a.class_id < 0 || !b.valid()) throw ValidationError("invalid annotation");
    if (!integral(b.x_min) || !integral(b.y_min) || !integral(b.x_max) || !integral(b.y_max)) {
      throw ValidationError("annotation coordinates must be integers");
    }
    out << a.class_id << ' ' << static_cast<long long>(b.x_min) << ' '
        << static_cast<long long>(b.y_min) << ' ' << static_cast<long long>(b.x_max) << ' '
        << static_cast<long long>(b.y_max) << ' ' << (a.difficult ? 1 : 0) << '\n';
  }
  return out.str();
}

void write_annotations(const std::vector<Annotation>& annotations, const fs::path& path) {
  const std::string text = format_annotations(annotations);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// PNG

void write_png(const Image& image, const fs::path& path) {
  std::vector<png_byte> bytes(image.pixels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<png_byte>(std::lround(std::clamp(image.pixels[i], 0.0f, 1.0f) * 255.0f));
  }
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    throw IoError("cannot write png " + path.string() + ": " + png.message);
  }
}

Image read_png(const fs::path& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) {
    throw IoError("cannot read png " + path.string() + ": " + png.message);
  }
  png.format = PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, bytes.data(), 0, nullptr)) {
    throw IoError("cannot decode png " + path.string() + ": " + png.message);
  }
  Image image;
  image.width = static_cast<int>(png.width);
  image.height = static_cast<int>(png.height);
  image.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) image.pixels[i] = bytes[i] / 255.0f;
  return image;
}

// ---------------------------------------------------------------------------
// Dataset directories

void save_dataset(const DatasetIndex& dataset, const fs::path& root) {
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  fs::create_directories(root / "labels", ec);
  if (ec) throw IoError("cannot create dataset directory " + root.string());
  {
    std::ofstream classes(root / "classes.txt", std::ios::binary | std::ios::trunc);
    if (!classes) throw IoError("cannot write classes.txt");
    for (const std::string& name : dataset.class_names()) classes << name << '\n';
  }
  for (const ImageRecord& r : dataset.records()) {
    write_png(r.image, root / "images" / (r.image_id + ".png"));
    write_annotations(r.annotations, root / "labels" / (r.image_id + ".txt"));
  }
}

DatasetIndex load_dataset(const fs::path& root) {
  std::ifstream classes(root / "classes.txt");
  if (!classes) throw IoError("missing classes.txt in " + root.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(classes, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) names.push_back(line);
  }
  std::vector<fs::path> labels;
  for (const auto& entry : fs::directory_iterator(root / "labels")) {
    if (entry.path().extension() == ".txt") labels.push_back(entry.path());
  }
  std::sort(labels.begin(), labels.end());
  std::vector<ImageRecord> records;
  for (const fs::path& label : labels) {
    ImageRecord r;
    r.image_id = label.stem().string();
    r.annotations = parse_annotations(label);
    r.image = read_png(root / "images" / (r.image_id + ".png"));
    records.push_back(std::move(r));
  }
  return DatasetIndex(std::move(names), std::move(records));
}

std::string dataset_content_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) files.push_back(fs::relative(entry.path(), root));
  }
  std::sort(files.begin(), files.end());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  for (const fs::path& rel : files) {
    std::ifstream in(root / rel, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string header = rel.generic_string() + '\0' + std::to_string(bytes.size()) + '\0';
    EVP_DigestUpdate(ctx.get(), header.data(), header.size());
    EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size());
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

ImageSplit split_images(const DatasetIndex& dataset, double val_fraction, double eval_fraction) {
  if (val_fraction < 0 || eval_fraction <= 0 || val_fraction + eval_fraction >= 1.0) {
    throw ConfigError("invalid image split fractions");
  }
  const auto& records = dataset.records();
  const auto n = records.size();
  const auto n_eval = static_cast<std::size_t>(std::llround(eval_fraction * static_cast<double>(n)));
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
  ImageSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string& id = records[i].image_id;
    if (i >= n - n_eval) split.eval.push_back(id);
    else if (i >= n - n_eval - n_val) split.val.push_back(id);
    else split.train.push_back(id);
  }
  return split;
}

}  // namespace protodet
