#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace protodet {

/// Axis-aligned box in continuous pixel coordinates.
struct Box {
  double x_min = 0.0;
  double y_min = 0.0;
  double x_max = 0.0;
  double y_max = 0.0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x_min + x_max); }
  double center_y() const { return 0.5 * (y_min + y_max); }
  bool valid() const { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const Box&, const Box&) = default;
};

struct ImageBounds {
  double width = 0.0;
  double height = 0.0;
};

Box clip_box(const Box& box, const ImageBounds& bounds);

/// Intersection over union; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

// ---------------------------------------------------------------------------
// Anchors

struct LevelRecipe {
  int stride = 8;
  std::vector<double> sizes;
  std::vector<double> ratios;  // width / height

  std::size_t anchors_per_cell() const { return sizes.size() * ratios.size(); }
};

struct AnchorRecipe {
  std::vector<LevelRecipe> levels;
};

struct FeatureShape {
  int height = 0;
  int width = 0;
};

/// Anchors for every pyramid level, flattened level-major then row, column
/// and finally size/ratio within a cell.
struct AnchorGrid {
  std::vector<std::vector<Box>> anchors;
  std::vector<int> level_strides;
  std::vector<FeatureShape> shapes;
  AnchorRecipe recipe;

  std::size_t total() const;
  std::size_t level_offset(std::size_t level) const;
  /// Level owning a flat anchor index.
  std::size_t level_of(std::size_t flat_index) const;
  std::vector<Box> flat() const;
};

AnchorGrid generate_anchors(std::span<const FeatureShape> feature_shapes,
                            const AnchorRecipe& recipe);

/// Width and height of an anchor with the given area and width/height ratio.
std::pair<double, double> anchor_extent(double area, double ratio);

// ---------------------------------------------------------------------------
// Box coding

struct BoxDeltas {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  double operator[](std::size_t i) const;
  friend bool operator==(const BoxDeltas&, const BoxDeltas&) = default;
};

BoxDeltas encode_deltas(const Box& anchor, const Box& target);

/// Inverse of encode_deltas. Throws NumericError on non-finite deltas.
Box decode_deltas(const Box& anchor, const BoxDeltas& deltas,
                  std::optional<ImageBounds> clip = std::nullopt);

// ---------------------------------------------------------------------------
// Matching

enum class MatchLabel { positive, negative, hard_negative, ignore };

struct MatchThresholds {
  double positive = 0.7;
  double negative = 0.3;
  /// Forces each ground truth's highest-IoU anchor(s) to positive.
  bool force_best = true;
};

struct MatchResult {
  std::vector<MatchLabel> labels;
  /// Index into the episode ground truth for positives, into the hard ground
  /// truth for hard negatives, -1 otherwise.
  std::vector<int> matched_gt;
  /// Highest IoU against any box (episode or hard).
  std::vector<double> max_iou;

  std::size_t count(MatchLabel label) const;
};

MatchResult match_boxes(std::span<const Box> anchors, std::span<const Box> gt,
                        std::span<const Box> hard_gt,
                        const MatchThresholds& thresholds = {});

// ---------------------------------------------------------------------------
// Losses and post-processing

constexpr double kSmoothL1Beta = 1.0;

double smooth_l1(double x, double beta = kSmoothL1Beta);
double smooth_l1_grad(double x, double beta = kSmoothL1Beta);

struct ScoredBox {
  Box box;
  double score = 0.0;
};

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep input order.
std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold);

}  // namespace protodet
