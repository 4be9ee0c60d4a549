#include "protodet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "protodet/errors.hpp"

namespace protodet {

Box clip_box(const Box& box, const ImageBounds& bounds) {
  return Box{std::clamp(box.x_min, 0.0, bounds.width), std::clamp(box.y_min, 0.0, bounds.height),
             std::clamp(box.x_max, 0.0, bounds.width), std::clamp(box.y_max, 0.0, bounds.height)};
}

double iou(const Box& a, const Box& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return 0.0;
  return std::clamp(inter / uni, 0.0, 1.0);
}

// ---------------------------------------------------------------------------

std::size_t AnchorGrid::total() const {
  std::size_t n = 0;
  for (const auto& level : anchors) n += level.size();
  return n;
}

std::size_t AnchorGrid::level_offset(std::size_t level) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < level; ++l) n += anchors[l].size();
  return n;
}

std::size_t AnchorGrid::level_of(std::size_t flat_index) const {
  for (std::size_t l = 0; l < anchors.size(); ++l) {
    if (flat_index < anchors[l].size()) return l;
    flat_index -= anchors[l].size();
  }
  throw ContractError("anchor index out of range");
}

std::vector<Box> AnchorGrid::flat() const {
  std::vector<Box> out;
  out.reserve(total());
  for (const auto& level : anchors) out.insert(out.end(), level.begin(), level.end());
  return out;
}

std::pair<double, double> anchor_extent(double area, double ratio) {
  return {std::sqrt(area * ratio), std::sqrt(area / ratio)};
}

AnchorGrid generate_anchors(std::span<const FeatureShape> feature_shapes,
                            const AnchorRecipe& recipe) {
  if (feature_shapes.size() != recipe.levels.size()) {
    throw ShapeError("anchor recipe has " + std::to_string(recipe.levels.size()) +
                     " levels but " + std::to_string(feature_shapes.size()) +
                     " feature shapes were given");
  }
  AnchorGrid grid;
  grid.recipe = recipe;
  for (std::size_t l = 0; l < recipe.levels.size(); ++l) {
    const LevelRecipe& level = recipe.levels[l];
    const FeatureShape shape = feature_shapes[l];
    std::vector<Box> boxes;
    boxes.reserve(static_cast<std::size_t>(shape.height * shape.width) * level.anchors_per_cell());
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double cx = (x + 0.5) * level.stride;
        const double cy = (y + 0.5) * level.stride;
        for (double size : level.sizes) {
          for (double ratio : level.ratios) {
            const auto [w, h] = anchor_extent(size * size, ratio);
            boxes.push_back(Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
          }
        }
      }
    }
    grid.anchors.push_back(std::move(boxes));
    grid.level_strides.push_back(level.stride);
    grid.shapes.push_back(shape);
  }
  return grid;
}

// ---------------------------------------------------------------------------

double BoxDeltas::operator[](std::size_t i) const {
  switch (i) {
    case 0: return dx;
    case 1: return dy;
    case 2: return dw;
    case 3: return dh;
    default: throw ContractError("delta index out of range");
  }
}

BoxDeltas encode_deltas(const Box& anchor, const Box& target) {
  const double wa = anchor.width(), ha = anchor.height();
  return BoxDeltas{(target.center_x() - anchor.center_x()) / wa,
                   (target.center_y() - anchor.center_y()) / ha,
                   std::log(target.width() / wa), std::log(target.height() / ha)};
}

Box decode_deltas(const Box& anchor, const BoxDeltas& d, std::optional<ImageBounds> clip) {
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) ||
      !std::isfinite(d.dh)) {
    throw NumericError("non-finite box deltas");
  }
  const double wa = anchor.width(), ha = anchor.height();
  const double cx = anchor.center_x() + d.dx * wa;
  const double cy = anchor.center_y() + d.dy * ha;
  const double w = wa * std::exp(d.dw);
  const double h = ha * std::exp(d.dh);
  Box out{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  if (clip) out = clip_box(out, *clip);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t MatchResult::count(MatchLabel label) const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), label));
}

MatchResult match_boxes(std::span<const Box> anchors, std::span<const Box> gt,
                        std::span<const Box> hard_gt, const MatchThresholds& thresholds) {
  if (thresholds.negative > thresholds.positive) {
    throw ContractError("negative threshold exceeds positive threshold");
  }
  const std::size_t n = anchors.size();
  MatchResult result;
  result.labels.assign(n, MatchLabel::ignore);
  result.matched_gt.assign(n, -1);
  result.max_iou.assign(n, 0.0);

  std::vector<double> best_for_gt(gt.size(), 0.0);
  std::vector<double> best_gt_iou(n, 0.0);
  std::vector<int> best_gt(n, -1);
  std::vector<double> best_hard_iou(n, 0.0);
  std::vector<int> best_hard(n, -1);

  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      const double v = iou(anchors[a], gt[g]);
      if (v > best_gt_iou[a]) {
        best_gt_iou[a] = v;
        best_gt[a] = static_cast<int>(g);
      }
      best_for_gt[g] = std::max(best_for_gt[g], v);
    }
    for (std::size_t h = 0; h < hard_gt.size(); ++h) {
      const double v = iou(anchors[a], hard_gt[h]);
      if (v > best_hard_iou[a]) {
        best_hard_iou[a] = v;
        best_hard[a] = static_cast<int>(h);
      }
    }
    result.max_iou[a] = std::max(best_gt_iou[a], best_hard_iou[a]);
  }

  for (std::size_t a = 0; a < n; ++a) {
    if (best_gt[a] >= 0 && best_gt_iou[a] >= thresholds.positive) {
      result.labels[a] = MatchLabel::positive;
      result.matched_gt[a] = best_gt[a];
    } else if (best_hard[a] >= 0 && best_hard_iou[a] >= thresholds.positive) {
      result.labels[a] = MatchLabel::hard_negative;
      result.matched_gt[a] = best_hard[a];
    } else if (result.max_iou[a] < thresholds.negative) {
      result.labels[a] = MatchLabel::negative;
    }
  }

  if (thresholds.force_best) {
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (best_for_gt[g] <= 0.0) continue;
      for (std::size_t a = 0; a < n; ++a) {
        if (iou(anchors[a], gt[g]) == best_for_gt[g]) {
          // An anchor that is best for several boxes keeps the first one unless
          // it already crossed the threshold for its own best box.
          if (result.labels[a] != MatchLabel::positive) {
            result.labels[a] = MatchLabel::positive;
            result.matched_gt[a] = static_cast<int>(g);
          }
        }
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

double smooth_l1(double x, double beta) {
  const double ax = std::abs(x);
  return ax < beta ? 0.5 * x * x / beta : ax - 0.5 * beta;
}

double smooth_l1_grad(double x, double beta) {
  if (std::abs(x) < beta) return x / beta;
  return x > 0.0 ? 1.0 : -1.0;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<std::size_t> kept;
  std::vector<char> suppressed(boxes.size(), 0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t idx = order[i];
    if (suppressed[idx]) continue;
    kept.push_back(idx);
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const std::size_t other = order[j];
      if (!suppressed[other] && iou(boxes[idx].box, boxes[other].box) > iou_threshold) {
        suppressed[other] = 1;
      }
    }
  }
  return kept;
}

}  // namespace protodet
