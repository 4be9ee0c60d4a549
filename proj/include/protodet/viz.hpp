#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "protodet/dataio.hpp"
#include "protodet/protospace.hpp"

namespace protodet {

using Point2 = std::array<double, 2>;

/// Projection onto the two leading principal components. Component signs
/// are fixed so that the largest-magnitude loading is positive.
std::vector<Point2> pca_project(const std::vector<Vector>& points);

struct TsneSettings {
  double perplexity = 30.0;
  int iterations = 500;
  double learning_rate = 100.0;
  std::uint64_t seed = 0;
};

/// Exact t-SNE (quadratic in the number of points).
std::vector<Point2> tsne_project(const std::vector<Vector>& points, const TsneSettings& settings = {});

/// Scatter plot: one colored dot per point, label < 0 drawn in black.
Image render_scatter(const std::vector<Point2>& points, const std::vector<int>& labels, int size = 512);

}  // namespace protodet
