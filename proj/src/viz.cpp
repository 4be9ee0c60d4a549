#include "protodet/viz.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace protodet {

namespace {

Eigen::MatrixXd to_matrix(const std::vector<Vector>& points) {
  if (points.empty()) throw ContractError("nothing to project");
  const auto n = static_cast<Eigen::Index>(points.size());
  const auto d = static_cast<Eigen::Index>(points.front().size());
  Eigen::MatrixXd m(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<Eigen::Index>(points[static_cast<std::size_t>(i)].size()) != d) {
      throw ShapeError("points differ in dimension");
    }
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = points[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  return m;
}

}  // namespace

std::vector<Point2> pca_project(const std::vector<Vector>& points) {
  Eigen::MatrixXd x = to_matrix(points);
  x.rowwise() -= x.colwise().mean();
  const Eigen::MatrixXd cov = x.transpose() * x / std::max<double>(1.0, static_cast<double>(x.rows() - 1));
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  const Eigen::Index d = cov.cols();
  Eigen::MatrixXd basis(d, 2);
  for (int c = 0; c < 2; ++c) {
    Eigen::VectorXd v = d - 1 - c >= 0 ? Eigen::VectorXd(solver.eigenvectors().col(d - 1 - c))
                                       : Eigen::VectorXd::Zero(d);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(c) = v;
  }
  const Eigen::MatrixXd y = x * basis;
  std::vector<Point2> out(static_cast<std::size_t>(y.rows()));
  for (Eigen::Index i = 0; i < y.rows(); ++i) out[static_cast<std::size_t>(i)] = {y(i, 0), y(i, 1)};
  return out;
}

std::vector<Point2> tsne_project(const std::vector<Vector>& points, const TsneSettings& s) {
  const Eigen::MatrixXd x = to_matrix(points);
  const Eigen::Index n = x.rows();
  if (n < 2) return std::vector<Point2>(static_cast<std::size_t>(n), Point2{0.0, 0.0});

  Eigen::MatrixXd d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) d2(i, j) = (x.row(i) - x.row(j)).squaredNorm();

  // Conditional affinities with a per-point bandwidth matching the perplexity.
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  const double target = std::log(std::min(s.perplexity, static_cast<double>(n - 1)));
  for (Eigen::Index i = 0; i < n; ++i) {
    double lo = 0.0, hi = std::numeric_limits<double>::infinity(), beta = 1.0;
    for (int it = 0; it < 64; ++it) {
      double sum = 0.0, weighted = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) {
        if (j == i) continue;
        const double w = std::exp(-beta * d2(i, j));
        sum += w;
        weighted += w * d2(i, j);
      }
      if (sum <= 0.0) {
        hi = beta;
        beta = (lo + hi) / 2.0;
        continue;
      }
      const double entropy = std::log(sum) + beta * weighted / sum;
      if (std::abs(entropy - target) < 1e-5) break;
      if (entropy > target) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : (lo + hi) / 2.0;
      } else {
        hi = beta;
        beta = (lo + hi) / 2.0;
      }
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j != i) sum += (p(i, j) = std::exp(-beta * d2(i, j)));
    }
    if (sum > 0.0) p.row(i) /= sum;
  }
  p = (p + p.transpose()) / (2.0 * static_cast<double>(n));
  p = p.cwiseMax(1e-12);

  Rng rng(s.seed);
  Eigen::MatrixXd y(n, 2), gains = Eigen::MatrixXd::Ones(n, 2), update = Eigen::MatrixXd::Zero(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) y(i, 0) = 1e-4 * rng.normal(), y(i, 1) = 1e-4 * rng.normal();
  Eigen::MatrixXd q(n, n), num(n, n), grad(n, 2);
  for (int it = 0; it < s.iterations; ++it) {
    const double exaggeration = it < 100 ? 4.0 : 1.0;
    const double momentum = it < 250 ? 0.5 : 0.8;
    double qsum = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        num(i, j) = i == j ? 0.0 : 1.0 / (1.0 + (y.row(i) - y.row(j)).squaredNorm());
        qsum += num(i, j);
      }
    }
    q = (num / qsum).cwiseMax(1e-12);
    grad.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < n; ++j) {
        const double coeff = 4.0 * (exaggeration * p(i, j) - q(i, j)) * num(i, j);
        grad.row(i) += coeff * (y.row(i) - y.row(j));
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int c = 0; c < 2; ++c) {
        const bool same = (grad(i, c) > 0) == (update(i, c) > 0);
        gains(i, c) = std::max(0.01, same ? gains(i, c) * 0.8 : gains(i, c) + 0.2);
        update(i, c) = momentum * update(i, c) - s.learning_rate * gains(i, c) * grad(i, c);
      }
    }
    y += update;
    y.rowwise() -= y.colwise().mean();
  }
  std::vector<Point2> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = {y(i, 0), y(i, 1)};
  return out;
}

Image render_scatter(const std::vector<Point2>& points, const std::vector<int>& labels, int size) {
  if (points.size() != labels.size()) throw ContractError("one label per point expected");
  if (size < 32) throw ContractError("plot too small");
  Image img;
  img.width = img.height = size;
  img.pixels.assign(static_cast<std::size_t>(size) * size * 3, 1.0f);
  if (points.empty()) return img;

  double x0 = points[0][0], x1 = x0, y0 = points[0][1], y1 = y0;
  for (const Point2& p : points) {
    x0 = std::min(x0, p[0]);
    x1 = std::max(x1, p[0]);
    y0 = std::min(y0, p[1]);
    y1 = std::max(y1, p[1]);
  }
  const double span = std::max({x1 - x0, y1 - y0, 1e-12});
  const int margin = size / 16;
  const double scale = (size - 2 * margin - 1) / span;

  auto color = [](int label) -> std::array<float, 3> {
    if (label < 0) return {0.0f, 0.0f, 0.0f};
    const double h = std::fmod(label * 0.618034, 1.0) * 6.0;
    const int sector = static_cast<int>(h);
    const auto f = static_cast<float>(h - sector);
    const float v = 0.9f, lo = 0.15f;
    switch (sector % 6) {
      case 0: return {v, lo + (v - lo) * f, lo};
      case 1: return {v - (v - lo) * f, v, lo};
      case 2: return {lo, v, lo + (v - lo) * f};
      case 3: return {lo, v - (v - lo) * f, v};
      case 4: return {lo + (v - lo) * f, lo, v};
      default: return {v, lo, v - (v - lo) * f};
    }
  };

  // Negatives first so that class dots stay visible on top.
  std::vector<std::size_t> order(points.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return labels[i] < 0; });
  for (std::size_t i : order) {
    const int cx = margin + static_cast<int>(std::lround((points[i][0] - x0) * scale));
    const int cy = size - 1 - margin - static_cast<int>(std::lround((points[i][1] - y0) * scale));
    const auto rgb = color(labels[i]);
    for (int dy = -2; dy <= 2; ++dy) {
      for (int dx = -2; dx <= 2; ++dx) {
        if (dx * dx + dy * dy > 5) continue;
        const int px = cx + dx, py = cy + dy;
        if (px < 0 || py < 0 || px >= size || py >= size) continue;
        for (int c = 0; c < 3; ++c) img.at(py, px, c) = rgb[static_cast<std::size_t>(c)];
      }
    }
  }
  return img;
}

}  // namespace protodet
