#pragma once

// Minimal CNN building blocks with explicit backward passes. Forward calls
// return a tape object owned by the caller; backward consumes it. This lets
// one set of weights run forward on many images before a single backward.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace protodet::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<Matrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const Matrix<T>>;
/// Storage aligned to the widest vector width, so Eigen picks the same
/// reduction order on every allocation.
template <typename T>
using Buffer = std::vector<T, Eigen::aligned_allocator<T>>;

/// Channel-major feature map (C, H, W).
template <typename T>
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  Buffer<T> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, T(0)) {}

  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  T& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  T at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  MatrixMap<T> as_matrix() { return MatrixMap<T>(data.data(), channels, height * width); }
  ConstMatrixMap<T> as_matrix() const { return ConstMatrixMap<T>(data.data(), channels, height * width); }
};

template <typename T>
struct Parameter {
  std::string name;
  Buffer<T> value;
  Buffer<T> grad;
  Buffer<T> adam_m;
  Buffer<T> adam_v;

  void resize(std::size_t n) {
    value.assign(n, T(0));
    grad.assign(n, T(0));
    adam_m.assign(n, T(0));
    adam_v.assign(n, T(0));
  }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

template <typename T>
void normal_init(Parameter<T>& p, double std_dev, Rng& rng) {
  for (T& v : p.value) v = static_cast<T>(rng.normal() * std_dev);
}

template <typename T>
void he_init(Parameter<T>& p, int fan_in, Rng& rng) {
  normal_init(p, std::sqrt(2.0 / fan_in), rng);
}

// ---------------------------------------------------------------------------

template <typename T>
class Conv2d {
 public:
  struct Tape {
    Matrix<T> columns;  // (in * k * k, out_h * out_w)
    int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  };

  Conv2d() = default;
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride, int padding)
      : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(padding) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.resize(static_cast<std::size_t>(out_) * in_ * k_ * k_);
    bias_.resize(static_cast<std::size_t>(out_));
  }

  void init(Rng& rng) { he_init(weight_, in_ * k_ * k_, rng); }
  void init_normal(Rng& rng, double std_dev) { normal_init(weight_, std_dev, rng); }

  int out_size(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }
  int out_channels() const { return out_; }

  Tensor3<T> forward(const Tensor3<T>& x, Tape* tape) const {
    if (x.channels != in_) throw ShapeError(weight_.name + ": channel mismatch");
    Tape local;
    Tape& t = tape ? *tape : local;
    t.in_h = x.height;
    t.in_w = x.width;
    t.out_h = out_size(x.height);
    t.out_w = out_size(x.width);
    im2col(x, t);
    Tensor3<T> y(out_, t.out_h, t.out_w);
    auto w = ConstMatrixMap<T>(weight_.value.data(), out_, in_ * k_ * k_);
    auto ym = y.as_matrix();
    ym.noalias() = w * t.columns;
    for (int o = 0; o < out_; ++o) ym.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx when `want_input_grad`.
  Tensor3<T> backward(const Tape& t, const Tensor3<T>& dy, bool want_input_grad) {
    auto dym = dy.as_matrix();
    auto dw = MatrixMap<T>(weight_.grad.data(), out_, in_ * k_ * k_);
    dw.noalias() += dym * t.columns.transpose();
    for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += dym.row(o).sum();
    if (!want_input_grad) return {};
    auto w = ConstMatrixMap<T>(weight_.value.data(), out_, in_ * k_ * k_);
    Matrix<T> dcol = w.transpose() * dym;
    Tensor3<T> dx(in_, t.in_h, t.in_w);
    col2im(dcol, t, dx);
    return dx;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight_, &bias_}; }

 private:
  void im2col(const Tensor3<T>& x, Tape& t) const {
    const int cols = t.out_h * t.out_w;
    t.columns.resize(in_ * k_ * k_, cols);
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          T* row = t.columns.row((c * k_ + ky) * k_ + kx).data();
          for (int oy = 0; oy < t.out_h; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            for (int ox = 0; ox < t.out_w; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              row[oy * t.out_w + ox] =
                  (iy >= 0 && iy < x.height && ix >= 0 && ix < x.width) ? x.at(c, iy, ix) : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const Matrix<T>& dcol, const Tape& t, Tensor3<T>& dx) const {
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < k_; ++ky) {
        for (int kx = 0; kx < k_; ++kx) {
          const T* row = dcol.row((c * k_ + ky) * k_ + kx).data();
          for (int oy = 0; oy < t.out_h; ++oy) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= t.in_h) continue;
            for (int ox = 0; ox < t.out_w; ++ox) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= t.in_w) continue;
              dx.at(c, iy, ix) += row[oy * t.out_w + ox];
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

// ---------------------------------------------------------------------------

/// Fully connected layer over a row-major batch (N, in).
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in_features, int out_features) : in_(in_features), out_(out_features) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.resize(static_cast<std::size_t>(in_) * out_);
    bias_.resize(static_cast<std::size_t>(out_));
  }

  void init(Rng& rng) { he_init(weight_, in_, rng); }
  void init_normal(Rng& rng, double std_dev) { normal_init(weight_, std_dev, rng); }
  int in_features() const { return in_; }
  int out_features() const { return out_; }

  Matrix<T> forward(const Matrix<T>& x) const {
    if (x.cols() != in_) throw ShapeError(weight_.name + ": feature mismatch");
    auto w = ConstMatrixMap<T>(weight_.value.data(), out_, in_);
    Matrix<T> y(x.rows(), out_);
    y.noalias() = x * w.transpose();
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.value.data(), out_);
    return y;
  }

  Matrix<T> backward(const Matrix<T>& x, const Matrix<T>& dy, bool want_input_grad) {
    auto dw = MatrixMap<T>(weight_.grad.data(), out_, in_);
    dw.noalias() += dy.transpose() * x;
    auto db = Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias_.grad.data(), out_);
    db += dy.colwise().sum();
    if (!want_input_grad) return {};
    auto w = ConstMatrixMap<T>(weight_.value.data(), out_, in_);
    return dy * w;
  }

  std::vector<Parameter<T>*> parameters() { return {&weight_, &bias_}; }

 private:
  int in_ = 0, out_ = 0;
  Parameter<T> weight_;
  Parameter<T> bias_;
};

template <typename T>
void relu_inplace(Buffer<T>& v) {
  for (T& x : v) x = std::max(x, T(0));
}

template <typename T>
void relu_inplace(Matrix<T>& m) {
  m = m.cwiseMax(T(0));
}

/// Masks a gradient by the positivity of the ReLU output.
template <typename T>
void relu_backward(const Buffer<T>& out, Buffer<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!(out[i] > T(0))) grad[i] = T(0);
  }
}

template <typename T>
void relu_backward(const Matrix<T>& out, Matrix<T>& grad) {
  grad = (out.array() > T(0)).select(grad, T(0));
}

/// Nearest-neighbour 2x upsampling.
template <typename T>
Tensor3<T> upsample2x(const Tensor3<T>& x) {
  Tensor3<T> y(x.channels, x.height * 2, x.width * 2);
  for (int c = 0; c < x.channels; ++c)
    for (int yy = 0; yy < y.height; ++yy)
      for (int xx = 0; xx < y.width; ++xx) y.at(c, yy, xx) = x.at(c, yy / 2, xx / 2);
  return y;
}

template <typename T>
Tensor3<T> upsample2x_backward(const Tensor3<T>& dy) {
  Tensor3<T> dx(dy.channels, dy.height / 2, dy.width / 2);
  for (int c = 0; c < dy.channels; ++c)
    for (int yy = 0; yy < dy.height; ++yy)
      for (int xx = 0; xx < dy.width; ++xx) dx.at(c, yy / 2, xx / 2) += dy.at(c, yy, xx);
  return dx;
}

// ---------------------------------------------------------------------------

/// Region of interest in image pixels, pooled from a map with the given stride.
struct RoI {
  double x_min, y_min, x_max, y_max;
};

/// Bilinear region pooling ("aligned" pixel model). Each output bin averages
/// sampling_ratio^2 bilinear samples. Output rows are laid out (C, P, P).
template <typename T>
class RoIAlign {
 public:
  RoIAlign(int pooled, int sampling_ratio = 2) : pooled_(pooled), ratio_(sampling_ratio) {}

  int pooled() const { return pooled_; }
  int output_features(int channels) const { return channels * pooled_ * pooled_; }

  Matrix<T> forward(const Tensor3<T>& features, std::span<const RoI> rois, double stride) const {
    Matrix<T> out(static_cast<Eigen::Index>(rois.size()), output_features(features.channels));
    out.setZero();
    for (std::size_t r = 0; r < rois.size(); ++r) {
      T* row = out.row(static_cast<Eigen::Index>(r)).data();
      visit(features, rois[r], stride, [&](int bin, std::size_t offset, T weight) {
        for (int c = 0; c < features.channels; ++c) {
          row[c * pooled_ * pooled_ + bin] += weight * features.data[c * features.plane() + offset];
        }
      });
    }
    return out;
  }

  /// Scatters dL/d(output) back into `grad_features`.
  void backward(const Matrix<T>& dy, std::span<const RoI> rois, double stride,
                Tensor3<T>& grad_features) const {
    for (std::size_t r = 0; r < rois.size(); ++r) {
      const T* row = dy.row(static_cast<Eigen::Index>(r)).data();
      visit(grad_features, rois[r], stride, [&](int bin, std::size_t offset, T weight) {
        for (int c = 0; c < grad_features.channels; ++c) {
          grad_features.data[c * grad_features.plane() + offset] += weight * row[c * pooled_ * pooled_ + bin];
        }
      });
    }
  }

 private:
  // Calls fn(bin, spatial_offset, weight) for every bilinear tap of the RoI.
  template <typename Fn>
  void visit(const Tensor3<T>& map, const RoI& roi, double stride, Fn&& fn) const {
    const double scale = 1.0 / stride;
    const double x0 = roi.x_min * scale - 0.5;
    const double y0 = roi.y_min * scale - 0.5;
    const double bin_w = (roi.x_max - roi.x_min) * scale / pooled_;
    const double bin_h = (roi.y_max - roi.y_min) * scale / pooled_;
    const T norm = static_cast<T>(1.0 / (ratio_ * ratio_));
    for (int py = 0; py < pooled_; ++py) {
      for (int px = 0; px < pooled_; ++px) {
        const int bin = py * pooled_ + px;
        for (int sy = 0; sy < ratio_; ++sy) {
          double y = y0 + py * bin_h + (sy + 0.5) * bin_h / ratio_;
          for (int sx = 0; sx < ratio_; ++sx) {
            double x = x0 + px * bin_w + (sx + 0.5) * bin_w / ratio_;
            if (y < -1.0 || y > map.height || x < -1.0 || x > map.width) continue;
            double yy = std::max(y, 0.0), xx = std::max(x, 0.0);
            int ylo = static_cast<int>(yy), xlo = static_cast<int>(xx);
            int yhi, xhi;
            if (ylo >= map.height - 1) {
              ylo = yhi = map.height - 1;
              yy = ylo;
            } else {
              yhi = ylo + 1;
            }
            if (xlo >= map.width - 1) {
              xlo = xhi = map.width - 1;
              xx = xlo;
            } else {
              xhi = xlo + 1;
            }
            const double ly = yy - ylo, lx = xx - xlo;
            const double hy = 1.0 - ly, hx = 1.0 - lx;
            const auto w = static_cast<std::size_t>(map.width);
            fn(bin, ylo * w + xlo, static_cast<T>(hy * hx) * norm);
            fn(bin, ylo * w + xhi, static_cast<T>(hy * lx) * norm);
            fn(bin, yhi * w + xlo, static_cast<T>(ly * hx) * norm);
            fn(bin, yhi * w + xhi, static_cast<T>(ly * lx) * norm);
          }
        }
      }
    }
  }

  int pooled_;
  int ratio_;
};

// ---------------------------------------------------------------------------

struct AdamSettings {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename T>
class Adam {
 public:
  explicit Adam(AdamSettings settings = {}) : s_(settings) {}

  void step(const std::vector<Parameter<T>*>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(s_.beta1, t_);
    const double c2 = 1.0 - std::pow(s_.beta2, t_);
    for (Parameter<T>* p : params) {
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        const double m = s_.beta1 * p->adam_m[i] + (1.0 - s_.beta1) * g;
        const double v = s_.beta2 * p->adam_v[i] + (1.0 - s_.beta2) * g * g;
        p->adam_m[i] = static_cast<T>(m);
        p->adam_v[i] = static_cast<T>(v);
        p->value[i] -= static_cast<T>(s_.learning_rate * (m / c1) / (std::sqrt(v / c2) + s_.epsilon));
      }
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  AdamSettings& settings() { return s_; }

 private:
  AdamSettings s_;
  long t_ = 0;
};

}  // namespace protodet::nn
