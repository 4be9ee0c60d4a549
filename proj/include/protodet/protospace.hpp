#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace protodet {

using Vector = std::vector<double>;

constexpr double kDefaultSigma = 0.5;
constexpr double kDefaultAlpha = 0.1;
constexpr int kDefaultEmbeddingDim = 128;

/// Unit-norm vector in the shared representation space.
class Embedding {
 public:
  Embedding() = default;
  /// Throws NumericError unless ||values|| is 1 within 1e-6.
  explicit Embedding(Vector values);

  const Vector& values() const { return values_; }
  std::size_t dim() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  operator std::span<const double>() const { return values_; }

  friend bool operator==(const Embedding&, const Embedding&) = default;

 private:
  Vector values_;
};

double norm(std::span<const double> v);
double squared_distance(std::span<const double> a, std::span<const double> b);

/// v / ||v||. Throws NumericError for a zero or non-finite vector.
Embedding normalize(std::span<const double> v);

/// Gradient with respect to the raw vector x of a loss given its gradient
/// with respect to y = x / ||x||.
Vector normalize_backward(std::span<const double> y, double raw_norm,
                          std::span<const double> grad_y);

struct Prototype {
  int class_id = 0;
  Embedding vector;
  /// Moving-average state; none until the first moving-average update.
  std::optional<Embedding> ema_state;
};

/// Normalized mean of the shots.
Prototype compute_prototype(int class_id, const std::vector<Embedding>& shots);

/// normalize(alpha * fresh + (1 - alpha) * previous); initializes to `fresh`
/// when the entry has no moving-average state yet.
Prototype update_moving_average(const Prototype& bank_entry, const Prototype& fresh, double alpha);

struct PrototypeBank {
  std::map<int, Prototype> rpn;
  std::map<int, Prototype> head;
  double sigma = kDefaultSigma;
  double alpha = kDefaultAlpha;

  std::vector<int> classes() const;
  bool empty() const { return head.empty(); }
  std::size_t dim() const;
  /// Throws ContractError when the two maps disagree on keys or dimension.
  void validate() const;
  void erase(int class_id);
};

void write_bank(std::ostream& out, const PrototypeBank& bank);
PrototypeBank read_bank(std::istream& in);

// ---------------------------------------------------------------------------
// Scoring

/// exp(-||z - p||^2 / (2 sigma^2)).
double gaussian_likelihood(std::span<const double> z, std::span<const double> p, double sigma);
inline double gaussian_likelihood(const Embedding& z, const Prototype& p, double sigma) {
  return gaussian_likelihood(z.values(), p.vector.values(), sigma);
}

/// Accumulates scale * dL/dz into grad_z and scale * dL/dp into grad_p (either
/// may be empty).
void gaussian_likelihood_grad(std::span<const double> z, std::span<const double> p, double sigma,
                              double scale, std::span<double> grad_z, std::span<double> grad_p);

using ClassLikelihoods = std::map<int, double>;

/// 1 - max_c likelihood.
double background_likelihood(const ClassLikelihoods& likelihoods);
/// max_c likelihood.
double objectness_score(const ClassLikelihoods& likelihoods);

struct ClassPosterior {
  std::map<int, double> classes;
  double background = 0.0;

  double sum() const;
  /// Argmax over classes and background; -1 stands for background.
  int argmax() const;
};

ClassPosterior class_posterior(const ClassLikelihoods& likelihoods);

/// Likelihood of z under every prototype of `prototypes`.
ClassLikelihoods likelihoods_for(std::span<const double> z,
                                 const std::map<int, Prototype>& prototypes, double sigma);

constexpr int kBackgroundLabel = -1;

/// Negative log posterior of `label` (a class id or kBackgroundLabel) for the
/// embedding z, with gradients with respect to z and to each prototype.
/// The posterior is clamped at `eps` before the log.
struct HeadClassLoss {
  double loss = 0.0;
  Vector grad_z;
  std::map<int, Vector> grad_prototypes;
};

HeadClassLoss head_class_loss(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                              double sigma, int label, double eps = 1e-8);

/// Gradient of posterior(label | z) with respect to z.
Vector class_posterior_grad(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                            double sigma, int label);

// ---------------------------------------------------------------------------
// Background clustering

struct PseudoLabeling {
  std::vector<int> assignments;
  std::vector<Vector> centers;
  int k = 0;
  double inertia = 0.0;
  /// Inertia after every Lloyd iteration and refinement move of the kept run.
  std::vector<double> inertia_history;
};

/// Lloyd's algorithm followed by single-point refinement moves. Seeds are
/// one k-means++ draw, or every k-subset of the points when there are at most
/// 128 of them; the lowest-inertia run is kept. Throws ClusteringError when
/// there are fewer points than clusters.
PseudoLabeling cluster_negatives(const std::vector<Embedding>& negatives, int k, int max_iters,
                                 std::uint64_t seed);
PseudoLabeling cluster_points(const std::vector<Vector>& points, int k, int max_iters,
                              std::uint64_t seed);

using Triplet = std::array<std::size_t, 3>;  // anchor, positive, negative

/// Up to `per_anchor` triplets per anchor whose cluster has another member,
/// positive drawn from the same cluster and negative from any other.
std::vector<Triplet> mine_triplets(const PseudoLabeling& labeling, std::size_t num_points,
                                   int per_anchor, std::uint64_t seed);

constexpr double kDefaultTripletMargin = 0.2;

/// max(0, ||a - p||^2 - ||a - n||^2 + margin).
double triplet_loss(std::span<const double> a, std::span<const double> p,
                    std::span<const double> n, double margin);

struct TripletGrad {
  Vector anchor, positive, negative;
};
TripletGrad triplet_loss_grad(std::span<const double> a, std::span<const double> p,
                              std::span<const double> n, double margin);

}  // namespace protodet
