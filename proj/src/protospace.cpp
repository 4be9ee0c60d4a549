#include "protodet/protospace.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace protodet {

Embedding::Embedding(Vector values) : values_(std::move(values)) {
  const double n = norm(values_);
  if (!(std::abs(n - 1.0) <= 1e-6)) {
    throw NumericError("embedding is not unit norm (norm " + std::to_string(n) + ")");
  }
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ContractError("dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Embedding normalize(std::span<const double> v) {
  const double n = norm(v);
  if (!(n > 0.0) || !std::isfinite(n)) throw NumericError("cannot normalize a zero vector");
  Vector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return Embedding(std::move(out));
}

Vector normalize_backward(std::span<const double> y, double raw_norm, std::span<const double> grad_y) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * grad_y[i];
  Vector out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = (grad_y[i] - y[i] * dot) / raw_norm;
  return out;
}

Prototype compute_prototype(int class_id, const std::vector<Embedding>& shots) {
  if (shots.empty()) throw ContractError("prototype needs at least one shot");
  Vector mean(shots.front().dim(), 0.0);
  for (const Embedding& e : shots) {
    if (e.dim() != mean.size()) throw ContractError("shot dimension mismatch");
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += e[i];
  }
  for (double& x : mean) x /= static_cast<double>(shots.size());
  if (norm(mean) < 1e-12) throw NumericError("prototype mean is the zero vector");
  return Prototype{class_id, normalize(mean), std::nullopt};
}

Prototype update_moving_average(const Prototype& bank_entry, const Prototype& fresh, double alpha) {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("alpha must be in (0, 1]");
  if (!bank_entry.ema_state) {
    return Prototype{fresh.class_id, fresh.vector, fresh.vector};
  }
  const Embedding& prev = *bank_entry.ema_state;
  Vector blend(prev.dim());
  for (std::size_t i = 0; i < blend.size(); ++i) {
    blend[i] = alpha * fresh.vector[i] + (1.0 - alpha) * prev[i];
  }
  if (norm(blend) < 1e-12) throw NumericError("moving average collapsed to zero");
  Embedding next = normalize(blend);
  return Prototype{fresh.class_id, next, next};
}

// ---------------------------------------------------------------------------

std::vector<int> PrototypeBank::classes() const {
  std::vector<int> out;
  for (const auto& [c, _] : head) out.push_back(c);
  return out;
}

std::size_t PrototypeBank::dim() const {
  return head.empty() ? 0 : head.begin()->second.vector.dim();
}

void PrototypeBank::validate() const {
  if (rpn.size() != head.size()) throw ContractError("prototype maps differ in size");
  const std::size_t d = dim();
  for (auto it = rpn.begin(), jt = head.begin(); it != rpn.end(); ++it, ++jt) {
    if (it->first != jt->first) throw ContractError("prototype maps differ in classes");
    if (it->second.vector.dim() != d || jt->second.vector.dim() != d) {
      throw ContractError("prototype dimension mismatch");
    }
  }
  if (!(sigma > 0.0)) throw ContractError("sigma must be positive");
}

void PrototypeBank::erase(int class_id) {
  rpn.erase(class_id);
  head.erase(class_id);
}

void write_bank(std::ostream& out, const PrototypeBank& bank) {
  bank.validate();
  out << "protobank 1\n";
  out << "dim " << bank.dim() << " classes " << bank.head.size() << '\n';
  out.precision(17);
  out << "sigma " << bank.sigma << " alpha " << bank.alpha << '\n';
  auto dump = [&](const char* stage, const std::map<int, Prototype>& protos) {
    for (const auto& [c, p] : protos) {
      out << stage << ' ' << c << ' ' << (p.ema_state ? 1 : 0);
      for (double v : p.vector.values()) out << ' ' << v;
      out << '\n';
      if (p.ema_state) {
        out << "ema";
        for (double v : p.ema_state->values()) out << ' ' << v;
        out << '\n';
      }
    }
  };
  dump("rpn", bank.rpn);
  dump("head", bank.head);
}

PrototypeBank read_bank(std::istream& in) {
  std::string tag;
  int version = 0;
  if (!(in >> tag >> version) || tag != "protobank" || version != 1) {
    throw ParseError("not a prototype bank dump", 1);
  }
  std::size_t dim = 0, count = 0;
  std::string k1, k2, k3, k4;
  PrototypeBank bank;
  if (!(in >> k1 >> dim >> k2 >> count) || k1 != "dim" || k2 != "classes") {
    throw ParseError("bad bank header", 2);
  }
  if (!(in >> k3 >> bank.sigma >> k4 >> bank.alpha) || k3 != "sigma" || k4 != "alpha") {
    throw ParseError("bad bank header", 3);
  }
  auto read_vector = [&](std::size_t line) {
    Vector v(dim);
    for (double& x : v) {
      if (!(in >> x)) throw ParseError("truncated prototype", line);
    }
    return Embedding(std::move(v));
  };
  for (std::size_t i = 0; i < 2 * count; ++i) {
    std::string stage;
    int c = 0, has_ema = 0;
    if (!(in >> stage >> c >> has_ema)) throw ParseError("truncated bank", 4 + i);
    Prototype p{c, read_vector(4 + i), std::nullopt};
    if (has_ema) {
      std::string ema;
      if (!(in >> ema) || ema != "ema") throw ParseError("missing ema line", 4 + i);
      p.ema_state = read_vector(4 + i);
    }
    if (stage == "rpn") bank.rpn.emplace(c, std::move(p));
    else if (stage == "head") bank.head.emplace(c, std::move(p));
    else throw ParseError("unknown stage '" + stage + "'", 4 + i);
  }
  bank.validate();
  return bank;
}

// ---------------------------------------------------------------------------

double gaussian_likelihood(std::span<const double> z, std::span<const double> p, double sigma) {
  if (!(sigma > 0.0)) throw ContractError("sigma must be positive");
  return std::exp(-squared_distance(z, p) / (2.0 * sigma * sigma));
}

void gaussian_likelihood_grad(std::span<const double> z, std::span<const double> p, double sigma,
                              double scale, std::span<double> grad_z, std::span<double> grad_p) {
  const double l = gaussian_likelihood(z, p, sigma);
  const double f = scale * l / (sigma * sigma);
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double d = z[i] - p[i];
    if (!grad_z.empty()) grad_z[i] -= f * d;
    if (!grad_p.empty()) grad_p[i] += f * d;
  }
}

double background_likelihood(const ClassLikelihoods& likelihoods) {
  return 1.0 - objectness_score(likelihoods);
}

double objectness_score(const ClassLikelihoods& likelihoods) {
  if (likelihoods.empty()) throw ContractError("empty class set");
  double m = -std::numeric_limits<double>::infinity();
  for (const auto& [_, l] : likelihoods) m = std::max(m, l);
  return m;
}

double ClassPosterior::sum() const {
  double s = background;
  for (const auto& [_, p] : classes) s += p;
  return s;
}

int ClassPosterior::argmax() const {
  int best = kBackgroundLabel;
  double best_p = background;
  for (const auto& [c, p] : classes) {
    if (p > best_p) {
      best_p = p;
      best = c;
    }
  }
  return best;
}

ClassPosterior class_posterior(const ClassLikelihoods& likelihoods) {
  if (likelihoods.empty()) throw ContractError("empty class set");
  const double bg = background_likelihood(likelihoods);
  double total = bg;
  for (const auto& [_, l] : likelihoods) total += l;
  if (!(total > 0.0)) throw ContractError("likelihoods sum to zero");
  ClassPosterior out;
  for (const auto& [c, l] : likelihoods) out.classes[c] = l / total;
  out.background = bg / total;
  return out;
}

ClassLikelihoods likelihoods_for(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                                 double sigma) {
  ClassLikelihoods out;
  for (const auto& [c, p] : prototypes) out[c] = gaussian_likelihood(z, p.vector.values(), sigma);
  return out;
}

namespace {

struct LikelihoodTable {
  std::vector<int> classes;
  std::vector<double> values;
  std::size_t argmax = 0;
  double denominator = 0.0;
};

LikelihoodTable tabulate(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                         double sigma) {
  if (prototypes.empty()) throw ContractError("empty class set");
  LikelihoodTable t;
  for (const auto& [c, p] : prototypes) {
    t.classes.push_back(c);
    t.values.push_back(gaussian_likelihood(z, p.vector.values(), sigma));
  }
  for (std::size_t j = 1; j < t.values.size(); ++j) {
    if (t.values[j] > t.values[t.argmax]) t.argmax = j;
  }
  t.denominator = 1.0 - t.values[t.argmax];
  for (double v : t.values) t.denominator += v;
  return t;
}

}  // namespace

HeadClassLoss head_class_loss(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                              double sigma, int label, double eps) {
  const LikelihoodTable t = tabulate(z, prototypes, sigma);
  const double s = t.denominator;
  HeadClassLoss out;
  out.grad_z.assign(z.size(), 0.0);
  for (const auto& [c, p] : prototypes) out.grad_prototypes[c].assign(z.size(), 0.0);

  std::size_t target = t.classes.size();
  double numerator;
  if (label == kBackgroundLabel) {
    numerator = 1.0 - t.values[t.argmax];
  } else {
    auto it = std::find(t.classes.begin(), t.classes.end(), label);
    if (it == t.classes.end()) throw ContractError("label not in prototype set");
    target = static_cast<std::size_t>(it - t.classes.begin());
    numerator = t.values[target];
  }
  const double posterior = numerator / s;
  if (posterior < eps) {
    out.loss = -std::log(eps);
    return out;
  }
  out.loss = -std::log(posterior);

  // dloss/dL_j, written so that the target class term stays finite as L_t -> 0.
  for (std::size_t j = 0; j < t.classes.size(); ++j) {
    const int c = t.classes[j];
    double dl = (j == t.argmax ? 0.0 : 1.0) / s;
    if (label == kBackgroundLabel && j == t.argmax) dl += 1.0 / numerator;
    gaussian_likelihood_grad(z, prototypes.at(c).vector.values(), sigma, dl, out.grad_z,
                             out.grad_prototypes[c]);
  }
  if (target < t.classes.size()) {
    // -log L_t = ||z - p_t||^2 / (2 sigma^2)
    const auto& p = prototypes.at(t.classes[target]).vector.values();
    auto& gp = out.grad_prototypes[t.classes[target]];
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = (z[i] - p[i]) / (sigma * sigma);
      out.grad_z[i] += d;
      gp[i] -= d;
    }
  }
  return out;
}

Vector class_posterior_grad(std::span<const double> z, const std::map<int, Prototype>& prototypes,
                            double sigma, int label) {
  const LikelihoodTable t = tabulate(z, prototypes, sigma);
  const double s = t.denominator;
  double numerator;
  std::size_t target = t.classes.size();
  if (label == kBackgroundLabel) {
    numerator = 1.0 - t.values[t.argmax];
  } else {
    target = static_cast<std::size_t>(
        std::find(t.classes.begin(), t.classes.end(), label) - t.classes.begin());
    if (target == t.classes.size()) throw ContractError("label not in prototype set");
    numerator = t.values[target];
  }
  Vector grad(z.size(), 0.0);
  for (std::size_t j = 0; j < t.classes.size(); ++j) {
    double dnum = 0.0;
    if (j == target) dnum = 1.0;
    if (label == kBackgroundLabel && j == t.argmax) dnum = -1.0;
    const double dden = j == t.argmax ? 0.0 : 1.0;
    const double dpost = (dnum * s - numerator * dden) / (s * s);
    gaussian_likelihood_grad(z, prototypes.at(t.classes[j]).vector.values(), sigma, dpost, grad, {});
  }
  return grad;
}

// ---------------------------------------------------------------------------

PseudoLabeling cluster_negatives(const std::vector<Embedding>& negatives, int k, int max_iters,
                                 std::uint64_t seed) {
  std::vector<Vector> points;
  points.reserve(negatives.size());
  for (const Embedding& e : negatives) points.push_back(e.values());
  return cluster_points(points, k, max_iters, seed);
}

namespace {

constexpr std::size_t kMaxEnumeratedSeeds = 128;

struct KMeansRun {
  std::vector<int> assignments;
  std::vector<Vector> centers;
  std::vector<double> history;
};

double total_inertia(const std::vector<Vector>& points, const KMeansRun& run) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    inertia += squared_distance(points[i], run.centers[static_cast<std::size_t>(run.assignments[i])]);
  }
  return inertia;
}

std::vector<std::size_t> cluster_sizes(const KMeansRun& run) {
  std::vector<std::size_t> counts(run.centers.size(), 0);
  for (int a : run.assignments) ++counts[static_cast<std::size_t>(a)];
  return counts;
}

void recompute_centers(const std::vector<Vector>& points, KMeansRun& run) {
  const std::vector<std::size_t> counts = cluster_sizes(run);
  for (std::size_t c = 0; c < run.centers.size(); ++c) {
    if (counts[c] > 0) std::fill(run.centers[c].begin(), run.centers[c].end(), 0.0);
  }
  for (std::size_t i = 0; i < points.size(); ++i) {
    Vector& center = run.centers[static_cast<std::size_t>(run.assignments[i])];
    for (std::size_t d = 0; d < center.size(); ++d) center[d] += points[i][d];
  }
  for (std::size_t c = 0; c < run.centers.size(); ++c) {
    if (counts[c] == 0) continue;
    for (double& x : run.centers[c]) x /= static_cast<double>(counts[c]);
  }
}

// Lloyd iterations from the given centers.
KMeansRun lloyd(const std::vector<Vector>& points, std::vector<Vector> centers, int max_iters) {
  const std::size_t n = points.size(), k = centers.size();
  KMeansRun run;
  run.centers = std::move(centers);
  run.assignments.assign(n, -1);
  std::vector<int> next(n);
  for (int iter = 0; iter < std::max(1, max_iters); ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = squared_distance(points[i], run.centers[c]);
        if (d < best) {
          best = d;
          next[i] = static_cast<int>(c);
        }
      }
    }
    const bool changed = next != run.assignments;
    run.assignments = next;
    // An empty cluster takes the point farthest from its center.
    std::vector<std::size_t> counts = cluster_sizes(run);
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const auto own = static_cast<std::size_t>(run.assignments[i]);
        if (counts[own] <= 1) continue;
        const double d = squared_distance(points[i], run.centers[own]);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      --counts[static_cast<std::size_t>(run.assignments[far])];
      run.assignments[far] = static_cast<int>(c);
      counts[c] = 1;
    }
    recompute_centers(points, run);
    run.history.push_back(total_inertia(points, run));
    if (!changed && iter > 0) break;
  }
  return run;
}

// Single-point moves (Hartigan) that strictly lower the inertia. They escape
// many partitions where Lloyd stalls.
void refine(const std::vector<Vector>& points, KMeansRun& run) {
  std::vector<std::size_t> counts = cluster_sizes(run);
  for (bool moved = true; moved;) {
    moved = false;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const auto from = static_cast<std::size_t>(run.assignments[i]);
      if (counts[from] <= 1) continue;
      const double nf = static_cast<double>(counts[from]);
      const double removal = nf / (nf - 1.0) * squared_distance(points[i], run.centers[from]);
      std::size_t to = from;
      double gain = 1e-12 * removal;
      for (std::size_t c = 0; c < run.centers.size(); ++c) {
        if (c == from) continue;
        const double nc = static_cast<double>(counts[c]);
        const double g = removal - nc / (nc + 1.0) * squared_distance(points[i], run.centers[c]);
        if (g > gain) {
          gain = g;
          to = c;
        }
      }
      if (to == from) continue;
      run.assignments[i] = static_cast<int>(to);
      --counts[from];
      ++counts[to];
      recompute_centers(points, run);
      run.history.push_back(total_inertia(points, run));
      moved = true;
    }
  }
}

std::vector<Vector> plus_plus_seeds(const std::vector<Vector>& points, std::size_t k, Rng& rng) {
  const std::size_t n = points.size();
  std::vector<Vector> centers{points[rng.index(n)]};
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const Vector& c : centers) best = std::min(best, squared_distance(points[i], c));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (pick = 0; pick + 1 < n; ++pick) {
        r -= d2[pick];
        if (r < 0.0) break;
      }
    } else {
      pick = rng.index(n);
    }
    centers.push_back(points[pick]);
  }
  return centers;
}

// Number of k-subsets of n points, saturating above the enumeration budget.
std::size_t subset_count(std::size_t n, std::size_t k) {
  double count = 1.0;
  for (std::size_t i = 0; i < k; ++i) {
    count = count * static_cast<double>(n - i) / static_cast<double>(i + 1);
    if (count > static_cast<double>(kMaxEnumeratedSeeds)) return kMaxEnumeratedSeeds + 1;
  }
  return static_cast<std::size_t>(count + 0.5);
}

}  // namespace

PseudoLabeling cluster_points(const std::vector<Vector>& points, int k, int max_iters,
                              std::uint64_t seed) {
  if (k <= 0) throw ClusteringError("cluster count must be positive");
  if (points.size() < static_cast<std::size_t>(k)) {
    throw ClusteringError("need at least " + std::to_string(k) + " points, got " +
                          std::to_string(points.size()));
  }
  const std::size_t n = points.size();
  const std::size_t uk = static_cast<std::size_t>(k);

  // Small inputs try every k-subset of points as seeds; larger ones take one
  // k-means++ draw.
  std::vector<std::vector<Vector>> seedings;
  if (subset_count(n, uk) <= kMaxEnumeratedSeeds) {
    std::vector<std::size_t> idx(uk);
    for (std::size_t i = 0; i < uk; ++i) idx[i] = i;
    while (true) {
      std::vector<Vector> centers;
      for (std::size_t i : idx) centers.push_back(points[i]);
      seedings.push_back(std::move(centers));
      std::size_t pos = uk;
      while (pos > 0 && idx[pos - 1] == n - uk + pos - 1) --pos;
      if (pos == 0) break;
      ++idx[pos - 1];
      for (std::size_t i = pos; i < uk; ++i) idx[i] = idx[i - 1] + 1;
    }
  } else {
    Rng rng(seed);
    seedings.push_back(plus_plus_seeds(points, uk, rng));
  }

  PseudoLabeling out;
  out.k = k;
  out.inertia = std::numeric_limits<double>::infinity();
  for (auto& centers : seedings) {
    KMeansRun run = lloyd(points, std::move(centers), max_iters);
    refine(points, run);
    const double inertia = run.history.back();
    if (inertia < out.inertia) {
      out.inertia = inertia;
      out.assignments = std::move(run.assignments);
      out.centers = std::move(run.centers);
      out.inertia_history = std::move(run.history);
    }
  }
  return out;
}

std::vector<Triplet> mine_triplets(const PseudoLabeling& labeling, std::size_t num_points,
                                   int per_anchor, std::uint64_t seed) {
  if (labeling.assignments.size() != num_points) {
    throw ContractError("labeling does not cover the points");
  }
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < num_points; ++i) members[labeling.assignments[i]].push_back(i);
  std::vector<Triplet> out;
  if (members.size() < 2) return out;
  Rng rng(seed);
  for (std::size_t a = 0; a < num_points; ++a) {
    const int label = labeling.assignments[a];
    const auto& same = members[label];
    if (same.size() < 2) continue;
    const std::size_t others = num_points - same.size();
    for (int t = 0; t < per_anchor; ++t) {
      std::size_t p;
      do {
        p = same[rng.index(same.size())];
      } while (p == a);
      // The r-th point outside the anchor's cluster.
      std::size_t r = rng.index(others);
      std::size_t neg = 0;
      for (std::size_t i = 0; i < num_points; ++i) {
        if (labeling.assignments[i] == label) continue;
        if (r == 0) {
          neg = i;
          break;
        }
        --r;
      }
      out.push_back({a, p, neg});
    }
  }
  return out;
}

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin) {
  if (!(margin > 0.0)) throw ContractError("margin must be positive");
  return std::max(0.0, squared_distance(a, p) - squared_distance(a, n) + margin);
}

TripletGrad triplet_loss_grad(std::span<const double> a, std::span<const double> p,
                              std::span<const double> n, double margin) {
  TripletGrad g{Vector(a.size(), 0.0), Vector(a.size(), 0.0), Vector(a.size(), 0.0)};
  if (triplet_loss(a, p, n, margin) <= 0.0) return g;
  for (std::size_t i = 0; i < a.size(); ++i) {
    g.anchor[i] = 2.0 * (a[i] - p[i]) - 2.0 * (a[i] - n[i]);
    g.positive[i] = -2.0 * (a[i] - p[i]);
    g.negative[i] = 2.0 * (a[i] - n[i]);
  }
  return g;
}

}  // namespace protodet
