#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "gen.hpp"
#include "oracles.hpp"
#include "protodet/errors.hpp"
#include "protodet/protospace.hpp"

using namespace protodet;
using protodet::test::Gen;

namespace {

Vector axis(std::size_t dim, std::size_t i) {
  Vector v(dim, 0.0);
  v[i] = 1.0;
  return v;
}

std::map<int, Prototype> random_prototypes(Gen& g, std::size_t dim, int n) {
  std::map<int, Prototype> out;
  for (int c = 0; c < n; ++c) {
    const Embedding e(g.unit(dim));
    out[c * 3 + 1] = Prototype{c * 3 + 1, e, std::nullopt};
  }
  return out;
}

// Unit tangent direction at p.
Vector tangent(Gen& g, const Vector& p) {
  Vector t = g.vec(p.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += t[i] * p[i];
  for (std::size_t i = 0; i < p.size(); ++i) t[i] -= dot * p[i];
  const double n = norm(t);
  for (double& x : t) x /= n;
  return t;
}

}  // namespace

TEST_SUITE("protospace") {

TEST_CASE("normalize") {
  Vector v(8, 0.0);
  v[0] = 3;
  v[1] = 4;
  const Embedding e = normalize(v);
  CHECK(e[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(e[1] == doctest::Approx(0.8).epsilon(1e-15));
  CHECK(normalize(e.values()) == e);
  CHECK_THROWS_AS(normalize(Vector(8, 0.0)), NumericError);
  CHECK_THROWS_AS(Embedding(Vector{1.0, 1.0}), NumericError);
}

TEST_CASE("normalize backward matches finite differences") {
  Gen g(4);
  for (int t = 0; t < 20; ++t) {
    const Vector x = g.vec(6, 2.0);
    const Vector w = g.vec(6);
    const double n = norm(x);
    const Embedding y = normalize(x);
    const Vector grad = normalize_backward(y.values(), n, w);
    auto f = [&](const Vector& v) {
      const Embedding e = normalize(v);
      double s = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) s += w[i] * e[i];
      return s;
    };
    for (std::size_t i = 0; i < x.size(); ++i) {
      CHECK(oracle::relative_error(grad[i], oracle::central_difference(f, x, i, 1e-6)) < 1e-6);
    }
  }
}

TEST_CASE("prototype construction") {
  const std::size_t d = 6;
  const Embedding e(axis(d, 2));
  CHECK(compute_prototype(4, {e}).vector == e);
  const Prototype p = compute_prototype(1, {Embedding(axis(d, 0)), Embedding(axis(d, 1))});
  CHECK(p.vector[0] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  CHECK(p.vector[1] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
  Vector neg = axis(d, 0);
  neg[0] = -1.0;
  CHECK_THROWS_AS(compute_prototype(1, {Embedding(axis(d, 0)), Embedding(neg)}), NumericError);
  CHECK_THROWS_AS(compute_prototype(1, {}), ContractError);
}

TEST_CASE("moving average") {
  const std::size_t d = 4;
  const Prototype prev{0, Embedding(axis(d, 0)), Embedding(axis(d, 0))};
  const Prototype fresh{0, Embedding(axis(d, 1)), std::nullopt};

  const Prototype first = update_moving_average(Prototype{0, Embedding(axis(d, 0)), std::nullopt}, fresh, 0.1);
  CHECK(first.vector == fresh.vector);
  REQUIRE(first.ema_state);
  CHECK(*first.ema_state == fresh.vector);

  CHECK(update_moving_average(prev, fresh, 1.0).vector == fresh.vector);

  const Prototype blended = update_moving_average(prev, fresh, 0.1);
  const double n = std::sqrt(0.81 + 0.01);
  CHECK(std::abs(blended.vector[0] - 0.9 / n) < 1e-12);
  CHECK(std::abs(blended.vector[1] - 0.1 / n) < 1e-12);
  CHECK(std::abs(blended.vector[0] - 0.9939) < 1e-4);
  CHECK(std::abs(blended.vector[1] - 0.1104) < 1e-4);

  CHECK_THROWS_AS(update_moving_average(prev, fresh, 0.0), ContractError);
  CHECK_THROWS_AS(update_moving_average(prev, fresh, 1.5), ContractError);
}

TEST_CASE("moving average converges to a constant fresh prototype") {
  Gen g(8);
  for (int t = 0; t < 20; ++t) {
    const Embedding start(g.unit(16));
    const Embedding target(g.unit(16));
    Prototype state{0, start, start};
    const Prototype fresh{0, target, std::nullopt};
    double prev = std::sqrt(squared_distance(start, target));
    for (int step = 0; step < 80; ++step) {
      // Before renormalization the gap shrinks by exactly 1 - alpha.
      Vector raw(16);
      for (std::size_t i = 0; i < 16; ++i) raw[i] = 0.1 * target[i] + 0.9 * state.vector[i];
      double gap = 0.0;
      for (std::size_t i = 0; i < 16; ++i) gap += (raw[i] - target[i]) * (raw[i] - target[i]);
      CHECK(std::abs(std::sqrt(gap) - 0.9 * prev) < 1e-12);
      state = update_moving_average(state, fresh, 0.1);
      const double now = std::sqrt(squared_distance(state.vector, target));
      CHECK(now <= prev + 1e-12);
      prev = now;
    }
    CHECK(prev < 1e-3);
  }
}

TEST_CASE("gaussian likelihood known values") {
  const std::size_t d = 8;
  const Vector z = axis(d, 0);
  CHECK(gaussian_likelihood(z, z, 0.5) == 1.0);
  // d = 1: points at distance one along a single axis.
  Vector shifted = z;
  shifted[1] = 1.0;
  CHECK(std::abs(gaussian_likelihood(z, shifted, 0.5) - std::exp(-2.0)) < 1e-12);
  CHECK(std::abs(gaussian_likelihood(z, axis(d, 1), 0.5) - std::exp(-4.0)) < 1e-12);
  CHECK(std::abs(std::exp(-2.0) - 0.13534) < 1e-5);
  CHECK(std::abs(std::exp(-4.0) - 0.01832) < 1e-5);
}

TEST_CASE("likelihood decreases with distance and ranking is preserved") {
  Gen g(12);
  for (int t = 0; t < 200; ++t) {
    const Vector z = g.unit(10);
    const auto protos = random_prototypes(g, 10, 4);
    const ClassLikelihoods l = likelihoods_for(z, protos, 0.5);
    const ClassPosterior post = class_posterior(l);
    for (const auto& [a, pa] : protos) {
      for (const auto& [b, pb] : protos) {
        const double da = squared_distance(z, pa.vector), db = squared_distance(z, pb.vector);
        if (da < db) {
          CHECK(l.at(a) > l.at(b));
          CHECK(post.classes.at(a) > post.classes.at(b));
        }
      }
    }
  }
}

TEST_CASE("background, objectness and posterior") {
  CHECK(background_likelihood({{0, 0.7}, {1, 0.3}}) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(background_likelihood({{0, 1.0}, {1, 0.2}}) == 0.0);
  CHECK(background_likelihood({{0, 0.0}, {1, 0.0}}) == 1.0);
  CHECK(objectness_score({{0, 0.3}, {1, 0.7}}) == 0.7);
  CHECK(objectness_score({{0, 0.42}}) == 0.42);
  CHECK_THROWS_AS(background_likelihood({}), ContractError);
  CHECK_THROWS_AS(objectness_score({}), ContractError);
  CHECK_THROWS_AS(class_posterior({}), ContractError);

  const ClassPosterior p = class_posterior({{0, 0.8}, {1, 0.2}});
  CHECK(p.background == doctest::Approx(0.2 / 1.2).epsilon(1e-15));
  CHECK(p.classes.at(0) == doctest::Approx(0.8 / 1.2).epsilon(1e-15));
  CHECK(std::abs(p.classes.at(0) - 0.6667) < 1e-4);
  CHECK(p.argmax() == 0);

  const ClassPosterior one = class_posterior({{5, 1.0}});
  CHECK(one.classes.at(5) == 1.0);
  CHECK(one.background == 0.0);

  const ClassPosterior sym = class_posterior({{0, 0.4}, {1, 0.4}});
  CHECK(sym.classes.at(0) == sym.classes.at(1));

  CHECK(class_posterior({{0, 0.0}, {1, 0.0}}).argmax() == -1);
}

TEST_CASE("objectness and background are exact complements") {
  Gen g(2);
  for (int t = 0; t < 10000; ++t) {
    ClassLikelihoods l;
    const int n = g.integer(1, 6);
    for (int c = 0; c < n; ++c) l[c] = g.uniform(0.0, 1.0);
    CHECK(objectness_score(l) + background_likelihood(l) == 1.0);
    CHECK(std::abs(class_posterior(l).sum() - 1.0) < 1e-6);
  }
}

TEST_CASE("gaussian likelihood gradient") {
  Gen g(31);
  for (int t = 0; t < 50; ++t) {
    const Vector z = g.vec(7, 0.5), p = g.vec(7, 0.5);
    Vector gz(7, 0.0), gp(7, 0.0);
    gaussian_likelihood_grad(z, p, 0.5, 1.0, gz, gp);
    for (std::size_t i = 0; i < 7; ++i) {
      const double fz = oracle::central_difference([&](const Vector& v) { return gaussian_likelihood(v, p, 0.5); }, z, i, 1e-6);
      const double fp = oracle::central_difference([&](const Vector& v) { return gaussian_likelihood(z, v, 0.5); }, p, i, 1e-6);
      CHECK(oracle::relative_error(gz[i], fz) < 1e-4);
      CHECK(oracle::relative_error(gp[i], fp) < 1e-4);
    }
  }
}

TEST_CASE("posterior gradient") {
  Gen g(32);
  for (int t = 0; t < 40; ++t) {
    const auto protos = random_prototypes(g, 6, 3);
    // Points near a prototype exercise the large-likelihood regime.
    Vector z = g.unit(6);
    if (t % 2 == 0) {
      z = protos.begin()->second.vector.values();
      for (double& x : z) x += 0.2 * g.normal();
    }
    std::vector<int> labels{kBackgroundLabel};
    for (const auto& [c, _] : protos) labels.push_back(c);
    for (int label : labels) {
      const Vector grad = class_posterior_grad(z, protos, 0.5, label);
      auto f = [&](const Vector& v) {
        const ClassPosterior p = class_posterior(likelihoods_for(v, protos, 0.5));
        return label == kBackgroundLabel ? p.background : p.classes.at(label);
      };
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double fd = oracle::central_difference(f, z, i, 1e-7);
        if (std::abs(fd) < 1e-9 && std::abs(grad[i]) < 1e-9) continue;
        CHECK(oracle::relative_error(grad[i], fd) < 1e-4);
      }
    }
  }
}

TEST_CASE("head class loss gradients") {
  Gen g(33);
  for (int t = 0; t < 30; ++t) {
    const auto protos = random_prototypes(g, 6, 3);
    Vector z = protos.rbegin()->second.vector.values();
    for (double& x : z) x += 0.3 * g.normal();
    const int label = t % 4 == 0 ? kBackgroundLabel : std::next(protos.begin(), t % 3)->first;
    const HeadClassLoss loss = head_class_loss(z, protos, 0.5, label);
    CHECK(loss.loss >= 0.0);
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double fd = oracle::central_difference(
          [&](const Vector& v) { return head_class_loss(v, protos, 0.5, label).loss; }, z, i, 1e-6);
      CHECK(oracle::relative_error(loss.grad_z[i], fd, 1e-6) < 1e-4);
    }
    // Prototype gradients checked along directions tangent to the sphere.
    for (const auto& [c, p] : protos) {
      const Vector dir = tangent(g, p.vector.values());
      auto f = [&](double h) {
        auto moved = protos;
        Vector v = p.vector.values();
        for (std::size_t i = 0; i < v.size(); ++i) v[i] += h * dir[i];
        moved[c].vector = normalize(v);
        return head_class_loss(z, moved, 0.5, label).loss;
      };
      const double fd = (f(1e-6) - f(-1e-6)) / 2e-6;
      double analytic = 0.0;
      for (std::size_t i = 0; i < dir.size(); ++i) analytic += loss.grad_prototypes.at(c)[i] * dir[i];
      INFO("analytic " << analytic << " fd " << fd);
      CHECK(oracle::relative_error(analytic, fd, 1e-5) < 1e-4);
    }
  }
  const auto protos = random_prototypes(g, 6, 2);
  CHECK_THROWS_AS(head_class_loss(g.unit(6), protos, 0.5, 999), ContractError);
}

TEST_CASE("head class loss clamps at epsilon") {
  // Far from a lone prototype the posterior of that class underflows.
  std::map<int, Prototype> protos{{0, Prototype{0, Embedding(axis(4, 0)), std::nullopt}}};
  Vector far = axis(4, 0);
  far[0] = -1.0;
  const HeadClassLoss l = head_class_loss(far, protos, 0.05, 0, 1e-8);
  CHECK(l.loss == doctest::Approx(-std::log(1e-8)));
  for (double x : l.grad_z) CHECK(x == 0.0);
}

TEST_CASE("triplet loss values") {
  const Vector a{1, 0}, p{0, 1}, n{1, 0};
  CHECK(triplet_loss(a, p, n, 0.2) == doctest::Approx(2.2).epsilon(1e-15));
  CHECK(triplet_loss(a, a, a, 0.2) == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(triplet_loss(a, a, Vector{-1, 0}, 0.2) == 0.0);
  CHECK_THROWS_AS(triplet_loss(a, p, n, 0.0), ContractError);
}

TEST_CASE("triplet loss gradient") {
  Gen g(34);
  int active = 0;
  for (int t = 0; t < 100; ++t) {
    const Vector a = g.vec(5, 0.5), p = g.vec(5, 0.5), n = g.vec(5, 0.5);
    if (triplet_loss(a, p, n, 0.2) > 1e-3) ++active;
    const TripletGrad grad = triplet_loss_grad(a, p, n, 0.2);
    for (std::size_t i = 0; i < 5; ++i) {
      const double fa = oracle::central_difference([&](const Vector& v) { return triplet_loss(v, p, n, 0.2); }, a, i, 1e-7);
      const double fp = oracle::central_difference([&](const Vector& v) { return triplet_loss(a, v, n, 0.2); }, p, i, 1e-7);
      const double fn = oracle::central_difference([&](const Vector& v) { return triplet_loss(a, p, v, 0.2); }, n, i, 1e-7);
      CHECK(oracle::relative_error(grad.anchor[i], fa, 1e-6) < 1e-4);
      CHECK(oracle::relative_error(grad.positive[i], fp, 1e-6) < 1e-4);
      CHECK(oracle::relative_error(grad.negative[i], fn, 1e-6) < 1e-4);
    }
  }
  CHECK(active > 20);
}

TEST_CASE("k-means") {
  SUBCASE("too few points") {
    CHECK_THROWS_AS(cluster_points({{0.0}, {1.0}}, 3, 10, 0), ClusteringError);
  }
  SUBCASE("single cluster") {
    Gen g(40);
    std::vector<Embedding> pts;
    for (int i = 0; i < 10; ++i) pts.emplace_back(g.unit(4));
    const PseudoLabeling l = cluster_negatives(pts, 1, 10, 3);
    Vector mean(4, 0.0);
    for (const auto& e : pts) {
      for (std::size_t j = 0; j < 4; ++j) mean[j] += e[j] / 10.0;
    }
    for (int a : l.assignments) CHECK(a == 0);
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::abs(l.centers[0][j] - mean[j]) < 1e-12);
  }
  SUBCASE("deterministic and inertia non-increasing") {
    Gen g(41);
    std::vector<Vector> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(g.vec(3));
    const PseudoLabeling a = cluster_points(pts, 5, 50, 9);
    const PseudoLabeling b = cluster_points(pts, 5, 50, 9);
    CHECK(a.assignments == b.assignments);
    for (std::size_t i = 1; i < a.inertia_history.size(); ++i) {
      CHECK(a.inertia_history[i] <= a.inertia_history[i - 1] + 1e-12);
    }
    for (int x : a.assignments) {
      CHECK(x >= 0);
      CHECK(x < 5);
    }
  }
  SUBCASE("small inputs reach the optimal 2-partition") {
    Gen g(42);
    for (int t = 0; t < 300; ++t) {
      const int n = g.integer(2, 12);
      std::vector<Vector> pts;
      for (int i = 0; i < n; ++i) pts.push_back(g.vec(3));
      double best = 0.0;
      oracle::best_two_clustering(pts, &best);
      const PseudoLabeling l = cluster_points(pts, 2, 100, static_cast<std::uint64_t>(t));
      CHECK(l.inertia == doctest::Approx(best).epsilon(1e-9));
      for (std::size_t i = 1; i < l.inertia_history.size(); ++i) {
        CHECK(l.inertia_history[i] <= l.inertia_history[i - 1] + 1e-12);
      }
    }
  }
}

TEST_CASE("triplet mining") {
  PseudoLabeling l;
  l.k = 2;
  l.assignments = {0, 0, 1};
  std::set<Triplet> seen;
  for (std::uint64_t s = 0; s < 20; ++s) {
    for (const Triplet& t : mine_triplets(l, 3, 2, s)) seen.insert(t);
  }
  CHECK(seen == std::set<Triplet>{{0, 1, 2}, {1, 0, 2}});

  l.assignments = {1, 1, 1};
  CHECK(mine_triplets(l, 3, 2, 0).empty());

  Gen g(42);
  for (int t = 0; t < 100; ++t) {
    PseudoLabeling r;
    r.k = g.integer(1, 5);
    const std::size_t n = static_cast<std::size_t>(g.integer(2, 30));
    for (std::size_t i = 0; i < n; ++i) r.assignments.push_back(g.integer(0, r.k - 1));
    const auto triplets = mine_triplets(r, n, 2, static_cast<std::uint64_t>(t));
    CHECK(triplets == mine_triplets(r, n, 2, static_cast<std::uint64_t>(t)));
    for (const Triplet& tr : triplets) {
      CHECK(tr[0] != tr[1]);
      CHECK(r.assignments[tr[0]] == r.assignments[tr[1]]);
      CHECK(r.assignments[tr[0]] != r.assignments[tr[2]]);
    }
  }
}

TEST_CASE("bank validation and dump") {
  Gen g(50);
  PrototypeBank bank;
  for (int c : {2, 5}) {
    bank.rpn[c] = Prototype{c, Embedding(g.unit(4)), std::nullopt};
    bank.head[c] = Prototype{c, Embedding(g.unit(4)), Embedding(g.unit(4))};
  }
  bank.validate();
  std::stringstream s;
  write_bank(s, bank);
  const PrototypeBank back = read_bank(s);
  CHECK(back.classes() == std::vector<int>{2, 5});
  CHECK(back.head.at(5).vector == bank.head.at(5).vector);
  REQUIRE(back.head.at(5).ema_state);
  CHECK(*back.head.at(5).ema_state == *bank.head.at(5).ema_state);
  CHECK(back.sigma == bank.sigma);

  bank.rpn.erase(5);
  CHECK_THROWS_AS(bank.validate(), ContractError);
  bank.erase(5);
  CHECK_NOTHROW(bank.validate());

  std::stringstream bad("garbage");
  CHECK_THROWS_AS(read_bank(bad), ParseError);
}

}  // TEST_SUITE
