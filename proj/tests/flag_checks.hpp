#pragma once

// Frozen-forward flag isolation checks shared by the unit and acceptance tests.

#include <cmath>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "protodet/training.hpp"

namespace protodet::test {

struct FlagCheck {
  bool ok = true;
  std::string detail;

  void fail(const std::string& why) {
    if (ok) detail = why;
    ok = false;
  }
};

struct FlagFixture {
  DatasetIndex dataset;
  Detector<double> detector{ModelConfig{}};
  EpisodeTask episode;
  PrototypeStore store;
  TrainConfig all_on;
  StepPlan plan;
  std::uint64_t step_seed = 5;

  FlagFixture() {
    SynthConfig sc;
    sc.num_images = 40;
    sc.seed = 21;
    dataset = generate_synthetic_dataset(sc);
    all_on.hem = all_on.ma = all_on.bc = true;
    all_on.query_per_class = 1;
    all_on.bc_clusters = 4;
    const std::set<int> pool{0, 1, 2, 3, 4};
    // First seed whose two query images carry hard negatives.
    for (std::uint64_t seed = 0;; ++seed) {
      episode = sample_episode(dataset, pool, 2, 1, 1, seed);
      if (!episode.query[0].hard_negatives.empty() && !episode.query[1].hard_negatives.empty()) break;
    }
    // A moving-average store built from a different support draw.
    const PrototypeBank other = detector.build_bank(dataset, build_support_set(dataset, episode.classes, 2, 99));
    for (const auto& [c, p] : other.rpn) store.rpn.emplace(c, p.vector);
    for (const auto& [c, p] : other.head) store.head.emplace(c, p.vector);
    plan = run(all_on, nullptr).plan;
  }

  StepResult run(const TrainConfig& config, const StepPlan* frozen) {
    return run_step(detector, dataset, episode, {0, 1}, store, config, step_seed, StepOptions{false, frozen});
  }
};

inline bool close(double a, double b, double tol = 1e-9) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

inline bool same_embeddings(const std::vector<std::vector<Embedding>>& a, const std::vector<std::vector<Embedding>>& b,
                            bool prefix) {
  if (a.size() != b.size()) return false;
  for (std::size_t q = 0; q < a.size(); ++q) {
    if (!prefix && a[q].size() != b[q].size()) return false;
    const std::size_t n = std::min(a[q].size(), b[q].size());
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < a[q][i].dim(); ++j) {
        if (!close(a[q][i][j], b[q][i][j])) return false;
      }
    }
  }
  return true;
}

inline bool same_contribution(const LossContribution& a, const LossContribution& b) {
  return a.term == b.term && a.kind == b.kind && a.image == b.image && a.index == b.index && close(a.value, b.value);
}

inline std::vector<LossContribution> without(const std::vector<LossContribution>& cs, bool (*drop)(const LossContribution&)) {
  std::vector<LossContribution> out;
  for (const LossContribution& c : cs) {
    if (!drop(c)) out.push_back(c);
  }
  return out;
}

inline bool same_contributions(const std::vector<LossContribution>& a, const std::vector<LossContribution>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_contribution(a[i], b[i])) return false;
  }
  return true;
}

inline bool same_bank(const PrototypeBank& a, const PrototypeBank& b) {
  if (a.classes() != b.classes()) return false;
  for (int c : a.classes()) {
    for (std::size_t j = 0; j < a.dim(); ++j) {
      if (!close(a.rpn.at(c).vector[j], b.rpn.at(c).vector[j]) || !close(a.head.at(c).vector[j], b.head.at(c).vector[j])) {
        return false;
      }
    }
  }
  return true;
}

/// Replaying the frozen plan reproduces the original pass.
inline FlagCheck check_replay(FlagFixture& f) {
  FlagCheck r;
  const StepResult a = f.run(f.all_on, nullptr), b = f.run(f.all_on, &f.plan);
  if (!same_contributions(a.contributions, b.contributions)) r.fail("replay changes contributions");
  if (a.losses.total != b.losses.total) r.fail("replay changes the total loss");
  return r;
}

inline FlagCheck check_hem(FlagFixture& f) {
  FlagCheck r;
  TrainConfig off = f.all_on;
  off.hem = false;
  const StepResult on_run = f.run(f.all_on, &f.plan), off_run = f.run(off, &f.plan);
  auto is_hard = [](const LossContribution& c) { return c.kind == MatchLabel::hard_negative; };
  std::size_t hard = 0;
  for (const auto& c : on_run.contributions) hard += is_hard(c);
  if (hard == 0) r.fail("plan has no hard-negative contributions");
  for (const auto& c : off_run.contributions) {
    if (is_hard(c)) r.fail("HEM off still scores hard negatives");
  }
  if (!same_contributions(without(on_run.contributions, is_hard), off_run.contributions)) {
    r.fail("HEM toggle changes non-hard contributions");
  }
  if (!same_bank(on_run.bank, off_run.bank)) r.fail("HEM toggle changes prototypes");
  if (!same_embeddings(on_run.head_embeddings, off_run.head_embeddings, true) ||
      !same_embeddings(on_run.rpn_embeddings, off_run.rpn_embeddings, true)) {
    r.fail("HEM toggle changes embeddings");
  }
  if (!close(on_run.losses.bg_cluster, off_run.losses.bg_cluster)) r.fail("HEM toggle changes bg_cluster");
  return r;
}

inline FlagCheck check_ma(FlagFixture& f) {
  FlagCheck r;
  TrainConfig off = f.all_on;
  off.ma = false;
  const StepResult on_run = f.run(f.all_on, &f.plan), off_run = f.run(off, &f.plan);
  if (!same_embeddings(on_run.head_embeddings, off_run.head_embeddings, false) ||
      !same_embeddings(on_run.rpn_embeddings, off_run.rpn_embeddings, false)) {
    r.fail("MA toggle changes embeddings");
  }
  if (on_run.bank.classes() != off_run.bank.classes()) r.fail("MA toggle changes the class set");
  const double a = f.all_on.alpha;
  for (int c : off_run.bank.classes()) {
    for (int stage = 0; stage < 2; ++stage) {
      const auto& fresh = (stage == 0 ? off_run.bank.rpn : off_run.bank.head).at(c).vector;
      const auto& used = (stage == 0 ? on_run.bank.rpn : on_run.bank.head).at(c).vector;
      const auto& prev = (stage == 0 ? f.store.rpn : f.store.head).at(c);
      Vector blend(fresh.dim());
      for (std::size_t j = 0; j < blend.size(); ++j) blend[j] = a * fresh[j] + (1.0 - a) * prev[j];
      const Embedding expected = normalize(blend);
      bool differs = false;
      for (std::size_t j = 0; j < blend.size(); ++j) {
        if (!close(expected[j], used[j], 1e-12)) r.fail("MA prototype is not the blended vector");
        differs |= fresh[j] != used[j];
      }
      if (!differs) r.fail("MA toggle leaves a prototype unchanged");
    }
  }
  // Scoring inputs other than prototypes are shared, so the sampled set is too.
  if (on_run.contributions.size() != off_run.contributions.size()) r.fail("MA toggle changes the sample set");
  return r;
}

inline FlagCheck check_bc(FlagFixture& f) {
  FlagCheck r;
  TrainConfig off = f.all_on;
  off.bc = false;
  const StepResult on_run = f.run(f.all_on, &f.plan), off_run = f.run(off, &f.plan);
  auto is_bc = [](const LossContribution& c) { return c.term == LossTerm::bg_cluster; };
  if (f.plan.triplets.empty()) r.fail("plan has no triplets");
  if (!(on_run.losses.bg_cluster > 0.0)) r.fail("BC on yields a zero clustering loss");
  if (off_run.losses.bg_cluster != 0.0) r.fail("BC off yields a clustering loss");
  if (!same_contributions(without(on_run.contributions, is_bc), off_run.contributions)) {
    r.fail("BC toggle changes other contributions");
  }
  const LossBundle& x = on_run.losses;
  const LossBundle& y = off_run.losses;
  if (!close(x.rpn_reg, y.rpn_reg) || !close(x.rpn_obj, y.rpn_obj) || !close(x.head_reg, y.head_reg) ||
      !close(x.head_cls, y.head_cls)) {
    r.fail("BC toggle changes another loss component");
  }
  if (!close(x.total - y.total, x.lambda_bc * x.bg_cluster)) r.fail("BC toggle changes total beyond the bc term");
  if (!same_bank(on_run.bank, off_run.bank)) r.fail("BC toggle changes prototypes");
  return r;
}

}  // namespace protodet::test
