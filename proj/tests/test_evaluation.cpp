#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "gen.hpp"
#include "oracles.hpp"
#include "protodet/errors.hpp"
#include "protodet/evaluation.hpp"

using namespace protodet;

namespace {

Detection det(int cls, Box b, double score) {
  Detection d;
  d.class_id = cls;
  d.box = b;
  d.score = score;
  return d;
}

std::vector<EvalReport> fake_reports(int runs) {
  std::vector<EvalReport> out;
  for (const std::string split : {"train", "test"}) {
    for (int k : {1, 3, 5, 10}) {
      for (int r = 0; r < runs; ++r) {
        EvalReport e;
        e.split = split;
        e.shots = k;
        e.run = r;
        e.run_seed = static_cast<std::uint64_t>(1000 + r);
        e.per_class_ap = {{0, 0.1 * r + 0.01 * k}, {3, 0.25}};
        e.map = mean_ap(e.per_class_ap);
        out.push_back(e);
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("evaluation") {

TEST_CASE("average precision examples") {
  CHECK(average_precision({true}, 1) == 1.0);
  CHECK(average_precision({false, true}, 1) == 0.5);
  CHECK(average_precision({false, false}, 2) == 0.0);
  CHECK(average_precision({}, 3) == 0.0);
  CHECK(average_precision({true, false, true}, 2) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-15));
  CHECK_THROWS_AS(average_precision({true}, 0), ContractError);
  CHECK_THROWS_AS(average_precision({true, true}, 1), ContractError);
}

TEST_CASE("average precision equals the envelope oracle") {
  for (int len = 0; len <= 6; ++len) {
    for (unsigned mask = 0; mask < (1u << len); ++mask) {
      std::vector<bool> flags;
      int tp = 0;
      for (int i = 0; i < len; ++i) {
        flags.push_back((mask >> i) & 1u);
        tp += flags.back();
      }
      for (int num_gt = std::max(tp, 1); num_gt <= tp + 2; ++num_gt) {
        CHECK(average_precision(flags, num_gt) == oracle::envelope_ap(flags, num_gt));
      }
    }
  }
}

TEST_CASE("AP degrades monotonically") {
  test::Gen g(6);
  for (int t = 0; t < 2000; ++t) {
    std::vector<bool> flags;
    const int len = g.integer(0, 12);
    int tp = 0;
    for (int i = 0; i < len; ++i) {
      flags.push_back(g.coin());
      tp += flags.back();
    }
    const int num_gt = tp + g.integer(1, 3);
    const double ap = average_precision(flags, num_gt);
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
    auto fp_tail = flags;
    fp_tail.push_back(false);
    CHECK(average_precision(fp_tail, num_gt) <= ap);
    auto tp_head = flags;
    tp_head.insert(tp_head.begin(), true);
    CHECK(average_precision(tp_head, num_gt) >= ap);
  }
}

TEST_CASE("precision recall curve") {
  const PRCurve c = pr_curve({true, false, true, false}, 4);
  CHECK(c.recall == std::vector<double>{0.25, 0.25, 0.5, 0.5});
  CHECK(c.precision[2] == doctest::Approx(2.0 / 3.0));
  for (std::size_t i = 1; i < c.recall.size(); ++i) CHECK(c.recall[i] >= c.recall[i - 1]);
}

TEST_CASE("mean AP") {
  CHECK(mean_ap({{0, 1.0}}) == 1.0);
  CHECK(mean_ap({{0, 0.2}, {1, 0.4}}) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(mean_ap({{5, 0.2}, {1, 0.4}}) == mean_ap({{1, 0.4}, {5, 0.2}}));
  CHECK_THROWS_AS(mean_ap({}), ContractError);
}

TEST_CASE("run aggregation") {
  const RunAggregate two = aggregate_runs({0.0, 1.0});
  CHECK(two.mean == 0.5);
  CHECK(std::abs(two.ci95 - 6.353) < 1e-3);
  CHECK(std::abs(two.ci95 - oracle::t975(1) * std::sqrt(0.5) / std::sqrt(2.0)) < 1e-9);

  const RunAggregate same = aggregate_runs({0.4, 0.4, 0.4});
  CHECK(same.mean == doctest::Approx(0.4));
  CHECK(same.ci95 == 0.0);

  const std::vector<double> five{0.1, 0.2, 0.3, 0.4, 0.5};
  const RunAggregate f = aggregate_runs(five);
  double ss = 0.0;
  for (double v : five) ss += (v - 0.3) * (v - 0.3);
  CHECK(std::abs(f.mean - 0.3) < 1e-12);
  CHECK(std::abs(f.ci95 - oracle::t975(4) * std::sqrt(ss / 4.0) / std::sqrt(5.0)) < 1e-9);
  for (int n = 2; n <= 5; ++n) {
    std::vector<double> v;
    for (int i = 0; i < n; ++i) v.push_back(i);
    double s = 0.0;
    const double m = (n - 1) / 2.0;
    for (double x : v) s += (x - m) * (x - m);
    CHECK(std::abs(aggregate_runs(v).ci95 - oracle::t975(n - 1) * std::sqrt(s / (n - 1)) / std::sqrt(n)) < 1e-9);
  }
  CHECK_THROWS_AS(aggregate_runs({0.5}), ContractError);
}

TEST_CASE("detection matching") {
  const std::vector<Annotation> gt{{0, Box{0, 0, 10, 10}, false}};
  CHECK(match_detections_to_gt({det(0, Box{0, 0, 10, 9}, 0.9)}, gt) == std::vector<MatchFlag>{MatchFlag::true_positive});
  CHECK(match_detections_to_gt({det(0, Box{0, 0, 10, 9}, 0.9), det(0, Box{0, 0, 10, 8}, 0.8)}, gt) ==
        std::vector<MatchFlag>{MatchFlag::true_positive, MatchFlag::false_positive});
  CHECK(match_detections_to_gt({det(1, Box{0, 0, 10, 10}, 0.9)}, gt) == std::vector<MatchFlag>{MatchFlag::false_positive});
  CHECK(match_detections_to_gt({det(0, Box{5, 5, 15, 15}, 0.9)}, gt) == std::vector<MatchFlag>{MatchFlag::false_positive});

  // The better-overlapping of two free boxes is taken.
  const std::vector<Annotation> two{{0, Box{0, 0, 10, 10}, false}, {0, Box{1, 0, 11, 10}, false}};
  const auto flags = match_detections_to_gt({det(0, Box{1, 0, 11, 10}, 0.9), det(0, Box{0, 0, 10, 10}, 0.8)}, two);
  CHECK(flags == std::vector<MatchFlag>{MatchFlag::true_positive, MatchFlag::true_positive});

  const std::vector<Annotation> hard{{0, Box{0, 0, 10, 10}, true}};
  CHECK(match_detections_to_gt({det(0, Box{0, 0, 10, 10}, 0.9)}, hard) == std::vector<MatchFlag>{MatchFlag::ignored});

  CHECK_THROWS_AS(match_detections_to_gt({det(0, Box{0, 0, 1, 1}, 0.1), det(0, Box{0, 0, 1, 1}, 0.9)}, gt), ContractError);
}

TEST_CASE("matching property: each ground truth matched at most once") {
  test::Gen g(8);
  for (int t = 0; t < 300; ++t) {
    std::vector<Annotation> gt;
    for (int i = 0, n = g.integer(0, 5); i < n; ++i) gt.push_back({g.integer(0, 2), g.box(64), false});
    DetectionSet d;
    for (int i = 0, n = g.integer(0, 10); i < n; ++i) d.push_back(det(g.integer(0, 2), g.box(64), g.uniform(0, 1)));
    std::stable_sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
    const auto flags = match_detections_to_gt(d, gt);
    int tp = 0;
    for (MatchFlag f : flags) tp += f == MatchFlag::true_positive;
    CHECK(tp <= static_cast<int>(gt.size()));
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (flags[i] != MatchFlag::true_positive) continue;
      bool any = false;
      for (const Annotation& a : gt) any |= a.class_id == d[i].class_id && iou(a.box, d[i].box) >= 0.5;
      CHECK(any);
    }
  }
}

TEST_CASE("per-class AP over images") {
  std::vector<ImageRecord> records(2);
  for (int i = 0; i < 2; ++i) {
    records[i].image_id = "i" + std::to_string(i);
    records[i].image = Image{32, 32, std::vector<float>(32 * 32 * 3, 0.0f)};
  }
  records[0].annotations = {{0, Box{0, 0, 10, 10}, false}, {1, Box{20, 20, 30, 30}, false}, {1, Box{0, 20, 8, 30}, true}};
  records[1].annotations = {{0, Box{5, 5, 15, 15}, false}};
  const DatasetIndex ds({"a", "b", "c"}, records);
  const std::vector<ScoredImage> scored{
      {"i0", {det(0, Box{0, 0, 10, 10}, 0.9), det(1, Box{0, 20, 8, 30}, 0.95), det(1, Box{20, 20, 30, 30}, 0.4)}},
      {"i1", {det(0, Box{20, 20, 30, 30}, 0.95), det(0, Box{5, 5, 15, 15}, 0.3)}}};
  const auto ap = per_class_average_precision(scored, ds, {0, 1, 2});
  CHECK(ap.count(2) == 0);
  // Class 0 ranking: FP (0.95), TP (0.9), TP (0.3) over 2 gt.
  CHECK(ap.at(0) == oracle::envelope_ap({false, true, true}, 2));
  // The difficult match is ignored, leaving one TP.
  CHECK(ap.at(1) == 1.0);
}

TEST_CASE("reports round trip") {
  const auto reports = fake_reports(3);
  std::stringstream s;
  write_reports(s, reports);
  const auto back = read_reports(s);
  REQUIRE(back.size() == reports.size());
  for (std::size_t i = 0; i < reports.size(); ++i) {
    CHECK(back[i].split == reports[i].split);
    CHECK(back[i].shots == reports[i].shots);
    CHECK(back[i].run == reports[i].run);
    CHECK(back[i].run_seed == reports[i].run_seed);
    CHECK(back[i].per_class_ap == reports[i].per_class_ap);
    CHECK(back[i].map == reports[i].map);
  }
  std::stringstream again;
  write_reports(again, back);
  std::stringstream first;
  write_reports(first, reports);
  CHECK(again.str() == first.str());

  std::stringstream bad("split\tshots\nnonsense line\n");
  CHECK_THROWS(read_reports(bad));
  CHECK_THROWS_AS(load_reports("/nonexistent/reports.tsv"), ReportError);
}

TEST_CASE("summary rows") {
  const auto rows = summarize_reports(fake_reports(5));
  REQUIRE(rows.size() == 8);
  CHECK(rows[0].run_maps.size() == 5);
  CHECK(rows[0].aggregate.ci95 > 0.0);
  std::stringstream with;
  write_summary(with, rows);
  CHECK(with.str().find("ci95") != std::string::npos);

  const auto single = summarize_reports(fake_reports(1));
  std::stringstream without;
  write_summary(without, single);
  CHECK(without.str().find("ci95") == std::string::npos);
  CHECK(single[0].aggregate.ci95 == 0.0);
}

TEST_CASE("ablation table") {
  std::map<std::string, std::vector<EvalReport>> reports;
  for (const std::string& c : kAblationConfigs) reports[c] = fake_reports(2);
  CHECK(kAblationConfigs == std::vector<std::string>{"baseline", "hem", "hem_ma", "hem_ma_bc"});
  const auto cells = ablation_table(reports, kAblationConfigs, {"train", "test"}, {1, 3, 5, 10});
  CHECK(cells.size() == 32);
  std::set<std::tuple<std::string, std::string, int>> keys;
  for (const AblationCell& c : cells) {
    keys.emplace(c.config, c.split, c.shots);
    CHECK(c.aggregate.mean == aggregate_runs(c.run_maps).mean);
  }
  CHECK(keys.size() == 32);
  std::stringstream csv;
  write_ablation_csv(csv, cells);
  std::string line;
  int lines = 0;
  std::getline(csv, line);
  CHECK(line == "config,split,shots,mean_map,ci95");
  while (std::getline(csv, line)) ++lines;
  CHECK(lines == 32);

  std::map<std::string, std::vector<EvalReport>> single;
  for (const std::string& c : kAblationConfigs) single[c] = fake_reports(1);
  std::stringstream one;
  write_ablation_csv(one, ablation_table(single, kAblationConfigs, {"train", "test"}, {1, 3, 5, 10}));
  std::getline(one, line);
  CHECK(line == "config,split,shots,mean_map");

  auto missing = reports;
  missing["hem"].pop_back();
  CHECK_NOTHROW(ablation_table(missing, kAblationConfigs, {"train", "test"}, {1, 3, 5, 10}));
  std::erase_if(missing["hem"], [](const EvalReport& r) { return r.split == "test" && r.shots == 10; });
  CHECK_THROWS_WITH_AS(ablation_table(missing, kAblationConfigs, {"train", "test"}, {1, 3, 5, 10}),
                       doctest::Contains("hem/test/10"), ReportError);
  missing.erase("baseline");
  CHECK_THROWS_AS(ablation_table(missing, kAblationConfigs, {"train"}, {1}), ReportError);
}

TEST_CASE("k-shot protocol keeps supports out of scoring") {
  SynthConfig sc;
  sc.num_images = 30;
  sc.seed = 12;
  const DatasetIndex ds = generate_synthetic_dataset(sc);
  const ImageSplit split = split_images(ds, 0.0 + 0.1, 0.5);
  const Detector<float> model{ModelConfig{}};
  const EvalReport r = evaluate_split(model, ds, split.eval, {5, 6}, "test", 1, 0, 77, EvalSettings{0.5, 0.0});
  const std::set<std::string> pool(split.eval.begin(), split.eval.end());
  std::set<std::string> scored(r.scored_images.begin(), r.scored_images.end());
  for (const std::string& s : r.support_images) {
    CHECK(pool.count(s) == 1);
    CHECK(scored.count(s) == 0);
  }
  for (const std::string& s : scored) CHECK(pool.count(s) == 1);
  CHECK(r.support_images.size() + r.scored_images.size() == split.eval.size());
  CHECK(r.map == mean_ap(r.per_class_ap));
  for (const auto& [c, ap] : r.per_class_ap) {
    CHECK((c == 5 || c == 6));
    CHECK(ap >= 0.0);
    CHECK(ap <= 1.0);
  }
  const EvalReport again = evaluate_split(model, ds, split.eval, {5, 6}, "test", 1, 0, 77, EvalSettings{0.5, 0.0});
  CHECK(again.map == r.map);
  CHECK(again.support_images == r.support_images);
}

}  // TEST_SUITE
