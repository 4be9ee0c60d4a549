#include "protodet/evaluation.hpp"

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "protodet/episodes.hpp"
#include "protodet/errors.hpp"
#include "protodet/kv.hpp"

namespace protodet {

std::vector<MatchFlag> match_detections_to_gt(const DetectionSet& detections,
                                              const std::vector<Annotation>& gt, double iou_threshold) {
  std::vector<MatchFlag> flags(detections.size(), MatchFlag::false_positive);
  std::vector<bool> used(gt.size(), false);
  for (std::size_t d = 0; d < detections.size(); ++d) {
    if (d > 0 && detections[d].score > detections[d - 1].score) {
      throw ContractError("detections are not sorted by descending score");
    }
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gt.size(); ++g) {
      if (used[g] || gt[g].class_id != detections[d].class_id) continue;
      const double v = iou(detections[d].box, gt[g].box);
      if (v >= iou_threshold && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best < 0) continue;
    used[static_cast<std::size_t>(best)] = true;
    flags[d] = gt[static_cast<std::size_t>(best)].difficult ? MatchFlag::ignored : MatchFlag::true_positive;
  }
  return flags;
}

PRCurve pr_curve(const std::vector<bool>& ranked_tp, int num_gt) {
  if (num_gt <= 0) throw ContractError("precision/recall needs at least one ground truth box");
  PRCurve curve;
  curve.ranked_tp = ranked_tp;
  curve.num_gt = num_gt;
  int tp = 0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    if (ranked_tp[i]) ++tp;
    curve.precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    curve.recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  if (tp > num_gt) throw ContractError("more true positives than ground truth boxes");
  return curve;
}

double average_precision(const std::vector<bool>& ranked_tp, int num_gt) {
  const PRCurve curve = pr_curve(ranked_tp, num_gt);
  // Envelope: precision at each TP rank replaced by the best precision at or
  // after it; each TP adds 1/num_gt of recall.
  std::vector<double> envelope(curve.precision.size());
  double best = 0.0;
  for (std::size_t i = envelope.size(); i-- > 0;) {
    best = std::max(best, curve.precision[i]);
    envelope[i] = best;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < ranked_tp.size(); ++i) {
    if (ranked_tp[i]) sum += envelope[i];
  }
  return sum / static_cast<double>(num_gt);
}

double mean_ap(const std::map<int, double>& per_class_ap) {
  if (per_class_ap.empty()) throw ContractError("mean AP over no classes");
  double sum = 0.0;
  for (const auto& [_, ap] : per_class_ap) sum += ap;
  return sum / static_cast<double>(per_class_ap.size());
}

RunAggregate aggregate_runs(const std::vector<double>& values) {
  if (values.size() < 2) throw ContractError("confidence interval needs at least two runs");
  const double n = static_cast<double>(values.size());
  // Deviations about the first value keep identical runs at exactly zero spread.
  const double shift = values.front();
  double sum = 0.0;
  for (double v : values) sum += v - shift;
  const double mean_dev = sum / n;
  double ss = 0.0;
  for (double v : values) ss += (v - shift - mean_dev) * (v - shift - mean_dev);
  const double mean = shift + mean_dev;
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(dist, 0.975);
  return {mean, t * sd / std::sqrt(n)};
}

std::map<int, double> per_class_average_precision(const std::vector<ScoredImage>& images,
                                                  const DatasetIndex& dataset,
                                                  const std::vector<int>& classes, double iou_threshold) {
  struct Ranked {
    double score;
    std::size_t image;
    std::size_t rank;
    bool tp;
  };
  std::map<int, std::vector<Ranked>> ranked;
  std::map<int, int> num_gt;
  const std::set<int> wanted(classes.begin(), classes.end());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const ImageRecord& record = dataset.record(images[i].image_id);
    for (const Annotation& a : record.annotations) {
      if (wanted.count(a.class_id) && !a.difficult) ++num_gt[a.class_id];
    }
    for (int c : classes) {
      DetectionSet dets;
      for (const Detection& d : images[i].detections) {
        if (d.class_id == c) dets.push_back(d);
      }
      std::stable_sort(dets.begin(), dets.end(),
                       [](const Detection& a, const Detection& b) { return a.score > b.score; });
      std::vector<Annotation> gt;
      for (const Annotation& a : record.annotations) {
        if (a.class_id == c) gt.push_back(a);
      }
      const auto flags = match_detections_to_gt(dets, gt, iou_threshold);
      for (std::size_t r = 0; r < dets.size(); ++r) {
        if (flags[r] == MatchFlag::ignored) continue;
        ranked[c].push_back(Ranked{dets[r].score, i, r, flags[r] == MatchFlag::true_positive});
      }
    }
  }
  std::map<int, double> out;
  for (int c : classes) {
    if (num_gt[c] == 0) continue;
    auto& list = ranked[c];
    std::sort(list.begin(), list.end(), [](const Ranked& a, const Ranked& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.rank < b.rank;
    });
    std::vector<bool> tp;
    for (const Ranked& r : list) tp.push_back(r.tp);
    out[c] = average_precision(tp, num_gt[c]);
  }
  return out;
}

EvalReport evaluate_split(const Detector<float>& detector, const DatasetIndex& dataset,
                          const std::vector<std::string>& images, const std::vector<int>& classes,
                          const std::string& split_name, int shots, int run, std::uint64_t run_seed,
                          const EvalSettings& settings) {
  const DatasetIndex pool = dataset.subset(images);
  const std::vector<SupportExample> support = build_support_set(pool, classes, shots, run_seed);
  EvalReport report;
  report.split = split_name;
  report.shots = shots;
  report.run = run;
  report.run_seed = run_seed;
  std::set<std::string> support_ids;
  for (const SupportExample& s : support) support_ids.insert(s.image_id);
  report.support_images.assign(support_ids.begin(), support_ids.end());

  const PrototypeBank bank = detector.build_bank(pool, support);
  std::vector<ScoredImage> scored;
  for (const std::string& id : images) {
    if (support_ids.count(id)) continue;
    report.scored_images.push_back(id);
    scored.push_back(ScoredImage{id, detector.detect(pool.record(id).image, bank, settings.score_threshold)});
  }
  report.per_class_ap = per_class_average_precision(scored, pool, classes, settings.iou_threshold);
  if (report.per_class_ap.empty()) {
    throw ReportError("split '" + split_name + "' has no ground truth among the scored images");
  }
  report.map = mean_ap(report.per_class_ap);
  return report;
}

// ---------------------------------------------------------------------------
// Report IO

void write_reports(std::ostream& out, const std::vector<EvalReport>& reports) {
  out << "split\tshots\trun\tseed\tclass\tap\n";
  for (const EvalReport& r : reports) {
    const std::string prefix =
        r.split + '\t' + std::to_string(r.shots) + '\t' + std::to_string(r.run) + '\t' + std::to_string(r.run_seed) + '\t';
    for (const auto& [c, ap] : r.per_class_ap) out << prefix << c << '\t' << format_double(ap) << '\n';
    out << prefix << "mean\t" << format_double(r.map) << '\n';
  }
}

std::vector<EvalReport> read_reports(std::istream& in) {
  std::vector<EvalReport> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 || line.empty()) continue;
    std::istringstream fields(line);
    std::string split, cls, ap_text;
    int shots = 0, run = 0;
    std::uint64_t seed = 0;
    if (!(fields >> split >> shots >> run >> seed >> cls >> ap_text)) {
      throw ParseError("malformed report record", line_no);
    }
    double ap = 0.0;
    try {
      ap = std::stod(ap_text);
    } catch (const std::exception&) {
      throw ParseError("bad AP value '" + ap_text + "'", line_no);
    }
    if (out.empty() || out.back().split != split || out.back().shots != shots || out.back().run != run) {
      out.push_back(EvalReport{split, shots, run, seed, {}, 0.0, {}, {}});
    }
    if (cls == "mean") {
      out.back().map = ap;
    } else {
      try {
        out.back().per_class_ap[std::stoi(cls)] = ap;
      } catch (const std::exception&) {
        throw ParseError("bad class '" + cls + "'", line_no);
      }
    }
  }
  return out;
}

void save_reports(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  write_reports(out, reports);
}

std::vector<EvalReport> load_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ReportError("missing evaluation report " + path.string());
  return read_reports(in);
}

std::vector<SummaryRow> summarize_reports(const std::vector<EvalReport>& reports) {
  std::map<std::pair<std::string, int>, std::vector<double>> grouped;
  std::vector<std::pair<std::string, int>> order;
  for (const EvalReport& r : reports) {
    const auto key = std::make_pair(r.split, r.shots);
    if (!grouped.count(key)) order.push_back(key);
    grouped[key].push_back(r.map);
  }
  std::vector<SummaryRow> rows;
  for (const auto& key : order) {
    SummaryRow row{key.first, key.second, grouped[key], {}};
    if (row.run_maps.size() >= 2) {
      row.aggregate = aggregate_runs(row.run_maps);
    } else {
      row.aggregate.mean = row.run_maps.front();
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows) {
  bool with_ci = false;
  for (const SummaryRow& r : rows) with_ci = with_ci || r.run_maps.size() > 1;
  out << "split\tshots\truns\tmean_map" << (with_ci ? "\tci95" : "") << '\n';
  for (const SummaryRow& r : rows) {
    out << r.split << '\t' << r.shots << '\t' << r.run_maps.size() << '\t' << format_double(r.aggregate.mean);
    if (with_ci) out << '\t' << format_double(r.aggregate.ci95);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------

const std::vector<std::string> kAblationConfigs = {"baseline", "hem", "hem_ma", "hem_ma_bc"};

std::vector<AblationCell> ablation_table(const std::map<std::string, std::vector<EvalReport>>& reports,
                                         const std::vector<std::string>& configs,
                                         const std::vector<std::string>& splits,
                                         const std::vector<int>& shots) {
  std::vector<AblationCell> cells;
  for (const std::string& config : configs) {
    auto it = reports.find(config);
    if (it == reports.end()) throw ReportError("no reports for config '" + config + "'");
    for (const std::string& split : splits) {
      for (int k : shots) {
        AblationCell cell{config, split, k, {}, {}};
        for (const EvalReport& r : it->second) {
          if (r.split == split && r.shots == k) cell.run_maps.push_back(r.map);
        }
        if (cell.run_maps.empty()) {
          throw ReportError("missing cell " + config + "/" + split + "/" + std::to_string(k) + "-shot");
        }
        if (cell.run_maps.size() >= 2) {
          cell.aggregate = aggregate_runs(cell.run_maps);
        } else {
          cell.aggregate.mean = cell.run_maps.front();
        }
        cells.push_back(std::move(cell));
      }
    }
  }
  return cells;
}

void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells) {
  bool with_ci = false;
  for (const AblationCell& c : cells) with_ci = with_ci || c.run_maps.size() > 1;
  out << "config,split,shots,mean_map" << (with_ci ? ",ci95" : "") << '\n';
  for (const AblationCell& c : cells) {
    out << c.config << ',' << c.split << ',' << c.shots << ',' << format_double(c.aggregate.mean);
    if (with_ci) out << ',' << format_double(c.aggregate.ci95);
    out << '\n';
  }
}

}  // namespace protodet
