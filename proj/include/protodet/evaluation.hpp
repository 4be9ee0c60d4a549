#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "protodet/dataio.hpp"
#include "protodet/detector.hpp"

namespace protodet {

constexpr double kDefaultEvalIou = 0.5;

enum class MatchFlag { true_positive, false_positive, ignored };

/// Greedy VOC matching. `detections` must be sorted by descending score.
/// Detections landing on a difficult box are flagged `ignored`.
std::vector<MatchFlag> match_detections_to_gt(const DetectionSet& detections,
                                              const std::vector<Annotation>& gt,
                                              double iou_threshold = kDefaultEvalIou);

/// All-point interpolated AP over a ranked TP/FP list (true = TP).
/// Throws ContractError when num_gt is 0.
double average_precision(const std::vector<bool>& ranked_tp, int num_gt);

/// Unweighted mean. Throws ContractError when empty.
double mean_ap(const std::map<int, double>& per_class_ap);

struct RunAggregate {
  double mean = 0.0;
  double ci95 = 0.0;  // half-width
};

/// Mean with a Student-t 95% half-width (n - 1 degrees of freedom).
RunAggregate aggregate_runs(const std::vector<double>& values);

struct PRCurve {
  std::vector<bool> ranked_tp;
  std::vector<double> precision;
  std::vector<double> recall;
  int num_gt = 0;
};

PRCurve pr_curve(const std::vector<bool>& ranked_tp, int num_gt);

struct EvalReport {
  std::string split;
  int shots = 0;
  int run = 0;
  std::uint64_t run_seed = 0;
  std::map<int, double> per_class_ap;
  double map = 0.0;
  std::vector<std::string> support_images;
  std::vector<std::string> scored_images;
};

struct ScoredImage {
  std::string image_id;
  DetectionSet detections;
};

/// AP per class from per-image detections (any order) and ground truth;
/// classes without non-difficult ground truth are skipped.
std::map<int, double> per_class_average_precision(const std::vector<ScoredImage>& images,
                                                  const DatasetIndex& dataset,
                                                  const std::vector<int>& classes,
                                                  double iou_threshold = kDefaultEvalIou);

struct EvalSettings {
  double iou_threshold = kDefaultEvalIou;
  double score_threshold = 0.5;
};

/// k-shot protocol on one class split: prototypes from k exemplars per class
/// sampled from `images` with `run_seed`, then every remaining image of
/// `images` is scored.
EvalReport evaluate_split(const Detector<float>& detector, const DatasetIndex& dataset,
                          const std::vector<std::string>& images, const std::vector<int>& classes,
                          const std::string& split_name, int shots, int run, std::uint64_t run_seed,
                          const EvalSettings& settings = {});

/// One record per class per run: `split shots run seed class ap`, tab separated,
/// with class `mean` for the mAP row.
void write_reports(std::ostream& out, const std::vector<EvalReport>& reports);
std::vector<EvalReport> read_reports(std::istream& in);
void save_reports(const std::vector<EvalReport>& reports, const std::filesystem::path& path);
std::vector<EvalReport> load_reports(const std::filesystem::path& path);

struct SummaryRow {
  std::string split;
  int shots = 0;
  std::vector<double> run_maps;
  RunAggregate aggregate;  // ci95 is 0 for a single run
};

std::vector<SummaryRow> summarize_reports(const std::vector<EvalReport>& reports);
/// `split shots runs mean_map [ci95]`; the CI column is dropped when every
/// row has a single run.
void write_summary(std::ostream& out, const std::vector<SummaryRow>& rows);

// ---------------------------------------------------------------------------
// Ablation table

extern const std::vector<std::string> kAblationConfigs;  // baseline, hem, hem_ma, hem_ma_bc

struct AblationCell {
  std::string config;
  std::string split;
  int shots = 0;
  std::vector<double> run_maps;
  RunAggregate aggregate;
};

/// Collects every (config, split, shot) cell from the stored reports of each
/// config. Throws ReportError naming the first missing cell.
std::vector<AblationCell> ablation_table(const std::map<std::string, std::vector<EvalReport>>& reports,
                                         const std::vector<std::string>& configs,
                                         const std::vector<std::string>& splits,
                                         const std::vector<int>& shots);

/// CSV `config,split,shots,mean_map,ci95`; ci95 omitted when runs == 1.
void write_ablation_csv(std::ostream& out, const std::vector<AblationCell>& cells);

}  // namespace protodet
