#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "protodet/dataio.hpp"
#include "protodet/detector.hpp"
#include "protodet/episodes.hpp"
#include "protodet/evaluation.hpp"
#include "protodet/geometry.hpp"
#include "protodet/kv.hpp"
#include "protodet/protospace.hpp"

namespace protodet {

struct TrainConfig {
  int n_way = 3;
  int k_shot = 1;
  int query_per_class = kDefaultQueryImagesPerClass;
  int batch_size = 2;  // query images per optimizer step
  double learning_rate = 1e-4;
  int max_iterations = 30000;  // episodes

  bool hem = false;
  bool ma = false;
  bool bc = false;
  bool hem_rpn = true;
  bool hem_head = true;

  double alpha = kDefaultAlpha;
  int ma_warmup = 200;  // leading episodes trained with fresh prototypes before MA kicks in
  double lambda_bc = 0.1;
  int bc_clusters = 16;
  double bc_margin = kDefaultTripletMargin;
  int bc_kmeans_iters = 20;
  int bc_triplets_per_anchor = 1;

  int rpn_batch = 256;
  double rpn_positive_fraction = 0.5;
  int rpn_hard_negatives = 32;
  int head_batch = 128;
  double head_positive_fraction = 0.25;
  int head_hard_negatives = 16;
  double head_fg_iou = 0.5;
  double head_bg_iou = 0.5;
  double log_eps = 1e-8;

  std::uint64_t seed = 0;
  int eval_every = 500;
  int patience = 0;  // evaluations without improvement; 0 disables
  int val_shots = 3;
  int val_runs = 1;

  void validate() const;
  void write(KeyValues& kv) const;
  /// Reads only the keys it knows; pair with KeyValues::reject_unknown.
  static TrainConfig read(const KeyValues& kv);
  /// `baseline`, `hem`, `hem_ma` or `hem_ma_bc`.
  std::string flag_name() const;
};

/// Parses a flat config file holding model and training keys. Unknown keys
/// raise ConfigError.
std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path);
std::pair<ModelConfig, TrainConfig> parse_config(const std::string& text);
std::string format_config(const ModelConfig& model, const TrainConfig& train);

// ---------------------------------------------------------------------------
// Losses

struct LossBundle {
  double rpn_reg = 0.0;
  double rpn_obj = 0.0;
  double head_reg = 0.0;
  double head_cls = 0.0;
  double bg_cluster = 0.0;
  double lambda_bc = 0.0;
  double total = 0.0;

  /// Sets total from the components.
  void finalize();
};

/// Which sample an individual loss value belongs to.
enum class LossTerm { rpn_obj, rpn_reg, head_cls, head_reg, bg_cluster };

struct LossContribution {
  LossTerm term;
  MatchLabel kind;  // positive / negative / hard_negative; negative for bg_cluster
  std::size_t image;
  std::size_t index;  // anchor index, proposal slot or triplet slot
  double value;       // unnormalized per-sample loss
};

struct RpnSample {
  std::size_t anchor = 0;
  MatchLabel kind = MatchLabel::negative;
  BoxDeltas target;  // positives only
};

struct HeadSample {
  Box box;
  MatchLabel kind = MatchLabel::negative;
  int label = kBackgroundLabel;
  BoxDeltas target;  // positives only
};

/// Per-term losses on one sampled mini-batch of anchors. `objectness` and
/// `deltas` are indexed like `samples`.
struct RpnLossResult {
  double reg = 0.0;
  double obj = 0.0;
  std::vector<double> grad_objectness;
  std::vector<BoxDeltas> grad_deltas;
};

/// obj: mean BCE over all samples (hard negatives have target 0);
/// reg: mean smooth-L1 over positives (0 without positives).
RpnLossResult rpn_losses(const std::vector<RpnSample>& samples, const std::vector<double>& objectness,
                         const std::vector<BoxDeltas>& deltas, double eps = 1e-8);

struct HeadLossResult {
  double reg = 0.0;
  double cls = 0.0;
  std::vector<BoxDeltas> grad_deltas;
};

/// cls: mean -log posterior(true label) with clamp at eps; reg: mean smooth-L1
/// over positives.
HeadLossResult head_losses(const std::vector<HeadSample>& samples,
                           const std::vector<ClassPosterior>& posteriors,
                           const std::vector<BoxDeltas>& deltas, double eps = 1e-8);

struct ClusterLossResult {
  double loss = 0.0;
  std::vector<Triplet> triplets;
  std::vector<Vector> grad;  // per negative embedding
};

/// K-means pseudo-labels, mined triplets, mean triplet loss. Returns 0 when
/// there are fewer negatives than clusters or no triplet exists.
ClusterLossResult background_cluster_loss(const std::vector<Embedding>& negatives, int k, double margin,
                                          std::uint64_t seed, int kmeans_iters = 20, int per_anchor = 1);
/// Same loss over fixed triplets.
ClusterLossResult triplet_set_loss(const std::vector<Embedding>& negatives, const std::vector<Triplet>& triplets,
                                   double margin);

// ---------------------------------------------------------------------------
// One optimization step

/// Moving-average prototypes kept across steps and episodes.
struct PrototypeStore {
  std::map<int, Embedding> rpn;
  std::map<int, Embedding> head;
};

struct QueryPlan {
  std::string image_id;
  std::vector<RpnSample> rpn;
  std::vector<HeadSample> head;
};

/// Every sampling decision of a step. Replaying a plan makes the step a
/// deterministic function of the weights.
struct StepPlan {
  std::vector<int> classes;
  std::vector<SupportExample> support;
  std::vector<QueryPlan> queries;
  /// Easy head negatives used for clustering, as (query, head slot).
  std::vector<std::pair<std::size_t, std::size_t>> bc_negatives;
  std::vector<Triplet> triplets;
};

struct StepResult {
  LossBundle losses;
  std::vector<LossContribution> contributions;
  StepPlan plan;
  PrototypeBank bank;  // prototypes fed to scoring
  /// Unit embeddings of the active samples, per query image.
  std::vector<std::vector<Embedding>> rpn_embeddings;
  std::vector<std::vector<Embedding>> head_embeddings;
  std::size_t positives = 0;
};

struct StepOptions {
  bool backward = true;
  /// Replays this plan instead of sampling.
  const StepPlan* frozen = nullptr;
};

/// Forward pass (and backward when requested) over a batch of query images.
/// Gradients accumulate into the detector's parameters; the caller zeroes
/// them and applies the optimizer. The store is read, not updated.
template <typename T>
StepResult run_step(Detector<T>& detector, const DatasetIndex& dataset, const EpisodeTask& episode,
                    const std::vector<std::size_t>& query_indices, const PrototypeStore& store,
                    const TrainConfig& config, std::uint64_t step_seed, const StepOptions& options = {});

/// Folds the prototypes used by a step into the store (MA only).
void update_store(PrototypeStore& store, const PrototypeBank& used);

// ---------------------------------------------------------------------------
// Loop

struct MetricRecord {
  int iteration = 0;
  LossBundle losses;  // mean over the steps since the previous record
  double val_map = -1.0;
  std::optional<double> test_map;
};

std::string format_metric(const MetricRecord& record);

struct FitResult {
  int iterations = 0;
  int best_iteration = 0;
  double best_val_map = -1.0;
  bool stopped_early = false;
  std::vector<MetricRecord> metrics;
};

struct FitOptions {
  std::vector<int> train_classes;
  std::vector<std::string> train_images;
  std::vector<std::string> val_images;
  std::filesystem::path metric_log;       // optional
  std::filesystem::path best_checkpoint;  // optional
  std::filesystem::path last_checkpoint;  // optional
  /// Optional held-out scoring at each evaluation, logged as test_map.
  std::function<double(const Detector<float>&)> test_probe;
  EvalSettings val_settings;
};

class Trainer {
 public:
  Trainer(Detector<float>& detector, const DatasetIndex& dataset, TrainConfig config);

  /// All query images of one episode in batches of config.batch_size.
  std::vector<LossBundle> train_episode(const EpisodeTask& episode);

  /// Episodic training with validation-based model selection. On return the
  /// detector holds the best-validation weights.
  FitResult fit(const FitOptions& options);

  double validate(const std::vector<int>& classes, const std::vector<std::string>& images,
                  const EvalSettings& settings = {}) const;

  const PrototypeStore& store() const { return store_; }
  long steps() const { return optimizer_.steps(); }
  int episodes() const { return episodes_; }
  const TrainConfig& config() const { return config_; }

 private:
  Detector<float>& detector_;
  const DatasetIndex& dataset_;
  TrainConfig config_;
  nn::Adam<float> optimizer_;
  PrototypeStore store_;
  int episodes_ = 0;
};

}  // namespace protodet
