#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "protodet/dataio.hpp"
#include "protodet/episodes.hpp"
#include "protodet/geometry.hpp"
#include "protodet/kv.hpp"
#include "protodet/nn/layers.hpp"
#include "protodet/protospace.hpp"

namespace protodet {

struct ModelConfig {
  int embedding_dim = kDefaultEmbeddingDim;
  /// Output channels per backbone stage; stage i has stride 2^(i+1).
  std::vector<int> backbone_channels = {16, 32, 64, 64};
  /// Number of trailing stages exposed as pyramid levels.
  int pyramid_levels = 2;
  int rpn_channels = 32;
  int rpn_hidden = 128;
  int rpn_pool = 3;
  int head_hidden = 128;
  int head_pool = 7;
  /// One anchor size per pyramid level, shared ratios.
  std::vector<double> anchor_sizes = {20.0, 40.0};
  std::vector<double> anchor_ratios = {0.5, 1.0, 2.0};
  int train_proposals = 256;
  int test_proposals = 300;
  double rpn_nms = 0.7;
  double head_nms = 0.5;
  double score_threshold = 0.5;
  double min_box_size = 2.0;
  double sigma = kDefaultSigma;
  std::uint64_t init_seed = 0;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  AnchorRecipe anchor_recipe() const;
  std::vector<int> level_strides() const;
  int largest_stride() const;

  void write(KeyValues& kv) const;
  static ModelConfig read(const KeyValues& kv);
};

template <typename T>
struct FeaturePyramid {
  std::vector<nn::Tensor3<T>> levels;  // finest first
  std::vector<int> strides;
};

/// Proposals ranked by descending objectness.
struct ProposalSet {
  std::vector<Box> boxes;
  std::vector<double> objectness;
  std::vector<Embedding> rpn_embeddings;
  std::vector<std::size_t> anchors;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0.0;
  Box proposal;
  Embedding embedding;
};

using DetectionSet = std::vector<Detection>;

/// All anchors' RPN outputs for one image.
struct RpnOutput {
  AnchorGrid anchors;
  std::vector<Embedding> embeddings;
  std::vector<BoxDeltas> deltas;
};

struct HeadOutput {
  std::vector<Embedding> embeddings;
  std::vector<BoxDeltas> deltas;
};

/// Objectness against the RPN prototypes, decoding, clipping, small-box
/// filtering, NMS, and truncation to `top_n`.
ProposalSet select_proposals(const RpnOutput& rpn, const PrototypeBank& bank, int top_n,
                             double nms_threshold, const ImageBounds& bounds,
                             double min_box_size = 0.0);

/// Two-stage detector whose classifiers are replaced by embedding branches
/// scored against class prototypes. T is float for training and double for
/// gradient checks.
template <typename T>
class Detector {
 public:
  explicit Detector(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  std::vector<nn::Parameter<T>*> parameters();
  std::size_t parameter_count();
  void zero_grad();

  // -- Tapes for the trainable path ---------------------------------------

  struct BackboneTape {
    nn::Tensor3<T> input;
    std::vector<typename nn::Conv2d<T>::Tape> convs;
    std::vector<nn::Tensor3<T>> outputs;  // post-ReLU
  };

  struct RpnTape {
    std::vector<typename nn::Conv2d<T>::Tape> conv1, conv2, deltas;
    std::vector<nn::Tensor3<T>> hidden;  // post-ReLU conv1 per level
  };

  struct RpnMaps {
    std::vector<nn::Tensor3<T>> shared;  // post-ReLU conv2 per level
    std::vector<nn::Tensor3<T>> deltas;  // 4 * anchors_per_cell channels
  };

  /// Forward state of one image plus gradient accumulators.
  struct ImagePass {
    BackboneTape backbone;
    FeaturePyramid<T> features;
    RpnTape rpn_tape;
    RpnMaps maps;
    AnchorGrid anchors;
    ImageBounds bounds;
    std::vector<nn::Tensor3<T>> grad_features;
    std::vector<nn::Tensor3<T>> grad_shared;
    std::vector<nn::Tensor3<T>> grad_deltas;
  };

  struct BranchTape {
    std::vector<int> levels;
    std::vector<nn::RoI> rois;
    nn::Matrix<T> pooled;
    std::vector<nn::Matrix<T>> activations;  // post-ReLU hidden layers
    nn::Matrix<T> shared;                    // head only
  };

  // -- Forward pieces -----------------------------------------------------

  nn::Tensor3<T> image_tensor(const Image& image) const;
  FeaturePyramid<T> extract_features(const Image& image, BackboneTape* tape = nullptr) const;
  std::vector<FeaturePyramid<T>> extract_features(std::span<const Image> batch) const;
  RpnMaps rpn_maps(const FeaturePyramid<T>& features, RpnTape* tape = nullptr) const;
  AnchorGrid anchors_for(const FeaturePyramid<T>& features) const;

  /// Pyramid level whose anchor size is closest (log scale) to the box.
  int level_for_box(const Box& box) const;

  /// Raw (unnormalized) RPN embeddings for boxes pooled on given levels.
  nn::Matrix<T> rpn_branch(const RpnMaps& maps, std::span<const Box> boxes,
                           std::span<const int> levels, BranchTape* tape = nullptr) const;
  /// Raw head embeddings (first) and refinement deltas (second).
  std::pair<nn::Matrix<T>, nn::Matrix<T>> head_branch(const FeaturePyramid<T>& features,
                                                      std::span<const Box> boxes,
                                                      BranchTape* tape = nullptr) const;

  // -- Inference API ------------------------------------------------------

  RpnOutput rpn_embed(const FeaturePyramid<T>& features) const;
  /// RPN outputs for every anchor from precomputed maps (no tape).
  RpnOutput rpn_output(const RpnMaps& maps, const AnchorGrid& anchors) const;

  /// Location of a flat anchor index inside the delta maps.
  struct AnchorSlot {
    int level, y, x, channel;  // channel of dx; dy..dh follow
  };
  AnchorSlot anchor_slot(const AnchorGrid& anchors, std::size_t flat_index) const;
  HeadOutput head_embed(const FeaturePyramid<T>& features, std::span<const Box> boxes) const;

  struct SupportEmbedding {
    Embedding rpn;
    Embedding head;
  };
  SupportEmbedding embed_support(const Image& image, const Box& box) const;

  /// Prototypes from support exemplars (no moving average).
  PrototypeBank build_bank(const DatasetIndex& dataset, const std::vector<SupportExample>& support) const;

  DetectionSet detect(const Image& image, const PrototypeBank& bank) const;
  DetectionSet detect(const Image& image, const PrototypeBank& bank, double score_threshold) const;

  // -- Trainable path -----------------------------------------------------

  ImagePass begin_pass(const Image& image) const;
  void rpn_branch_backward(const BranchTape& tape, const nn::Matrix<T>& grad_raw, ImagePass& pass);
  void head_branch_backward(const BranchTape& tape, const nn::Matrix<T>& grad_raw,
                            const nn::Matrix<T>& grad_deltas, ImagePass& pass);
  /// Backpropagates the accumulated map gradients into the weights.
  void finish_pass(ImagePass& pass);

 private:
  void build_layers();

  ModelConfig config_;
  std::vector<nn::Conv2d<T>> backbone_;
  std::vector<int> stage_end_;  // index of the last conv of each stage
  nn::Conv2d<T> rpn_conv1_, rpn_conv2_, rpn_deltas_;
  nn::Linear<T> rpn_fc1_, rpn_fc2_;
  nn::Linear<T> head_fc1_, head_fc2_, head_fc3_, head_fc4_, head_reg_;
  nn::RoIAlign<T> rpn_pool_;
  nn::RoIAlign<T> head_pool_;
};

extern template class Detector<float>;
extern template class Detector<double>;

/// Converts a raw embedding row to a unit-norm embedding; returns the raw norm.
template <typename T>
Embedding to_embedding(const nn::Matrix<T>& rows, Eigen::Index row, double* raw_norm = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints

constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  std::vector<std::pair<std::string, std::vector<double>>> weights;
  PrototypeBank bank;
  /// Free-form metadata (iteration, flags); stored as key-values.
  KeyValues meta;
};

template <typename T>
Checkpoint make_checkpoint(Detector<T>& detector, const PrototypeBank& bank, KeyValues meta = {});

template <typename T>
void load_weights(Detector<T>& detector, const Checkpoint& checkpoint);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace protodet
