#include "protodet/detector.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "protodet/errors.hpp"

namespace protodet {

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  if (embedding_dim <= 0) throw ConfigError("embedding_dim must be positive");
  if (backbone_channels.empty()) throw ConfigError("backbone needs at least one stage");
  for (int c : backbone_channels) {
    if (c <= 0) throw ConfigError("backbone channels must be positive");
  }
  if (pyramid_levels <= 0 || pyramid_levels > static_cast<int>(backbone_channels.size())) {
    throw ConfigError("pyramid_levels must be in [1, number of stages]");
  }
  const int top = backbone_channels.back();
  for (std::size_t i = backbone_channels.size() - static_cast<std::size_t>(pyramid_levels);
       i < backbone_channels.size(); ++i) {
    if (backbone_channels[i] != top) {
      throw ConfigError("pyramid stages must share one channel count");
    }
  }
  if (static_cast<int>(anchor_sizes.size()) != pyramid_levels) {
    throw ConfigError("anchor_sizes needs one size per pyramid level");
  }
  if (anchor_ratios.empty()) throw ConfigError("anchor_ratios must not be empty");
  for (double s : anchor_sizes) {
    if (!(s > 0)) throw ConfigError("anchor sizes must be positive");
  }
  for (double r : anchor_ratios) {
    if (!(r > 0)) throw ConfigError("anchor ratios must be positive");
  }
  if (rpn_channels <= 0 || rpn_hidden <= 0 || head_hidden <= 0 || rpn_pool <= 0 || head_pool <= 0) {
    throw ConfigError("branch sizes must be positive");
  }
  if (train_proposals <= 0 || test_proposals <= 0) throw ConfigError("proposal counts must be positive");
  if (!(sigma > 0)) throw ConfigError("sigma must be positive");
}

std::vector<int> ModelConfig::level_strides() const {
  std::vector<int> out;
  const int stages = static_cast<int>(backbone_channels.size());
  for (int s = stages - pyramid_levels; s < stages; ++s) out.push_back(1 << (s + 1));
  return out;
}

int ModelConfig::largest_stride() const { return 1 << backbone_channels.size(); }

AnchorRecipe ModelConfig::anchor_recipe() const {
  AnchorRecipe recipe;
  const auto strides = level_strides();
  for (std::size_t l = 0; l < strides.size(); ++l) {
    recipe.levels.push_back(LevelRecipe{strides[l], {anchor_sizes[l]}, anchor_ratios});
  }
  return recipe;
}

void ModelConfig::write(KeyValues& kv) const {
  kv.set("embedding_dim", std::to_string(embedding_dim));
  kv.set("backbone_channels", join_ints(backbone_channels));
  kv.set("pyramid_levels", std::to_string(pyramid_levels));
  kv.set("rpn_channels", std::to_string(rpn_channels));
  kv.set("rpn_hidden", std::to_string(rpn_hidden));
  kv.set("rpn_pool", std::to_string(rpn_pool));
  kv.set("head_hidden", std::to_string(head_hidden));
  kv.set("head_pool", std::to_string(head_pool));
  kv.set("anchor_sizes", join_doubles(anchor_sizes));
  kv.set("anchor_ratios", join_doubles(anchor_ratios));
  kv.set("train_proposals", std::to_string(train_proposals));
  kv.set("test_proposals", std::to_string(test_proposals));
  kv.set("rpn_nms", format_double(rpn_nms));
  kv.set("head_nms", format_double(head_nms));
  kv.set("score_threshold", format_double(score_threshold));
  kv.set("min_box_size", format_double(min_box_size));
  kv.set("sigma", format_double(sigma));
  kv.set("init_seed", std::to_string(init_seed));
}

ModelConfig ModelConfig::read(const KeyValues& kv) {
  ModelConfig c;
  c.embedding_dim = kv.get_int("embedding_dim", c.embedding_dim);
  c.backbone_channels = kv.get_int_list("backbone_channels", c.backbone_channels);
  c.pyramid_levels = kv.get_int("pyramid_levels", c.pyramid_levels);
  c.rpn_channels = kv.get_int("rpn_channels", c.rpn_channels);
  c.rpn_hidden = kv.get_int("rpn_hidden", c.rpn_hidden);
  c.rpn_pool = kv.get_int("rpn_pool", c.rpn_pool);
  c.head_hidden = kv.get_int("head_hidden", c.head_hidden);
  c.head_pool = kv.get_int("head_pool", c.head_pool);
  c.anchor_sizes = kv.get_double_list("anchor_sizes", c.anchor_sizes);
  c.anchor_ratios = kv.get_double_list("anchor_ratios", c.anchor_ratios);
  c.train_proposals = kv.get_int("train_proposals", c.train_proposals);
  c.test_proposals = kv.get_int("test_proposals", c.test_proposals);
  c.rpn_nms = kv.get_double("rpn_nms", c.rpn_nms);
  c.head_nms = kv.get_double("head_nms", c.head_nms);
  c.score_threshold = kv.get_double("score_threshold", c.score_threshold);
  c.min_box_size = kv.get_double("min_box_size", c.min_box_size);
  c.sigma = kv.get_double("sigma", c.sigma);
  c.init_seed = static_cast<std::uint64_t>(kv.get_int64("init_seed", static_cast<long long>(c.init_seed)));
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

ProposalSet select_proposals(const RpnOutput& rpn, const PrototypeBank& bank, int top_n,
                             double nms_threshold, const ImageBounds& bounds, double min_box_size) {
  if (bank.empty()) throw ContractError("prototype bank is empty");
  bank.validate();
  const std::vector<Box> anchors = rpn.anchors.flat();
  if (anchors.size() != rpn.embeddings.size() || anchors.size() != rpn.deltas.size()) {
    throw ContractError("rpn output does not cover the anchors");
  }
  std::vector<ScoredBox> candidates;
  std::vector<std::size_t> source;
  candidates.reserve(anchors.size());
  for (std::size_t a = 0; a < anchors.size(); ++a) {
    double o = 0.0;
    for (const auto& [_, p] : bank.rpn) {
      o = std::max(o, gaussian_likelihood(rpn.embeddings[a].values(), p.vector.values(), bank.sigma));
    }
    const Box box = decode_deltas(anchors[a], rpn.deltas[a], bounds);
    if (box.width() < min_box_size || box.height() < min_box_size || !box.valid()) continue;
    candidates.push_back(ScoredBox{box, o});
    source.push_back(a);
  }
  const std::vector<std::size_t> kept = nms(candidates, nms_threshold);
  ProposalSet out;
  for (std::size_t i = 0; i < kept.size() && static_cast<int>(i) < top_n; ++i) {
    const std::size_t k = kept[i];
    out.boxes.push_back(candidates[k].box);
    out.objectness.push_back(candidates[k].score);
    out.rpn_embeddings.push_back(rpn.embeddings[source[k]]);
    out.anchors.push_back(source[k]);
  }
  return out;
}

template <typename T>
Embedding to_embedding(const nn::Matrix<T>& rows, Eigen::Index row, double* raw_norm) {
  Vector v(static_cast<std::size_t>(rows.cols()));
  for (Eigen::Index j = 0; j < rows.cols(); ++j) v[static_cast<std::size_t>(j)] = static_cast<double>(rows(row, j));
  if (raw_norm) *raw_norm = norm(v);
  return normalize(v);
}

template Embedding to_embedding<float>(const nn::Matrix<float>&, Eigen::Index, double*);
template Embedding to_embedding<double>(const nn::Matrix<double>&, Eigen::Index, double*);

// ---------------------------------------------------------------------------
// Detector

template <typename T>
Detector<T>::Detector(ModelConfig config)
    : config_(std::move(config)), rpn_pool_(config_.rpn_pool), head_pool_(config_.head_pool) {
  config_.validate();
  build_layers();
}

template <typename T>
void Detector<T>::build_layers() {
  Rng rng(config_.init_seed);
  int in = 3;
  for (std::size_t s = 0; s < config_.backbone_channels.size(); ++s) {
    const int c = config_.backbone_channels[s];
    const std::string name = "backbone.s" + std::to_string(s);
    backbone_.emplace_back(name + ".conv0", in, c, 3, 2, 1);
    if (s > 0) backbone_.emplace_back(name + ".conv1", c, c, 3, 1, 1);
    stage_end_.push_back(static_cast<int>(backbone_.size()) - 1);
    in = c;
  }
  for (auto& conv : backbone_) conv.init(rng);

  const int pc = config_.backbone_channels.back();
  const int rc = config_.rpn_channels;
  const int anchors_per_cell = static_cast<int>(config_.anchor_ratios.size());
  rpn_conv1_ = nn::Conv2d<T>("rpn.conv1", pc, rc, 3, 1, 1);
  rpn_conv2_ = nn::Conv2d<T>("rpn.conv2", rc, rc, 3, 1, 1);
  rpn_deltas_ = nn::Conv2d<T>("rpn.deltas", rc, 4 * anchors_per_cell, 1, 1, 0);
  rpn_fc1_ = nn::Linear<T>("rpn.fc1", rc * config_.rpn_pool * config_.rpn_pool, config_.rpn_hidden);
  rpn_fc2_ = nn::Linear<T>("rpn.fc2", config_.rpn_hidden, config_.embedding_dim);
  rpn_conv1_.init(rng);
  rpn_conv2_.init(rng);
  rpn_deltas_.init_normal(rng, 0.01);
  rpn_fc1_.init(rng);
  rpn_fc2_.init(rng);

  const int hh = config_.head_hidden;
  head_fc1_ = nn::Linear<T>("head.fc1", pc * config_.head_pool * config_.head_pool, hh);
  head_fc2_ = nn::Linear<T>("head.fc2", hh, hh);
  head_fc3_ = nn::Linear<T>("head.fc3", hh, hh);
  head_fc4_ = nn::Linear<T>("head.fc4", hh, config_.embedding_dim);
  head_reg_ = nn::Linear<T>("head.reg", hh, 4);
  head_fc1_.init(rng);
  head_fc2_.init(rng);
  head_fc3_.init(rng);
  head_fc4_.init(rng);
  head_reg_.init_normal(rng, 0.001);
}

template <typename T>
std::vector<nn::Parameter<T>*> Detector<T>::parameters() {
  std::vector<nn::Parameter<T>*> out;
  auto add = [&](auto& layer) {
    for (auto* p : layer.parameters()) out.push_back(p);
  };
  for (auto& conv : backbone_) add(conv);
  add(rpn_conv1_);
  add(rpn_conv2_);
  add(rpn_deltas_);
  add(rpn_fc1_);
  add(rpn_fc2_);
  add(head_fc1_);
  add(head_fc2_);
  add(head_fc3_);
  add(head_fc4_);
  add(head_reg_);
  return out;
}

template <typename T>
std::size_t Detector<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

template <typename T>
void Detector<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <typename T>
nn::Tensor3<T> Detector<T>::image_tensor(const Image& image) const {
  nn::Tensor3<T> x(3, image.height, image.width);
  for (int y = 0; y < image.height; ++y)
    for (int xx = 0; xx < image.width; ++xx)
      for (int c = 0; c < 3; ++c) x.at(c, y, xx) = static_cast<T>(image.at(y, xx, c) - 0.5f);
  return x;
}

template <typename T>
FeaturePyramid<T> Detector<T>::extract_features(const Image& image, BackboneTape* tape) const {
  const int stride = config_.largest_stride();
  if (image.width <= 0 || image.height <= 0 || image.width % stride != 0 || image.height % stride != 0) {
    throw ShapeError("image " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                     " is not divisible by stride " + std::to_string(stride));
  }
  nn::Tensor3<T> x = image_tensor(image);
  if (tape) {
    tape->input = x;
    tape->convs.assign(backbone_.size(), {});
    tape->outputs.assign(backbone_.size(), {});
  }
  const std::size_t stages = config_.backbone_channels.size();
  const std::size_t first_level = stages - static_cast<std::size_t>(config_.pyramid_levels);
  std::vector<nn::Tensor3<T>> stage_out(stages);
  std::size_t stage = 0;
  for (std::size_t j = 0; j < backbone_.size(); ++j) {
    nn::Tensor3<T> y = backbone_[j].forward(x, tape ? &tape->convs[j] : nullptr);
    nn::relu_inplace(y.data);
    if (tape) tape->outputs[j] = y;
    if (static_cast<int>(j) == stage_end_[stage]) {
      if (stage >= first_level) stage_out[stage] = y;
      ++stage;
    }
    x = std::move(y);
  }
  FeaturePyramid<T> pyramid;
  const auto strides = config_.level_strides();
  pyramid.levels.resize(static_cast<std::size_t>(config_.pyramid_levels));
  pyramid.strides = strides;
  for (int l = config_.pyramid_levels - 1; l >= 0; --l) {
    nn::Tensor3<T>& level = pyramid.levels[static_cast<std::size_t>(l)];
    level = stage_out[first_level + static_cast<std::size_t>(l)];
    if (l + 1 < config_.pyramid_levels) {
      const nn::Tensor3<T> up = nn::upsample2x(pyramid.levels[static_cast<std::size_t>(l) + 1]);
      for (std::size_t i = 0; i < level.data.size(); ++i) level.data[i] += up.data[i];
    }
  }
  return pyramid;
}

template <typename T>
std::vector<FeaturePyramid<T>> Detector<T>::extract_features(std::span<const Image> batch) const {
  std::vector<FeaturePyramid<T>> out;
  out.reserve(batch.size());
  for (const Image& image : batch) out.push_back(extract_features(image));
  return out;
}

template <typename T>
typename Detector<T>::RpnMaps Detector<T>::rpn_maps(const FeaturePyramid<T>& features, RpnTape* tape) const {
  const std::size_t levels = features.levels.size();
  RpnMaps maps;
  maps.shared.resize(levels);
  maps.deltas.resize(levels);
  if (tape) {
    tape->conv1.assign(levels, {});
    tape->conv2.assign(levels, {});
    tape->deltas.assign(levels, {});
    tape->hidden.assign(levels, {});
  }
  for (std::size_t l = 0; l < levels; ++l) {
    nn::Tensor3<T> h = rpn_conv1_.forward(features.levels[l], tape ? &tape->conv1[l] : nullptr);
    nn::relu_inplace(h.data);
    nn::Tensor3<T> s = rpn_conv2_.forward(h, tape ? &tape->conv2[l] : nullptr);
    nn::relu_inplace(s.data);
    maps.deltas[l] = rpn_deltas_.forward(s, tape ? &tape->deltas[l] : nullptr);
    if (tape) tape->hidden[l] = std::move(h);
    maps.shared[l] = std::move(s);
  }
  return maps;
}

template <typename T>
AnchorGrid Detector<T>::anchors_for(const FeaturePyramid<T>& features) const {
  std::vector<FeatureShape> shapes;
  for (const auto& level : features.levels) shapes.push_back(FeatureShape{level.height, level.width});
  return generate_anchors(shapes, config_.anchor_recipe());
}

template <typename T>
int Detector<T>::level_for_box(const Box& box) const {
  const double size = std::sqrt(std::max(box.area(), 1e-6));
  int best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l < config_.anchor_sizes.size(); ++l) {
    const double gap = std::abs(std::log(size / config_.anchor_sizes[l]));
    if (gap < best_gap) {
      best_gap = gap;
      best = static_cast<int>(l);
    }
  }
  return best;
}

namespace {

nn::RoI to_roi(const Box& b) { return nn::RoI{b.x_min, b.y_min, b.x_max, b.y_max}; }

// Pools each RoI from its own level; output rows follow input order.
template <typename T>
nn::Matrix<T> pool_by_level(const nn::RoIAlign<T>& pool, const std::vector<nn::Tensor3<T>>& maps,
                            const std::vector<int>& strides, std::span<const nn::RoI> rois,
                            std::span<const int> levels) {
  const int channels = maps.front().channels;
  nn::Matrix<T> out(static_cast<Eigen::Index>(rois.size()), pool.output_features(channels));
  for (std::size_t l = 0; l < maps.size(); ++l) {
    std::vector<nn::RoI> subset;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      if (levels[i] == static_cast<int>(l)) {
        subset.push_back(rois[i]);
        rows.push_back(static_cast<Eigen::Index>(i));
      }
    }
    if (subset.empty()) continue;
    const nn::Matrix<T> pooled = pool.forward(maps[l], subset, strides[l]);
    for (std::size_t r = 0; r < rows.size(); ++r) out.row(rows[r]) = pooled.row(static_cast<Eigen::Index>(r));
  }
  return out;
}

template <typename T>
void unpool_by_level(const nn::RoIAlign<T>& pool, std::vector<nn::Tensor3<T>>& grads,
                     const std::vector<int>& strides, std::span<const nn::RoI> rois,
                     std::span<const int> levels, const nn::Matrix<T>& grad_pooled) {
  for (std::size_t l = 0; l < grads.size(); ++l) {
    std::vector<nn::RoI> subset;
    std::vector<Eigen::Index> rows;
    for (std::size_t i = 0; i < rois.size(); ++i) {
      if (levels[i] == static_cast<int>(l)) {
        subset.push_back(rois[i]);
        rows.push_back(static_cast<Eigen::Index>(i));
      }
    }
    if (subset.empty()) continue;
    nn::Matrix<T> g(static_cast<Eigen::Index>(rows.size()), grad_pooled.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) g.row(static_cast<Eigen::Index>(r)) = grad_pooled.row(rows[r]);
    pool.backward(g, subset, strides[l], grads[l]);
  }
}

}  // namespace

template <typename T>
nn::Matrix<T> Detector<T>::rpn_branch(const RpnMaps& maps, std::span<const Box> boxes,
                                      std::span<const int> levels, BranchTape* tape) const {
  std::vector<nn::RoI> rois;
  rois.reserve(boxes.size());
  for (const Box& b : boxes) rois.push_back(to_roi(b));
  nn::Matrix<T> pooled = pool_by_level(rpn_pool_, maps.shared, config_.level_strides(), rois, levels);
  nn::Matrix<T> hidden = rpn_fc1_.forward(pooled);
  nn::relu_inplace(hidden);
  nn::Matrix<T> raw = rpn_fc2_.forward(hidden);
  if (tape) {
    tape->levels.assign(levels.begin(), levels.end());
    tape->rois = std::move(rois);
    tape->pooled = std::move(pooled);
    tape->activations = {std::move(hidden)};
  }
  return raw;
}

template <typename T>
std::pair<nn::Matrix<T>, nn::Matrix<T>> Detector<T>::head_branch(const FeaturePyramid<T>& features,
                                                                 std::span<const Box> boxes,
                                                                 BranchTape* tape) const {
  std::vector<nn::RoI> rois;
  std::vector<int> levels;
  for (const Box& b : boxes) {
    rois.push_back(to_roi(b));
    levels.push_back(level_for_box(b));
  }
  nn::Matrix<T> pooled = pool_by_level(head_pool_, features.levels, features.strides, rois, levels);
  nn::Matrix<T> a1 = head_fc1_.forward(pooled);
  nn::relu_inplace(a1);
  nn::Matrix<T> a2 = head_fc2_.forward(a1);
  nn::relu_inplace(a2);
  nn::Matrix<T> a3 = head_fc3_.forward(a2);
  nn::relu_inplace(a3);
  nn::Matrix<T> raw = head_fc4_.forward(a3);
  nn::Matrix<T> deltas = head_reg_.forward(a2);
  if (tape) {
    tape->levels = std::move(levels);
    tape->rois = std::move(rois);
    tape->pooled = std::move(pooled);
    tape->activations = {std::move(a1), std::move(a2), std::move(a3)};
  }
  return {std::move(raw), std::move(deltas)};
}

template <typename T>
RpnOutput Detector<T>::rpn_embed(const FeaturePyramid<T>& features) const {
  return rpn_output(rpn_maps(features), anchors_for(features));
}

template <typename T>
RpnOutput Detector<T>::rpn_output(const RpnMaps& maps, const AnchorGrid& anchors) const {
  RpnOutput out;
  out.anchors = anchors;
  const std::vector<Box> boxes = anchors.flat();
  std::vector<int> levels(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i) levels[i] = static_cast<int>(anchors.level_of(i));
  const nn::Matrix<T> raw = rpn_branch(maps, boxes, levels);
  out.embeddings.reserve(boxes.size());
  out.deltas.reserve(boxes.size());
  for (Eigen::Index r = 0; r < raw.rows(); ++r) out.embeddings.push_back(to_embedding(raw, r));
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const AnchorSlot s = anchor_slot(anchors, i);
    const auto& d = maps.deltas[static_cast<std::size_t>(s.level)];
    out.deltas.push_back(BoxDeltas{static_cast<double>(d.at(s.channel, s.y, s.x)),
                                   static_cast<double>(d.at(s.channel + 1, s.y, s.x)),
                                   static_cast<double>(d.at(s.channel + 2, s.y, s.x)),
                                   static_cast<double>(d.at(s.channel + 3, s.y, s.x))});
  }
  return out;
}

template <typename T>
typename Detector<T>::AnchorSlot Detector<T>::anchor_slot(const AnchorGrid& anchors, std::size_t flat_index) const {
  const std::size_t level = anchors.level_of(flat_index);
  const std::size_t local = flat_index - anchors.level_offset(level);
  const std::size_t per_cell = config_.anchor_ratios.size();
  const std::size_t cell = local / per_cell;
  const auto width = static_cast<std::size_t>(anchors.shapes[level].width);
  return AnchorSlot{static_cast<int>(level), static_cast<int>(cell / width), static_cast<int>(cell % width),
                    static_cast<int>(4 * (local % per_cell))};
}

template <typename T>
HeadOutput Detector<T>::head_embed(const FeaturePyramid<T>& features, std::span<const Box> boxes) const {
  HeadOutput out;
  if (boxes.empty()) return out;
  const auto [raw, deltas] = head_branch(features, boxes);
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    out.embeddings.push_back(to_embedding(raw, r));
    out.deltas.push_back(BoxDeltas{static_cast<double>(deltas(r, 0)), static_cast<double>(deltas(r, 1)),
                                   static_cast<double>(deltas(r, 2)), static_cast<double>(deltas(r, 3))});
  }
  return out;
}

template <typename T>
typename Detector<T>::SupportEmbedding Detector<T>::embed_support(const Image& image, const Box& box) const {
  const FeaturePyramid<T> features = extract_features(image);
  const RpnMaps maps = rpn_maps(features);
  const int level = level_for_box(box);
  const nn::Matrix<T> rpn_raw = rpn_branch(maps, std::span<const Box>(&box, 1), std::span<const int>(&level, 1));
  const HeadOutput head = head_embed(features, std::span<const Box>(&box, 1));
  return SupportEmbedding{to_embedding(rpn_raw, 0), head.embeddings.front()};
}

template <typename T>
PrototypeBank Detector<T>::build_bank(const DatasetIndex& dataset,
                                      const std::vector<SupportExample>& support) const {
  std::map<int, std::vector<Embedding>> rpn_shots, head_shots;
  for (const SupportExample& s : support) {
    const SupportEmbedding e = embed_support(dataset.record(s.image_id).image, s.box);
    rpn_shots[s.class_id].push_back(e.rpn);
    head_shots[s.class_id].push_back(e.head);
  }
  PrototypeBank bank;
  bank.sigma = config_.sigma;
  for (const auto& [c, shots] : rpn_shots) bank.rpn.emplace(c, compute_prototype(c, shots));
  for (const auto& [c, shots] : head_shots) bank.head.emplace(c, compute_prototype(c, shots));
  return bank;
}

template <typename T>
DetectionSet Detector<T>::detect(const Image& image, const PrototypeBank& bank) const {
  return detect(image, bank, config_.score_threshold);
}

template <typename T>
DetectionSet Detector<T>::detect(const Image& image, const PrototypeBank& bank, double score_threshold) const {
  bank.validate();
  if (bank.empty()) throw ContractError("prototype bank is empty");
  if (bank.dim() != static_cast<std::size_t>(config_.embedding_dim)) {
    throw ContractError("prototype dimension does not match the model");
  }
  const FeaturePyramid<T> features = extract_features(image);
  const RpnOutput rpn = rpn_embed(features);
  const ProposalSet proposals =
      select_proposals(rpn, bank, config_.test_proposals, config_.rpn_nms, image.bounds(), config_.min_box_size);
  const HeadOutput head = head_embed(features, proposals.boxes);

  std::map<int, std::vector<Detection>> per_class;
  for (std::size_t i = 0; i < proposals.boxes.size(); ++i) {
    const ClassPosterior post = class_posterior(likelihoods_for(head.embeddings[i], bank.head, bank.sigma));
    const int label = post.argmax();
    if (label == kBackgroundLabel) continue;
    const double score = post.classes.at(label);
    if (score < score_threshold) continue;
    Box box = decode_deltas(proposals.boxes[i], head.deltas[i], image.bounds());
    if (!box.valid()) continue;
    per_class[label].push_back(Detection{box, label, score, proposals.boxes[i], head.embeddings[i]});
  }
  DetectionSet out;
  for (auto& [c, dets] : per_class) {
    std::vector<ScoredBox> scored;
    for (const Detection& d : dets) scored.push_back(ScoredBox{d.box, d.score});
    for (std::size_t k : nms(scored, config_.head_nms)) out.push_back(dets[k]);
  }
  std::stable_sort(out.begin(), out.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  return out;
}

// ---------------------------------------------------------------------------
// Trainable path

template <typename T>
typename Detector<T>::ImagePass Detector<T>::begin_pass(const Image& image) const {
  ImagePass pass;
  pass.features = extract_features(image, &pass.backbone);
  pass.maps = rpn_maps(pass.features, &pass.rpn_tape);
  pass.anchors = anchors_for(pass.features);
  pass.bounds = image.bounds();
  for (std::size_t l = 0; l < pass.features.levels.size(); ++l) {
    const auto& f = pass.features.levels[l];
    pass.grad_features.emplace_back(f.channels, f.height, f.width);
    const auto& s = pass.maps.shared[l];
    pass.grad_shared.emplace_back(s.channels, s.height, s.width);
    const auto& d = pass.maps.deltas[l];
    pass.grad_deltas.emplace_back(d.channels, d.height, d.width);
  }
  return pass;
}

template <typename T>
void Detector<T>::rpn_branch_backward(const BranchTape& tape, const nn::Matrix<T>& grad_raw, ImagePass& pass) {
  nn::Matrix<T> g_hidden = rpn_fc2_.backward(tape.activations[0], grad_raw, true);
  nn::relu_backward(tape.activations[0], g_hidden);
  const nn::Matrix<T> g_pooled = rpn_fc1_.backward(tape.pooled, g_hidden, true);
  unpool_by_level(rpn_pool_, pass.grad_shared, config_.level_strides(), tape.rois, tape.levels, g_pooled);
}

template <typename T>
void Detector<T>::head_branch_backward(const BranchTape& tape, const nn::Matrix<T>& grad_raw,
                                       const nn::Matrix<T>& grad_deltas, ImagePass& pass) {
  const auto& a1 = tape.activations[0];
  const auto& a2 = tape.activations[1];
  const auto& a3 = tape.activations[2];
  nn::Matrix<T> g3 = head_fc4_.backward(a3, grad_raw, true);
  nn::relu_backward(a3, g3);
  nn::Matrix<T> g2 = head_fc3_.backward(a2, g3, true);
  g2 += head_reg_.backward(a2, grad_deltas, true);
  nn::relu_backward(a2, g2);
  nn::Matrix<T> g1 = head_fc2_.backward(a1, g2, true);
  nn::relu_backward(a1, g1);
  const nn::Matrix<T> g_pooled = head_fc1_.backward(tape.pooled, g1, true);
  unpool_by_level(head_pool_, pass.grad_features, pass.features.strides, tape.rois, tape.levels, g_pooled);
}

template <typename T>
void Detector<T>::finish_pass(ImagePass& pass) {
  const std::size_t levels = pass.features.levels.size();
  // RPN convolutions, level by level (weights are shared across levels).
  for (std::size_t l = 0; l < levels; ++l) {
    nn::Tensor3<T> g_shared = pass.grad_shared[l];
    const nn::Tensor3<T> from_deltas = rpn_deltas_.backward(pass.rpn_tape.deltas[l], pass.grad_deltas[l], true);
    for (std::size_t i = 0; i < g_shared.data.size(); ++i) g_shared.data[i] += from_deltas.data[i];
    nn::relu_backward(pass.maps.shared[l].data, g_shared.data);
    nn::Tensor3<T> g_hidden = rpn_conv2_.backward(pass.rpn_tape.conv2[l], g_shared, true);
    nn::relu_backward(pass.rpn_tape.hidden[l].data, g_hidden.data);
    const nn::Tensor3<T> g_level = rpn_conv1_.backward(pass.rpn_tape.conv1[l], g_hidden, true);
    for (std::size_t i = 0; i < g_level.data.size(); ++i) pass.grad_features[l].data[i] += g_level.data[i];
  }
  // Top-down pyramid: P_l = C_l + up(P_{l+1}).
  std::vector<nn::Tensor3<T>> g_pyramid = pass.grad_features;
  for (std::size_t l = 0; l + 1 < levels; ++l) {
    const nn::Tensor3<T> down = nn::upsample2x_backward(g_pyramid[l]);
    for (std::size_t i = 0; i < down.data.size(); ++i) g_pyramid[l + 1].data[i] += down.data[i];
  }
  const std::size_t stages = config_.backbone_channels.size();
  const std::size_t first_level = stages - levels;
  std::map<int, std::size_t> level_at_conv;
  for (std::size_t s = first_level; s < stages; ++s) level_at_conv[stage_end_[s]] = s - first_level;

  nn::Tensor3<T> grad;
  for (int j = static_cast<int>(backbone_.size()) - 1; j >= 0; --j) {
    auto it = level_at_conv.find(j);
    if (it != level_at_conv.end()) {
      const auto& g = g_pyramid[it->second];
      if (grad.data.empty()) {
        grad = g;
      } else {
        for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] += g.data[i];
      }
    }
    if (grad.data.empty()) continue;
    const auto ju = static_cast<std::size_t>(j);
    nn::relu_backward(pass.backbone.outputs[ju].data, grad.data);
    grad = backbone_[ju].backward(pass.backbone.convs[ju], grad, j > 0);
  }
}

template class Detector<float>;
template class Detector<double>;

// ---------------------------------------------------------------------------
// Checkpoints

template <typename T>
Checkpoint make_checkpoint(Detector<T>& detector, const PrototypeBank& bank, KeyValues meta) {
  Checkpoint ckpt;
  ckpt.model = detector.config();
  ckpt.bank = bank;
  ckpt.meta = std::move(meta);
  for (auto* p : detector.parameters()) {
    ckpt.weights.emplace_back(p->name, std::vector<double>(p->value.begin(), p->value.end()));
  }
  return ckpt;
}

template <typename T>
void load_weights(Detector<T>& detector, const Checkpoint& checkpoint) {
  auto params = detector.parameters();
  if (params.size() != checkpoint.weights.size()) {
    throw ConfigError("checkpoint has " + std::to_string(checkpoint.weights.size()) +
                      " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, values] = checkpoint.weights[i];
    if (name != params[i]->name || values.size() != params[i]->value.size()) {
      throw ConfigError("checkpoint tensor '" + name + "' does not match '" + params[i]->name + "'");
    }
    for (std::size_t k = 0; k < values.size(); ++k) params[i]->value[k] = static_cast<T>(values[k]);
  }
}

template Checkpoint make_checkpoint<float>(Detector<float>&, const PrototypeBank&, KeyValues);
template Checkpoint make_checkpoint<double>(Detector<double>&, const PrototypeBank&, KeyValues);
template void load_weights<float>(Detector<float>&, const Checkpoint&);
template void load_weights<double>(Detector<double>&, const Checkpoint&);

namespace {

constexpr char kMagic[8] = {'P', 'R', 'O', 'T', 'O', 'D', 'E', 'T'};

template <typename V>
void put(std::ostream& out, V v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

template <typename V>
V get(std::istream& in) {
  V v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("truncated checkpoint");
  return v;
}

std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1ULL << 32)) throw IoError("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw IoError("truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  KeyValues model;
  checkpoint.model.write(model);
  put_string(out, model.format());
  put_string(out, checkpoint.meta.format());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(checkpoint.weights.size()));
  for (const auto& [name, values] : checkpoint.weights) {
    put_string(out, name);
    put<std::uint64_t>(out, values.size());
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  std::ostringstream bank;
  if (!checkpoint.bank.empty()) write_bank(bank, checkpoint.bank);
  put_string(out, bank.str());
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  ckpt.model = ModelConfig::read(KeyValues::parse(get_string(in)));
  ckpt.meta = KeyValues::parse(get_string(in));
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(in);
    const auto n = get<std::uint64_t>(in);
    if (n > (1ULL << 31)) throw IoError("corrupt tensor size");
    std::vector<double> values(n);
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw IoError("truncated checkpoint");
    }
    ckpt.weights.emplace_back(std::move(name), std::move(values));
  }
  const std::string bank = get_string(in);
  if (!bank.empty()) {
    std::istringstream bank_in(bank);
    ckpt.bank = read_bank(bank_in);
  }
  return ckpt;
}

}  // namespace protodet
