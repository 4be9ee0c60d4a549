#include "protodet/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace protodet {

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
  if (n_way <= 0 || k_shot <= 0 || query_per_class <= 0 || batch_size <= 0) {
    throw ConfigError("n_way, k_shot, query_per_class and batch_size must be positive");
  }
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (max_iterations < 0) throw ConfigError("max_iterations must be non-negative");
  if (!(alpha > 0 && alpha <= 1)) throw ConfigError("alpha must be in (0, 1]");
  if (lambda_bc < 0 || !(bc_margin > 0) || bc_clusters < 2 || bc_kmeans_iters <= 0 || bc_triplets_per_anchor <= 0) {
    throw ConfigError("invalid background clustering settings");
  }
  if (rpn_batch <= 0 || head_batch <= 0 || rpn_hard_negatives < 0 || head_hard_negatives < 0) {
    throw ConfigError("sample quotas must be positive");
  }
  if (!(rpn_positive_fraction > 0 && rpn_positive_fraction <= 1) ||
      !(head_positive_fraction > 0 && head_positive_fraction <= 1)) {
    throw ConfigError("positive fractions must be in (0, 1]");
  }
  if (head_bg_iou > head_fg_iou) throw ConfigError("head_bg_iou exceeds head_fg_iou");
  if (!(log_eps > 0)) throw ConfigError("log_eps must be positive");
  if (ma_warmup < 0) throw ConfigError("ma_warmup must be non-negative");
  if (eval_every < 0 || patience < 0 || val_shots <= 0 || val_runs <= 0) {
    throw ConfigError("invalid evaluation cadence");
  }
}

void TrainConfig::write(KeyValues& kv) const {
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  kv.set("n_way", std::to_string(n_way));
  kv.set("k_shot", std::to_string(k_shot));
  kv.set("query_per_class", std::to_string(query_per_class));
  kv.set("batch_size", std::to_string(batch_size));
  kv.set("learning_rate", format_double(learning_rate));
  kv.set("max_iterations", std::to_string(max_iterations));
  kv.set("hem", b(hem));
  kv.set("ma", b(ma));
  kv.set("bc", b(bc));
  kv.set("hem_rpn", b(hem_rpn));
  kv.set("hem_head", b(hem_head));
  kv.set("alpha", format_double(alpha));
  kv.set("ma_warmup", std::to_string(ma_warmup));
  kv.set("lambda_bc", format_double(lambda_bc));
  kv.set("bc_clusters", std::to_string(bc_clusters));
  kv.set("bc_margin", format_double(bc_margin));
  kv.set("bc_kmeans_iters", std::to_string(bc_kmeans_iters));
  kv.set("bc_triplets_per_anchor", std::to_string(bc_triplets_per_anchor));
  kv.set("rpn_batch", std::to_string(rpn_batch));
  kv.set("rpn_positive_fraction", format_double(rpn_positive_fraction));
  kv.set("rpn_hard_negatives", std::to_string(rpn_hard_negatives));
  kv.set("head_batch", std::to_string(head_batch));
  kv.set("head_positive_fraction", format_double(head_positive_fraction));
  kv.set("head_hard_negatives", std::to_string(head_hard_negatives));
  kv.set("head_fg_iou", format_double(head_fg_iou));
  kv.set("head_bg_iou", format_double(head_bg_iou));
  kv.set("log_eps", format_double(log_eps));
  kv.set("seed", std::to_string(seed));
  kv.set("eval_every", std::to_string(eval_every));
  kv.set("patience", std::to_string(patience));
  kv.set("val_shots", std::to_string(val_shots));
  kv.set("val_runs", std::to_string(val_runs));
}

TrainConfig TrainConfig::read(const KeyValues& kv) {
  TrainConfig c;
  c.n_way = kv.get_int("n_way", c.n_way);
  c.k_shot = kv.get_int("k_shot", c.k_shot);
  c.query_per_class = kv.get_int("query_per_class", c.query_per_class);
  c.batch_size = kv.get_int("batch_size", c.batch_size);
  c.learning_rate = kv.get_double("learning_rate", c.learning_rate);
  c.max_iterations = kv.get_int("max_iterations", c.max_iterations);
  c.hem = kv.get_bool("hem", c.hem);
  c.ma = kv.get_bool("ma", c.ma);
  c.bc = kv.get_bool("bc", c.bc);
  c.hem_rpn = kv.get_bool("hem_rpn", c.hem_rpn);
  c.hem_head = kv.get_bool("hem_head", c.hem_head);
  c.alpha = kv.get_double("alpha", c.alpha);
  c.ma_warmup = kv.get_int("ma_warmup", c.ma_warmup);
  c.lambda_bc = kv.get_double("lambda_bc", c.lambda_bc);
  c.bc_clusters = kv.get_int("bc_clusters", c.bc_clusters);
  c.bc_margin = kv.get_double("bc_margin", c.bc_margin);
  c.bc_kmeans_iters = kv.get_int("bc_kmeans_iters", c.bc_kmeans_iters);
  c.bc_triplets_per_anchor = kv.get_int("bc_triplets_per_anchor", c.bc_triplets_per_anchor);
  c.rpn_batch = kv.get_int("rpn_batch", c.rpn_batch);
  c.rpn_positive_fraction = kv.get_double("rpn_positive_fraction", c.rpn_positive_fraction);
  c.rpn_hard_negatives = kv.get_int("rpn_hard_negatives", c.rpn_hard_negatives);
  c.head_batch = kv.get_int("head_batch", c.head_batch);
  c.head_positive_fraction = kv.get_double("head_positive_fraction", c.head_positive_fraction);
  c.head_hard_negatives = kv.get_int("head_hard_negatives", c.head_hard_negatives);
  c.head_fg_iou = kv.get_double("head_fg_iou", c.head_fg_iou);
  c.head_bg_iou = kv.get_double("head_bg_iou", c.head_bg_iou);
  c.log_eps = kv.get_double("log_eps", c.log_eps);
  c.seed = static_cast<std::uint64_t>(kv.get_int64("seed", static_cast<long long>(c.seed)));
  c.eval_every = kv.get_int("eval_every", c.eval_every);
  c.patience = kv.get_int("patience", c.patience);
  c.val_shots = kv.get_int("val_shots", c.val_shots);
  c.val_runs = kv.get_int("val_runs", c.val_runs);
  c.validate();
  return c;
}

std::string TrainConfig::flag_name() const {
  if (!hem && !ma && !bc) return "baseline";
  std::string name;
  if (hem) name += "hem";
  if (ma) name += std::string(name.empty() ? "" : "_") + "ma";
  if (bc) name += std::string(name.empty() ? "" : "_") + "bc";
  return name;
}

std::pair<ModelConfig, TrainConfig> parse_config(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  ModelConfig model = ModelConfig::read(kv);
  TrainConfig train = TrainConfig::read(kv);
  kv.reject_unknown();
  return {model, train};
}

std::pair<ModelConfig, TrainConfig> load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string format_config(const ModelConfig& model, const TrainConfig& train) {
  KeyValues kv;
  model.write(kv);
  train.write(kv);
  return kv.format();
}

// ---------------------------------------------------------------------------
// Losses

void LossBundle::finalize() { total = rpn_reg + rpn_obj + head_reg + head_cls + lambda_bc * bg_cluster; }

namespace {

double box_smooth_l1(const BoxDeltas& pred, const BoxDeltas& target) {
  double s = 0.0;
  for (std::size_t j = 0; j < 4; ++j) s += smooth_l1(pred[j] - target[j]);
  return s;
}

BoxDeltas box_smooth_l1_grad(const BoxDeltas& pred, const BoxDeltas& target, double scale) {
  return BoxDeltas{scale * smooth_l1_grad(pred.dx - target.dx), scale * smooth_l1_grad(pred.dy - target.dy),
                   scale * smooth_l1_grad(pred.dw - target.dw), scale * smooth_l1_grad(pred.dh - target.dh)};
}

double bce(double o, bool positive, double eps) {
  return positive ? -std::log(std::max(o, eps)) : -std::log(std::max(1.0 - o, eps));
}

double bce_grad(double o, bool positive, double eps) {
  if (positive) return o > eps ? -1.0 / o : 0.0;
  return 1.0 - o > eps ? 1.0 / (1.0 - o) : 0.0;
}

}  // namespace

RpnLossResult rpn_losses(const std::vector<RpnSample>& samples, const std::vector<double>& objectness,
                         const std::vector<BoxDeltas>& deltas, double eps) {
  if (objectness.size() != samples.size() || deltas.size() != samples.size()) {
    throw ContractError("rpn loss inputs differ in length");
  }
  RpnLossResult out;
  out.grad_objectness.assign(samples.size(), 0.0);
  out.grad_deltas.assign(samples.size(), BoxDeltas{});
  std::size_t positives = 0;
  for (const RpnSample& s : samples) positives += s.kind == MatchLabel::positive;
  if (samples.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  const double inv_pos = positives ? 1.0 / static_cast<double>(positives) : 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool pos = samples[i].kind == MatchLabel::positive;
    out.obj += bce(objectness[i], pos, eps);
    out.grad_objectness[i] = bce_grad(objectness[i], pos, eps) * inv_n;
    if (pos) {
      out.reg += box_smooth_l1(deltas[i], samples[i].target);
      out.grad_deltas[i] = box_smooth_l1_grad(deltas[i], samples[i].target, inv_pos);
    }
  }
  out.obj *= inv_n;
  out.reg *= inv_pos;
  return out;
}

HeadLossResult head_losses(const std::vector<HeadSample>& samples, const std::vector<ClassPosterior>& posteriors,
                           const std::vector<BoxDeltas>& deltas, double eps) {
  if (posteriors.size() != samples.size() || deltas.size() != samples.size()) {
    throw ContractError("head loss inputs differ in length");
  }
  HeadLossResult out;
  out.grad_deltas.assign(samples.size(), BoxDeltas{});
  if (samples.empty()) return out;
  std::size_t positives = 0;
  for (const HeadSample& s : samples) positives += s.kind == MatchLabel::positive;
  const double inv_pos = positives ? 1.0 / static_cast<double>(positives) : 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ClassPosterior& post = posteriors[i];
    double p = 0.0;
    if (samples[i].label == kBackgroundLabel) {
      p = post.background;
    } else {
      auto it = post.classes.find(samples[i].label);
      if (it == post.classes.end()) throw ContractError("posterior lacks the sample's class");
      p = it->second;
    }
    out.cls += -std::log(std::max(p, eps));
    if (samples[i].kind == MatchLabel::positive) {
      out.reg += box_smooth_l1(deltas[i], samples[i].target);
      out.grad_deltas[i] = box_smooth_l1_grad(deltas[i], samples[i].target, inv_pos);
    }
  }
  out.cls /= static_cast<double>(samples.size());
  out.reg *= inv_pos;
  return out;
}

ClusterLossResult triplet_set_loss(const std::vector<Embedding>& negatives, const std::vector<Triplet>& triplets,
                                   double margin) {
  ClusterLossResult out;
  out.triplets = triplets;
  out.grad.assign(negatives.size(), Vector(negatives.empty() ? 0 : negatives.front().dim(), 0.0));
  if (triplets.empty()) return out;
  const double inv = 1.0 / static_cast<double>(triplets.size());
  for (const Triplet& t : triplets) {
    const auto& a = negatives.at(t[0]);
    const auto& p = negatives.at(t[1]);
    const auto& n = negatives.at(t[2]);
    out.loss += triplet_loss(a, p, n, margin);
    const TripletGrad g = triplet_loss_grad(a, p, n, margin);
    for (std::size_t j = 0; j < a.dim(); ++j) {
      out.grad[t[0]][j] += inv * g.anchor[j];
      out.grad[t[1]][j] += inv * g.positive[j];
      out.grad[t[2]][j] += inv * g.negative[j];
    }
  }
  out.loss *= inv;
  return out;
}

ClusterLossResult background_cluster_loss(const std::vector<Embedding>& negatives, int k, double margin,
                                          std::uint64_t seed, int kmeans_iters, int per_anchor) {
  if (static_cast<int>(negatives.size()) < k) {
    ClusterLossResult out;
    out.grad.assign(negatives.size(), Vector(negatives.empty() ? 0 : negatives.front().dim(), 0.0));
    return out;
  }
  const PseudoLabeling labels = cluster_negatives(negatives, k, kmeans_iters, mix_seed(seed, 1));
  const auto triplets = mine_triplets(labels, negatives.size(), per_anchor, mix_seed(seed, 2));
  return triplet_set_loss(negatives, triplets, margin);
}

// ---------------------------------------------------------------------------
// Step

void update_store(PrototypeStore& store, const PrototypeBank& used) {
  for (const auto& [c, p] : used.rpn) store.rpn.insert_or_assign(c, p.vector);
  for (const auto& [c, p] : used.head) store.head.insert_or_assign(c, p.vector);
}

namespace {

enum : std::uint64_t { kSampleStream = 11, kHardStream = 12, kClusterStream = 13 };

template <typename T>
nn::Matrix<T> to_matrix(const std::vector<Vector>& rows, std::size_t dim) {
  nn::Matrix<T> m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < dim; ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = static_cast<T>(rows[i][j]);
  return m;
}

void add_to(Vector& acc, std::span<const double> v, double scale = 1.0) {
  for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += scale * v[j];
}

/// Unit-norm rows of a raw embedding matrix with their raw norms.
template <typename T>
void unit_rows(const nn::Matrix<T>& raw, std::vector<Embedding>& out, std::vector<double>& norms) {
  out.clear();
  norms.clear();
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    double n = 0.0;
    out.push_back(to_embedding(raw, r, &n));
    norms.push_back(n);
  }
}

// Prototype chain: shots -> mean -> normalize -> (blend with store -> normalize).
struct PrototypeChain {
  std::vector<std::size_t> shots;  // support indices
  double mean_norm = 0.0;
  Embedding fresh;
  bool blended = false;
  double blend_norm = 0.0;
  Embedding used;
};

PrototypeChain build_chain(const std::vector<std::size_t>& shots, const std::vector<Embedding>& embeddings,
                           const std::map<int, Embedding>& store, int class_id, bool ma, double alpha) {
  PrototypeChain chain;
  chain.shots = shots;
  Vector mean(embeddings[shots.front()].dim(), 0.0);
  for (std::size_t s : shots) add_to(mean, embeddings[s].values(), 1.0 / static_cast<double>(shots.size()));
  chain.mean_norm = norm(mean);
  chain.fresh = normalize(mean);
  chain.used = chain.fresh;
  auto it = store.find(class_id);
  if (ma && it != store.end()) {
    Vector blend(mean.size());
    for (std::size_t j = 0; j < blend.size(); ++j) {
      blend[j] = alpha * chain.fresh[j] + (1.0 - alpha) * it->second[j];
    }
    chain.blended = true;
    chain.blend_norm = norm(blend);
    chain.used = normalize(blend);
  }
  return chain;
}

/// Gradient with respect to each shot's unit embedding.
void chain_backward(const PrototypeChain& chain, const Vector& grad_used, double alpha,
                    std::vector<Vector>& grad_shots) {
  Vector g = grad_used;
  if (chain.blended) {
    g = normalize_backward(chain.used.values(), chain.blend_norm, g);
    for (double& v : g) v *= alpha;
  }
  g = normalize_backward(chain.fresh.values(), chain.mean_norm, g);
  const double inv = 1.0 / static_cast<double>(chain.shots.size());
  for (std::size_t s : chain.shots) add_to(grad_shots[s], g, inv);
}

std::vector<std::size_t> take(std::vector<std::size_t> pool, std::size_t count, Rng& rng) {
  rng.shuffle(pool);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw TrainingError(std::string("non-finite ") + what + " loss");
}

}  // namespace

template <typename T>
StepResult run_step(Detector<T>& detector, const DatasetIndex& dataset, const EpisodeTask& episode,
                    const std::vector<std::size_t>& query_indices, const PrototypeStore& store,
                    const TrainConfig& config, std::uint64_t step_seed, const StepOptions& options) {
  using Matrix = nn::Matrix<T>;
  using Pass = typename Detector<T>::ImagePass;
  using Tape = typename Detector<T>::BranchTape;
  const ModelConfig& mc = detector.config();
  const bool replay = options.frozen != nullptr;
  const std::size_t dim = static_cast<std::size_t>(mc.embedding_dim);
  const bool hem_rpn = config.hem && config.hem_rpn;
  const bool hem_head = config.hem && config.hem_head;

  StepResult result;
  StepPlan& plan = result.plan;
  if (replay) {
    plan = *options.frozen;
  } else {
    plan.classes = episode.classes;
    plan.support = episode.support;
  }
  Rng sample_rng(mix_seed(step_seed, kSampleStream));
  Rng hard_rng(mix_seed(step_seed, kHardStream));

  // -- Supports and prototypes ---------------------------------------------
  const std::size_t num_support = plan.support.size();
  std::vector<Pass> support_pass;
  std::vector<Tape> support_rpn_tape(num_support), support_head_tape(num_support);
  std::vector<Embedding> support_rpn(num_support), support_head(num_support);
  std::vector<double> support_rpn_norm(num_support), support_head_norm(num_support);
  support_pass.reserve(num_support);
  for (std::size_t s = 0; s < num_support; ++s) {
    const SupportExample& ex = plan.support[s];
    support_pass.push_back(detector.begin_pass(dataset.record(ex.image_id).image));
    const int level = detector.level_for_box(ex.box);
    const Matrix rraw = detector.rpn_branch(support_pass[s].maps, std::span<const Box>(&ex.box, 1),
                                            std::span<const int>(&level, 1), &support_rpn_tape[s]);
    support_rpn[s] = to_embedding(rraw, 0, &support_rpn_norm[s]);
    const auto head = detector.head_branch(support_pass[s].features, std::span<const Box>(&ex.box, 1),
                                           &support_head_tape[s]);
    support_head[s] = to_embedding(head.first, 0, &support_head_norm[s]);
  }
  std::map<int, PrototypeChain> rpn_chain, head_chain;
  PrototypeBank& bank = result.bank;
  bank.sigma = mc.sigma;
  bank.alpha = config.alpha;
  for (int c : plan.classes) {
    std::vector<std::size_t> shots;
    for (std::size_t s = 0; s < num_support; ++s) {
      if (plan.support[s].class_id == c) shots.push_back(s);
    }
    if (shots.empty()) throw ContractError("class " + std::to_string(c) + " has no support example");
    rpn_chain[c] = build_chain(shots, support_rpn, store.rpn, c, config.ma, config.alpha);
    head_chain[c] = build_chain(shots, support_head, store.head, c, config.ma, config.alpha);
    bank.rpn[c] = Prototype{c, rpn_chain[c].used, std::nullopt};
    bank.head[c] = Prototype{c, head_chain[c].used, std::nullopt};
  }

  // -- Query forward and sampling -----------------------------------------
  const std::size_t num_query = replay ? plan.queries.size() : query_indices.size();
  std::vector<Pass> passes;
  passes.reserve(num_query);
  std::vector<Tape> rpn_tapes(num_query), head_tapes(num_query);
  std::vector<std::vector<BoxDeltas>> rpn_deltas(num_query), head_deltas(num_query);
  result.rpn_embeddings.resize(num_query);
  result.head_embeddings.resize(num_query);
  std::vector<std::vector<double>> rpn_norms(num_query), head_norms(num_query);
  std::vector<std::vector<RpnSample>> rpn_used(num_query);
  std::vector<std::vector<HeadSample>> head_used(num_query);
  if (!replay) plan.queries.resize(num_query);

  for (std::size_t q = 0; q < num_query; ++q) {
    QueryPlan& qp = plan.queries[q];
    if (!replay) qp.image_id = episode.query.at(query_indices[q]).image_id;
    const Image& image = dataset.record(qp.image_id).image;
    passes.push_back(detector.begin_pass(image));
    Pass& pass = passes.back();
    const std::vector<Box> anchors = pass.anchors.flat();

    if (!replay) {
      const QueryImage& query = episode.query.at(query_indices[q]);
      std::vector<Box> gt, hard;
      std::vector<int> gt_class;
      for (const Annotation& a : query.annotations) {
        gt.push_back(a.box);
        gt_class.push_back(a.class_id);
      }
      for (const Annotation& a : query.hard_negatives) hard.push_back(a.box);

      // Anchors.
      const MatchResult m = match_boxes(anchors, gt, hard, MatchThresholds{});
      std::vector<std::size_t> pos, neg, hneg;
      for (std::size_t a = 0; a < anchors.size(); ++a) {
        if (m.labels[a] == MatchLabel::positive) pos.push_back(a);
        if (m.labels[a] == MatchLabel::negative) neg.push_back(a);
        if (m.labels[a] == MatchLabel::hard_negative) hneg.push_back(a);
      }
      const auto max_pos = static_cast<std::size_t>(config.rpn_batch * config.rpn_positive_fraction);
      const auto pos_pick = take(pos, max_pos, sample_rng);
      const auto neg_pick = take(neg, static_cast<std::size_t>(config.rpn_batch) - pos_pick.size(), sample_rng);
      std::vector<std::size_t> hard_pick;
      if (hem_rpn) hard_pick = take(hneg, static_cast<std::size_t>(config.rpn_hard_negatives), hard_rng);
      for (std::size_t a : pos_pick) {
        qp.rpn.push_back(RpnSample{a, MatchLabel::positive,
                                   encode_deltas(anchors[a], gt[static_cast<std::size_t>(m.matched_gt[a])])});
      }
      for (std::size_t a : neg_pick) qp.rpn.push_back(RpnSample{a, MatchLabel::negative, {}});
      for (std::size_t a : hard_pick) qp.rpn.push_back(RpnSample{a, MatchLabel::hard_negative, {}});

      // Proposals from the current prototypes, plus the ground truth boxes.
      const RpnOutput rpn = detector.rpn_output(pass.maps, pass.anchors);
      const ProposalSet proposals =
          select_proposals(rpn, bank, mc.train_proposals, mc.rpn_nms, image.bounds(), mc.min_box_size);
      std::vector<Box> candidates = proposals.boxes;
      candidates.insert(candidates.end(), gt.begin(), gt.end());
      candidates.insert(candidates.end(), hard.begin(), hard.end());
      const MatchResult hm =
          match_boxes(candidates, gt, hard, MatchThresholds{config.head_fg_iou, config.head_bg_iou, false});
      std::vector<std::size_t> hpos, hneg_easy, hhard;
      for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (hm.labels[i] == MatchLabel::positive) hpos.push_back(i);
        if (hm.labels[i] == MatchLabel::negative) hneg_easy.push_back(i);
        if (hm.labels[i] == MatchLabel::hard_negative) hhard.push_back(i);
      }
      const auto max_hpos = static_cast<std::size_t>(config.head_batch * config.head_positive_fraction);
      const auto hpos_pick = take(hpos, max_hpos, sample_rng);
      const auto hneg_pick =
          take(hneg_easy, static_cast<std::size_t>(config.head_batch) - hpos_pick.size(), sample_rng);
      std::vector<std::size_t> hhard_pick;
      if (hem_head) hhard_pick = take(hhard, static_cast<std::size_t>(config.head_hard_negatives), hard_rng);
      for (std::size_t i : hpos_pick) {
        const auto g = static_cast<std::size_t>(hm.matched_gt[i]);
        qp.head.push_back(HeadSample{candidates[i], MatchLabel::positive, gt_class[g], encode_deltas(candidates[i], gt[g])});
      }
      for (std::size_t i : hneg_pick) qp.head.push_back(HeadSample{candidates[i], MatchLabel::negative, kBackgroundLabel, {}});
      for (std::size_t i : hhard_pick) {
        qp.head.push_back(HeadSample{candidates[i], MatchLabel::hard_negative, kBackgroundLabel, {}});
      }
    }

    // Samples active under the current flags (a replayed plan may carry hard
    // negatives that HEM-off must ignore).
    for (const RpnSample& s : qp.rpn) {
      if (s.kind != MatchLabel::hard_negative || hem_rpn) rpn_used[q].push_back(s);
    }
    for (const HeadSample& s : qp.head) {
      if (s.kind != MatchLabel::hard_negative || hem_head) head_used[q].push_back(s);
    }

    std::vector<Box> rboxes;
    std::vector<int> rlevels;
    for (const RpnSample& s : rpn_used[q]) {
      rboxes.push_back(anchors[s.anchor]);
      rlevels.push_back(static_cast<int>(pass.anchors.level_of(s.anchor)));
      const auto slot = detector.anchor_slot(pass.anchors, s.anchor);
      const auto& d = pass.maps.deltas[static_cast<std::size_t>(slot.level)];
      rpn_deltas[q].push_back(BoxDeltas{static_cast<double>(d.at(slot.channel, slot.y, slot.x)),
                                        static_cast<double>(d.at(slot.channel + 1, slot.y, slot.x)),
                                        static_cast<double>(d.at(slot.channel + 2, slot.y, slot.x)),
                                        static_cast<double>(d.at(slot.channel + 3, slot.y, slot.x))});
    }
    const Matrix rraw = detector.rpn_branch(pass.maps, rboxes, rlevels, &rpn_tapes[q]);
    unit_rows(rraw, result.rpn_embeddings[q], rpn_norms[q]);

    std::vector<Box> hboxes;
    for (const HeadSample& s : head_used[q]) hboxes.push_back(s.box);
    if (!hboxes.empty()) {
      const auto head = detector.head_branch(pass.features, hboxes, &head_tapes[q]);
      unit_rows(head.first, result.head_embeddings[q], head_norms[q]);
      for (Eigen::Index r = 0; r < head.second.rows(); ++r) {
        head_deltas[q].push_back(BoxDeltas{static_cast<double>(head.second(r, 0)), static_cast<double>(head.second(r, 1)),
                                           static_cast<double>(head.second(r, 2)), static_cast<double>(head.second(r, 3))});
      }
    }
  }

  // -- Losses over the whole batch ------------------------------------------
  std::vector<RpnSample> all_rpn;
  std::vector<double> all_obj;
  std::vector<BoxDeltas> all_rdeltas;
  std::vector<int> obj_class;  // argmax prototype per sample
  std::vector<HeadSample> all_head;
  std::vector<ClassPosterior> all_post;
  std::vector<BoxDeltas> all_hdeltas;
  for (std::size_t q = 0; q < num_query; ++q) {
    for (std::size_t i = 0; i < rpn_used[q].size(); ++i) {
      const ClassLikelihoods lk = likelihoods_for(result.rpn_embeddings[q][i], bank.rpn, bank.sigma);
      int best = lk.begin()->first;
      for (const auto& [c, v] : lk) {
        if (v > lk.at(best)) best = c;
      }
      all_rpn.push_back(rpn_used[q][i]);
      all_obj.push_back(objectness_score(lk));
      obj_class.push_back(best);
      all_rdeltas.push_back(rpn_deltas[q][i]);
    }
    for (std::size_t i = 0; i < head_used[q].size(); ++i) {
      all_head.push_back(head_used[q][i]);
      all_post.push_back(class_posterior(likelihoods_for(result.head_embeddings[q][i], bank.head, bank.sigma)));
      all_hdeltas.push_back(head_deltas[q][i]);
    }
  }
  const RpnLossResult rl = rpn_losses(all_rpn, all_obj, all_rdeltas, config.log_eps);
  const HeadLossResult hl = head_losses(all_head, all_post, all_hdeltas, config.log_eps);

  // Background clustering over easy head negatives.
  ClusterLossResult cl;
  std::vector<Embedding> bc_points;
  if (config.bc) {
    if (!replay || plan.triplets.empty()) {
      plan.bc_negatives.clear();
      for (std::size_t q = 0; q < num_query; ++q) {
        for (std::size_t i = 0; i < head_used[q].size(); ++i) {
          if (head_used[q][i].kind == MatchLabel::negative) plan.bc_negatives.emplace_back(q, i);
        }
      }
    }
    for (const auto& [q, i] : plan.bc_negatives) bc_points.push_back(result.head_embeddings[q][i]);
    if (!replay || plan.triplets.empty()) {
      cl = background_cluster_loss(bc_points, config.bc_clusters, config.bc_margin,
                                   mix_seed(step_seed, kClusterStream), config.bc_kmeans_iters,
                                   config.bc_triplets_per_anchor);
      plan.triplets = cl.triplets;
    } else {
      cl = triplet_set_loss(bc_points, plan.triplets, config.bc_margin);
    }
  }

  LossBundle& L = result.losses;
  L.rpn_reg = rl.reg;
  L.rpn_obj = rl.obj;
  L.head_reg = hl.reg;
  L.head_cls = hl.cls;
  L.bg_cluster = config.bc ? cl.loss : 0.0;
  L.lambda_bc = config.bc ? config.lambda_bc : 0.0;
  L.finalize();
  check_finite(L.rpn_reg, "rpn regression");
  check_finite(L.rpn_obj, "rpn objectness");
  check_finite(L.head_reg, "head regression");
  check_finite(L.head_cls, "head classification");
  check_finite(L.bg_cluster, "background clustering");

  // Per-sample contributions.
  {
    std::size_t flat = 0;
    for (std::size_t q = 0; q < num_query; ++q) {
      for (std::size_t i = 0; i < rpn_used[q].size(); ++i, ++flat) {
        const RpnSample& s = rpn_used[q][i];
        result.contributions.push_back(LossContribution{LossTerm::rpn_obj, s.kind, q, s.anchor,
                                                        bce(all_obj[flat], s.kind == MatchLabel::positive, config.log_eps)});
        if (s.kind == MatchLabel::positive) {
          result.contributions.push_back(
              LossContribution{LossTerm::rpn_reg, s.kind, q, s.anchor, box_smooth_l1(all_rdeltas[flat], s.target)});
          ++result.positives;
        }
      }
    }
    flat = 0;
    for (std::size_t q = 0; q < num_query; ++q) {
      for (std::size_t i = 0; i < head_used[q].size(); ++i, ++flat) {
        const HeadSample& s = head_used[q][i];
        const ClassPosterior& p = all_post[flat];
        const double pt = s.label == kBackgroundLabel ? p.background : p.classes.at(s.label);
        result.contributions.push_back(
            LossContribution{LossTerm::head_cls, s.kind, q, i, -std::log(std::max(pt, config.log_eps))});
        if (s.kind == MatchLabel::positive) {
          result.contributions.push_back(
              LossContribution{LossTerm::head_reg, s.kind, q, i, box_smooth_l1(all_hdeltas[flat], s.target)});
        }
      }
    }
    for (std::size_t t = 0; t < cl.triplets.size() && config.bc; ++t) {
      const Triplet& tr = cl.triplets[t];
      result.contributions.push_back(LossContribution{
          LossTerm::bg_cluster, MatchLabel::negative, 0, t,
          triplet_loss(bc_points[tr[0]], bc_points[tr[1]], bc_points[tr[2]], config.bc_margin)});
    }
  }

  if (!options.backward) return result;

  // -- Backward -------------------------------------------------------------
  std::map<int, Vector> grad_rpn_proto, grad_head_proto;
  for (int c : plan.classes) {
    grad_rpn_proto[c] = Vector(dim, 0.0);
    grad_head_proto[c] = Vector(dim, 0.0);
  }
  std::size_t flat_r = 0, flat_h = 0;
  std::vector<std::vector<Vector>> grad_head_y(num_query);
  for (std::size_t q = 0; q < num_query; ++q) grad_head_y[q].assign(head_used[q].size(), Vector(dim, 0.0));
  if (config.bc) {
    for (std::size_t n = 0; n < plan.bc_negatives.size(); ++n) {
      const auto& [q, i] = plan.bc_negatives[n];
      add_to(grad_head_y[q][i], cl.grad[n], config.lambda_bc);
    }
  }
  for (std::size_t q = 0; q < num_query; ++q) {
    Pass& pass = passes[q];
    // RPN rows.
    std::vector<Vector> grad_raw_rows;
    for (std::size_t i = 0; i < rpn_used[q].size(); ++i, ++flat_r) {
      const int c = obj_class[flat_r];
      Vector gy(dim, 0.0);
      gaussian_likelihood_grad(result.rpn_embeddings[q][i], bank.rpn.at(c).vector, bank.sigma,
                               rl.grad_objectness[flat_r], gy, grad_rpn_proto[c]);
      grad_raw_rows.push_back(normalize_backward(result.rpn_embeddings[q][i].values(), rpn_norms[q][i], gy));
      const BoxDeltas& gd = rl.grad_deltas[flat_r];
      const auto slot = detector.anchor_slot(pass.anchors, rpn_used[q][i].anchor);
      auto& gmap = pass.grad_deltas[static_cast<std::size_t>(slot.level)];
      for (int j = 0; j < 4; ++j) gmap.at(slot.channel + j, slot.y, slot.x) += static_cast<T>(gd[static_cast<std::size_t>(j)]);
    }
    if (!grad_raw_rows.empty()) detector.rpn_branch_backward(rpn_tapes[q], to_matrix<T>(grad_raw_rows, dim), pass);

    // Head rows.
    if (!head_used[q].empty()) {
      const double inv_n = 1.0 / static_cast<double>(all_head.size());
      std::vector<Vector> grad_raw;
      std::vector<Vector> grad_d;
      for (std::size_t i = 0; i < head_used[q].size(); ++i, ++flat_h) {
        const HeadClassLoss hc = head_class_loss(result.head_embeddings[q][i], bank.head, bank.sigma,
                                                 head_used[q][i].label, config.log_eps);
        add_to(grad_head_y[q][i], hc.grad_z, inv_n);
        for (const auto& [c, g] : hc.grad_prototypes) add_to(grad_head_proto[c], g, inv_n);
        grad_raw.push_back(normalize_backward(result.head_embeddings[q][i].values(), head_norms[q][i], grad_head_y[q][i]));
        const BoxDeltas& gd = hl.grad_deltas[flat_h];
        grad_d.push_back(Vector{gd.dx, gd.dy, gd.dw, gd.dh});
      }
      detector.head_branch_backward(head_tapes[q], to_matrix<T>(grad_raw, dim), to_matrix<T>(grad_d, 4), pass);
    }
    detector.finish_pass(pass);
  }

  // Supports through the prototype chains.
  std::vector<Vector> grad_support_rpn(num_support, Vector(dim, 0.0)), grad_support_head(num_support, Vector(dim, 0.0));
  for (int c : plan.classes) {
    chain_backward(rpn_chain[c], grad_rpn_proto[c], config.alpha, grad_support_rpn);
    chain_backward(head_chain[c], grad_head_proto[c], config.alpha, grad_support_head);
  }
  for (std::size_t s = 0; s < num_support; ++s) {
    Pass& pass = support_pass[s];
    const Vector gr = normalize_backward(support_rpn[s].values(), support_rpn_norm[s], grad_support_rpn[s]);
    detector.rpn_branch_backward(support_rpn_tape[s], to_matrix<T>({gr}, dim), pass);
    const Vector gh = normalize_backward(support_head[s].values(), support_head_norm[s], grad_support_head[s]);
    Matrix zero_deltas = Matrix::Zero(1, 4);
    detector.head_branch_backward(support_head_tape[s], to_matrix<T>({gh}, dim), zero_deltas, pass);
    detector.finish_pass(pass);
  }
  return result;
}

template StepResult run_step<float>(Detector<float>&, const DatasetIndex&, const EpisodeTask&,
                                    const std::vector<std::size_t>&, const PrototypeStore&, const TrainConfig&,
                                    std::uint64_t, const StepOptions&);
template StepResult run_step<double>(Detector<double>&, const DatasetIndex&, const EpisodeTask&,
                                     const std::vector<std::size_t>&, const PrototypeStore&, const TrainConfig&,
                                     std::uint64_t, const StepOptions&);

// ---------------------------------------------------------------------------
// Loop

std::string format_metric(const MetricRecord& r) {
  std::ostringstream out;
  out << "iteration=" << r.iteration << " rpn_reg=" << format_double(r.losses.rpn_reg)
      << " rpn_obj=" << format_double(r.losses.rpn_obj) << " head_reg=" << format_double(r.losses.head_reg)
      << " head_cls=" << format_double(r.losses.head_cls) << " bg_cluster=" << format_double(r.losses.bg_cluster)
      << " total=" << format_double(r.losses.total) << " val_map=" << format_double(r.val_map);
  if (r.test_map) out << " test_map=" << format_double(*r.test_map);
  return out.str();
}

Trainer::Trainer(Detector<float>& detector, const DatasetIndex& dataset, TrainConfig config)
    : detector_(detector), dataset_(dataset), config_(std::move(config)),
      optimizer_(nn::AdamSettings{config_.learning_rate, 0.9, 0.999, 1e-8}) {
  config_.validate();
}

std::vector<LossBundle> Trainer::train_episode(const EpisodeTask& episode) {
  std::vector<LossBundle> out;
  const auto params = detector_.parameters();
  TrainConfig step_config = config_;
  step_config.ma = config_.ma && episodes_ >= config_.ma_warmup;
  ++episodes_;
  for (std::size_t start = 0; start < episode.query.size(); start += static_cast<std::size_t>(config_.batch_size)) {
    std::vector<std::size_t> batch;
    for (std::size_t i = start; i < std::min(episode.query.size(), start + static_cast<std::size_t>(config_.batch_size)); ++i) {
      batch.push_back(i);
    }
    detector_.zero_grad();
    const std::uint64_t step_seed = mix_seed(episode.rng_seed, 100 + start);
    const StepResult step = run_step(detector_, dataset_, episode, batch, store_, step_config, step_seed);
    optimizer_.step(params);
    if (step_config.ma) update_store(store_, step.bank);
    out.push_back(step.losses);
  }
  return out;
}

double Trainer::validate(const std::vector<int>& classes, const std::vector<std::string>& images,
                         const EvalSettings& settings) const {
  double sum = 0.0;
  for (int r = 0; r < config_.val_runs; ++r) {
    const auto seed = mix_seed(config_.seed, 7000 + static_cast<std::uint64_t>(r));
    sum += evaluate_split(detector_, dataset_, images, classes, "val", config_.val_shots, r, seed, settings).map;
  }
  return sum / config_.val_runs;
}

namespace {

std::vector<nn::Buffer<float>> snapshot(Detector<float>& detector) {
  std::vector<nn::Buffer<float>> out;
  for (auto* p : detector.parameters()) out.push_back(p->value);
  return out;
}

void restore(Detector<float>& detector, const std::vector<nn::Buffer<float>>& weights) {
  auto params = detector.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = weights[i];
}

KeyValues checkpoint_meta(const TrainConfig& config, int iteration, double val_map) {
  KeyValues meta;
  meta.set("iteration", std::to_string(iteration));
  meta.set("val_map", format_double(val_map));
  meta.set("flags", config.flag_name());
  meta.set("seed", std::to_string(config.seed));
  return meta;
}

}  // namespace

FitResult Trainer::fit(const FitOptions& options) {
  if (options.train_classes.empty()) throw ConfigError("no training classes");
  if (static_cast<int>(options.train_classes.size()) < config_.n_way) {
    throw ConfigError("n_way exceeds the number of training classes");
  }
  const DatasetIndex train_set = dataset_.subset(options.train_images);
  const std::set<int> pool(options.train_classes.begin(), options.train_classes.end());
  std::ofstream log;
  if (!options.metric_log.empty()) {
    log.open(options.metric_log, std::ios::app);
    if (!log) throw IoError("cannot open metric log " + options.metric_log.string());
  }

  FitResult fit;
  auto best_weights = snapshot(detector_);
  int evals_without_gain = 0;
  LossBundle window;
  int window_steps = 0;

  auto evaluate_now = [&](int iteration) {
    MetricRecord rec;
    rec.iteration = iteration;
    if (window_steps > 0) {
      const double inv = 1.0 / window_steps;
      rec.losses = LossBundle{window.rpn_reg * inv, window.rpn_obj * inv, window.head_reg * inv,
                              window.head_cls * inv, window.bg_cluster * inv, window.lambda_bc * inv, 0.0};
      rec.losses.total = window.total * inv;
    }
    rec.val_map = options.val_images.empty() ? 0.0 : validate(options.train_classes, options.val_images, options.val_settings);
    if (options.test_probe) rec.test_map = options.test_probe(detector_);
    fit.metrics.push_back(rec);
    if (log) log << format_metric(rec) << std::endl;
    window = LossBundle{};
    window_steps = 0;
    if (rec.val_map > fit.best_val_map) {
      fit.best_val_map = rec.val_map;
      fit.best_iteration = iteration;
      best_weights = snapshot(detector_);
      evals_without_gain = 0;
      if (!options.best_checkpoint.empty()) {
        save_checkpoint(make_checkpoint(detector_, PrototypeBank{}, checkpoint_meta(config_, iteration, rec.val_map)),
                        options.best_checkpoint);
      }
    } else {
      ++evals_without_gain;
    }
  };

  for (int it = 1; it <= config_.max_iterations; ++it) {
    const EpisodeTask episode = sample_episode(train_set, pool, config_.n_way, config_.k_shot,
                                               config_.query_per_class, mix_seed(config_.seed, static_cast<std::uint64_t>(it)));
    for (const LossBundle& l : train_episode(episode)) {
      window.rpn_reg += l.rpn_reg;
      window.rpn_obj += l.rpn_obj;
      window.head_reg += l.head_reg;
      window.head_cls += l.head_cls;
      window.bg_cluster += l.bg_cluster;
      window.lambda_bc += l.lambda_bc;
      window.total += l.total;
      ++window_steps;
    }
    fit.iterations = it;
    const bool last = it == config_.max_iterations;
    if ((config_.eval_every > 0 && it % config_.eval_every == 0) || last) {
      evaluate_now(it);
      if (config_.patience > 0 && evals_without_gain >= config_.patience) {
        fit.stopped_early = !last;
        break;
      }
    }
  }
  if (config_.max_iterations == 0) evaluate_now(0);
  if (!options.last_checkpoint.empty()) {
    save_checkpoint(make_checkpoint(detector_, PrototypeBank{}, checkpoint_meta(config_, fit.iterations, -1.0)),
                    options.last_checkpoint);
  }
  restore(detector_, best_weights);
  return fit;
}

}  // namespace protodet
