#include "protodet/episodes.hpp"

#include <algorithm>
#include <sstream>

#include "protodet/errors.hpp"
#include "protodet/rng.hpp"

namespace protodet {

std::vector<SupportExample> EpisodeTask::support_for(int class_id) const {
  std::vector<SupportExample> out;
  for (const SupportExample& s : support) {
    if (s.class_id == class_id) out.push_back(s);
  }
  return out;
}

AnnotationPartition filter_annotations(const ImageRecord& record, const std::set<int>& classes) {
  AnnotationPartition part;
  for (const Annotation& a : record.annotations) {
    (classes.count(a.class_id) ? part.kept : part.discarded).push_back(a);
  }
  return part;
}

namespace {

std::vector<std::string> candidates_for(const DatasetIndex& dataset, int class_id,
                                        const std::set<std::string>& excluded) {
  std::vector<std::string> out;
  auto it = dataset.per_class_index().find(class_id);
  if (it == dataset.per_class_index().end()) return out;
  for (const std::string& id : it->second) {
    if (!excluded.count(id)) out.push_back(id);
  }
  return out;
}

}  // namespace

std::vector<SupportExample> build_support_set(const DatasetIndex& dataset,
                                              const std::vector<int>& classes, int k,
                                              std::uint64_t seed,
                                              const std::set<std::string>& excluded) {
  if (k <= 0) throw ContractError("k must be positive");
  std::vector<SupportExample> support;
  for (int c : classes) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c) + 1000));
    std::vector<std::string> pool = candidates_for(dataset, c, excluded);
    if (pool.size() < static_cast<std::size_t>(k)) {
      throw SamplingError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                              " eligible images, need " + std::to_string(k),
                          c);
    }
    rng.shuffle(pool);
    for (int i = 0; i < k; ++i) {
      const ImageRecord& record = dataset.record(pool[static_cast<std::size_t>(i)]);
      std::vector<Box> instances;
      for (const Annotation& a : record.annotations) {
        if (a.class_id == c) instances.push_back(a.box);
      }
      support.push_back(SupportExample{record.image_id, c, instances[rng.index(instances.size())]});
    }
  }
  return support;
}

EpisodeTask sample_episode(const DatasetIndex& dataset, const std::set<int>& class_pool, int n,
                           int k, int query_images_per_class, std::uint64_t seed) {
  if (n <= 0 || static_cast<std::size_t>(n) > class_pool.size()) {
    throw ContractError("n must be in [1, |class_pool|]");
  }
  if (query_images_per_class < 0) throw ContractError("query_images_per_class must be >= 0");
  Rng rng(seed);
  std::vector<int> pool(class_pool.begin(), class_pool.end());
  // Partial Fisher-Yates: the first n entries become the episode classes.
  for (int i = 0; i < n; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  EpisodeTask task;
  task.rng_seed = seed;
  task.classes.assign(pool.begin(), pool.begin() + n);
  std::sort(task.classes.begin(), task.classes.end());
  const std::set<int> chosen(task.classes.begin(), task.classes.end());

  task.support = build_support_set(dataset, task.classes, k, mix_seed(seed, 1));
  std::set<std::string> used;
  for (const SupportExample& s : task.support) used.insert(s.image_id);

  Rng query_rng(mix_seed(seed, 2));
  for (int c : task.classes) {
    std::vector<std::string> pool_c = candidates_for(dataset, c, used);
    if (pool_c.size() < static_cast<std::size_t>(query_images_per_class)) {
      throw SamplingError("class " + std::to_string(c) + " has " + std::to_string(pool_c.size()) +
                              " query candidates, need " + std::to_string(query_images_per_class),
                          c);
    }
    query_rng.shuffle(pool_c);
    for (int i = 0; i < query_images_per_class; ++i) {
      const ImageRecord& record = dataset.record(pool_c[static_cast<std::size_t>(i)]);
      used.insert(record.image_id);
      AnnotationPartition part = filter_annotations(record, chosen);
      QueryImage q{record.image_id, std::move(part.kept), {}};
      for (const Annotation& a : part.discarded) {
        if (class_pool.count(a.class_id)) q.hard_negatives.push_back(a);
      }
      task.query.push_back(std::move(q));
    }
  }
  return task;
}

std::string format_episode_manifest(const EpisodeTask& task) {
  std::ostringstream out;
  out << "seed " << task.rng_seed << '\n';
  out << "classes";
  for (int c : task.classes) out << ' ' << c;
  out << '\n';
  for (const SupportExample& s : task.support) {
    out << "support " << s.class_id << ' ' << s.image_id << ' ' << s.box.x_min << ' '
        << s.box.y_min << ' ' << s.box.x_max << ' ' << s.box.y_max << '\n';
  }
  for (const QueryImage& q : task.query) out << "query " << q.image_id << '\n';
  return out.str();
}

}  // namespace protodet
