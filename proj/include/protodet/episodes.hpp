#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "protodet/dataio.hpp"

namespace protodet {

/// One annotated exemplar: a single box of one class inside a support image.
struct SupportExample {
  std::string image_id;
  int class_id = 0;
  Box box;

  friend bool operator==(const SupportExample&, const SupportExample&) = default;
};

/// A query image restricted to the episode classes, with the annotations of
/// other known classes kept aside as hard negatives.
struct QueryImage {
  std::string image_id;
  std::vector<Annotation> annotations;
  std::vector<Annotation> hard_negatives;
};

struct EpisodeTask {
  std::vector<int> classes;  // sorted
  std::vector<SupportExample> support;
  std::vector<QueryImage> query;
  std::uint64_t rng_seed = 0;

  std::vector<SupportExample> support_for(int class_id) const;
};

constexpr int kDefaultQueryImagesPerClass = 5;

struct AnnotationPartition {
  std::vector<Annotation> kept;
  std::vector<Annotation> discarded;
};

AnnotationPartition filter_annotations(const ImageRecord& record, const std::set<int>& classes);

/// k exemplars per class, each from a distinct image; the exemplar box is
/// drawn uniformly among the instances of the class in that image.
/// Images listed in `excluded` are never used.
std::vector<SupportExample> build_support_set(const DatasetIndex& dataset,
                                              const std::vector<int>& classes, int k,
                                              std::uint64_t seed,
                                              const std::set<std::string>& excluded = {});

/// Samples an n-way k-shot detection task from `class_pool`. Hard negatives
/// are limited to classes inside the pool so that held-out classes never
/// receive supervision.
EpisodeTask sample_episode(const DatasetIndex& dataset, const std::set<int>& class_pool, int n,
                           int k, int query_images_per_class, std::uint64_t seed);

/// Text manifest: `seed`, `classes`, one `support` line per exemplar and one
/// `query` line per image.
std::string format_episode_manifest(const EpisodeTask& task);

}  // namespace protodet
