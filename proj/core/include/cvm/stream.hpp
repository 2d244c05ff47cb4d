#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/rng.hpp"
#include "cvm/tensor.hpp"

namespace cvm {

struct LabeledData {
  Tensor inputs;  // [N, dim]
  std::vector<ClassId> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return inputs.cols(); }
  LabeledData subset(std::span<const std::size_t> rows) const;
};

struct Dataset {
  LabeledData train;
  LabeledData test;
  std::map<ClassId, std::string> class_names;
  // {height, width} when rows are flattened images; empty otherwise.
  std::vector<std::size_t> image_shape;

  std::vector<ClassId> classes() const;
};

enum class Scenario { class_il, domain_il };

std::string to_string(Scenario s);
Scenario scenario_from_string(const std::string& name);

struct Experience {
  std::uint32_t task_index = 0;  // 1-based
  LabeledData train;
  LabeledData test;
  std::vector<ClassId> class_set;  // ascending
};

struct TaskStream {
  Scenario scenario = Scenario::class_il;
  std::vector<Experience> experiences;
  std::map<ClassId, std::string> class_names;
  std::vector<std::size_t> image_shape;

  std::size_t num_tasks() const noexcept { return experiences.size(); }
};

// Classes (ascending) are cut into T contiguous equal groups; the order in
// which groups become tasks is a seeded permutation.
TaskStream split_class_incremental(const Dataset& dataset, std::size_t num_tasks,
                                   std::uint64_t seed);

struct InputTransform {
  enum class Kind { identity, noise, rotation, brightness };
  Kind kind = Kind::identity;
  // noise: standard deviation; rotation: degrees; brightness: additive shift.
  double amount = 0.0;

  static InputTransform parse(const std::string& text);  // "noise:0.1", "rotation:30", ...
  std::string describe() const;
};

enum class DomainTestMode {
  fixed,     // one untransformed test set shared by every task
  per_task,  // each task's test set carries that task's transform
};

// Every task gets all classes: the training rows are dealt per class into T
// disjoint shards and shard t is passed through schedule[t].
TaskStream make_domain_incremental(const Dataset& dataset, std::size_t num_tasks,
                                   const std::vector<InputTransform>& schedule, std::uint64_t seed,
                                   DomainTestMode test_mode = DomainTestMode::per_task);

// Applies a transform in place. Images (non-empty image_shape) are rotated as
// pictures and clamped to [0, 1] after a brightness shift; plain vectors are
// rotated pairwise in the (2k, 2k+1) coordinate planes.
void apply_transform(Tensor& inputs, const InputTransform& transform,
                     const std::vector<std::size_t>& image_shape, Rng& rng);

struct SynthDatasetSpec {
  std::size_t classes = 10;
  std::size_t dim = 32;
  std::size_t samples_per_class = 200;
  double alignment = 1.0;  // rho in [0, 1]
  double radius = 1.0;     // norm of every class mean
  double noise = 0.3;      // per-coordinate standard deviation
  double train_fraction = 0.8;
};

// Gaussian clusters whose class means are radius * normalize(rho * P a_c +
// sqrt(1 - rho^2) r_c), with P a random isometry from anchor space into input
// space and r_c random unit directions. At rho = 1 the class means reproduce
// the anchor cosine geometry exactly.
Dataset synth_dataset(const SynthDatasetSpec& spec, const AnchorSet& anchors, std::uint64_t seed);

}  // namespace cvm
