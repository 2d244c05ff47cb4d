#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/feature_net.hpp"
#include "cvm/stream.hpp"

namespace cvm {

// T x T accuracies. Entry (i, j), both 1-based, is the accuracy on task j's
// test set measured right after training task i.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t num_tasks);

  std::size_t num_tasks() const noexcept { return tasks_; }
  void set(std::size_t after_task, std::size_t eval_task, double accuracy);
  std::optional<double> get(std::size_t after_task, std::size_t eval_task) const;
  double at(std::size_t after_task, std::size_t eval_task) const;  // throws if unset
  bool row_complete(std::size_t after_task) const;

  // Header "after_task,task_1,...,task_T"; unset cells are left empty.
  std::string to_csv() const;
  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows);

  friend bool operator==(const AccuracyMatrix&, const AccuracyMatrix&) = default;

 private:
  std::size_t index(std::size_t i, std::size_t j) const;
  std::size_t tasks_ = 0;
  std::vector<std::optional<double>> cells_;
};

// Mean of the final row.
double avg_accuracy(const AccuracyMatrix& m);

// mean over i < T of (Acc_{i,i} - Acc_{T,i}); positive when accuracy drops.
double forgetting(const AccuracyMatrix& m);

// Mean of the T-1 per-task probe accuracies.
double fw_score(std::span<const double> per_task_probe, std::size_t num_tasks);

struct ProbeHyper {
  std::size_t epochs = 100;
  double lr = 0.05;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
};

// Trains a fresh affine + softmax head on the frozen network's embeddings of
// `train` and returns its accuracy on `test`. The network is not modified.
double linear_probe(const FeatureNet& frozen, const LabeledData& train, const LabeledData& test,
                    const ProbeHyper& hyper);

struct ZeroShotResult {
  double accuracy = 0.0;
  double chance = 0.0;  // 1 / |unseen|
  std::size_t samples = 0;
};

// Nearest-anchor accuracy on `test` with candidates restricted to
// `unseen_classes`, which must not intersect `seen_classes`.
ZeroShotResult zero_shot_eval(const FeatureNet& frozen, const AnchorSetPtr& anchors,
                              std::span<const ClassId> unseen_classes, const LabeledData& test,
                              std::span<const ClassId> seen_classes = {});

}  // namespace cvm
