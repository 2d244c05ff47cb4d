#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/feature_net.hpp"
#include "cvm/losses.hpp"
#include "cvm/metrics.hpp"
#include "cvm/replay.hpp"
#include "cvm/rng.hpp"
#include "cvm/stream.hpp"

namespace cvm {

enum class StrategyKind { naive_ce, naive_lm, er_ce, er_lm, cvm };

std::string to_string(StrategyKind kind);
StrategyKind strategy_kind_from_string(const std::string& name);

struct Strategy {
  StrategyKind kind = StrategyKind::cvm;
  double beta = 1.0;  // cvm only
  TripletConfig triplet;
  RetentionMetric retention_metric = RetentionMetric::squared;

  bool uses_anchors() const noexcept;
  bool uses_head() const noexcept { return !uses_anchors(); }
  bool uses_replay() const noexcept;
  std::string name() const { return to_string(kind); }
};

struct NetConfig {
  std::vector<std::size_t> hidden = {64, 64};
  LayerKind activation = LayerKind::relu;
  std::size_t embed_dim = 16;  // must equal the anchor dim for anchor strategies
  bool l2norm_head = true;
};

enum class BufferUpdate {
  during,  // each current-task sample is inserted once, in the first epoch
  after,   // all current-task samples are inserted once the task is finished
};

struct TrainHyper {
  double lr = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  std::size_t memory_size = 500;
  double replay_fraction = 1.0;
  ReplayPolicy replay_policy = ReplayPolicy::class_balanced;
  BufferUpdate buffer_update = BufferUpdate::during;
};

// Linear classifier c_omega over the features. One output column per class,
// appended in order of first appearance.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  explicit ClassifierHead(std::size_t feature_dim) : feature_dim_(feature_dim) {}

  // New columns get Glorot-uniform weights and zero bias.
  void add_classes(std::span<const ClassId> classes, Rng& rng);

  std::size_t feature_dim() const noexcept { return feature_dim_; }
  const std::vector<ClassId>& classes() const noexcept { return classes_; }
  std::optional<std::size_t> column_of(ClassId id) const;
  const FeatureNet& net() const noexcept { return net_; }
  FeatureNet& net() noexcept { return net_; }

  // Rebuilds a head from a stored affine layer and its column classes.
  static ClassifierHead restore(FeatureNet net, std::vector<ClassId> classes);

 private:
  std::size_t feature_dim_ = 0;
  std::vector<ClassId> classes_;
  FeatureNet net_;  // single affine layer [feature_dim, classes]
};

struct RunState {
  FeatureNet net;
  std::optional<ClassifierHead> head;
  std::optional<ReplayBuffer> buffer;
  // f_{theta^{t-1}} and the classes seen through task t-1 (cvm only).
  std::shared_ptr<const FeatureNet> snapshot;
  std::optional<SeenClassView> prev_view;
  std::vector<ClassId> seen_classes;  // ascending
  std::uint32_t tasks_completed = 0;
  std::uint64_t steps = 0;
  AnchorSetPtr anchors;
  Rng init_rng;
  Rng shuffle_rng;
  Rng replay_rng;
  Rng negative_rng;
};

// Fresh state for one run: network initialised from `seed`, buffer allocated
// for replay strategies, head allocated for ce strategies.
RunState make_run_state(const Strategy& strategy, const NetConfig& net_cfg,
                        const TrainHyper& hyper, std::size_t input_dim, AnchorSetPtr anchors,
                        std::uint64_t seed);

struct TaskReport {
  std::uint32_t task_index = 0;
  std::vector<double> epoch_loss;  // mean step loss per epoch
  std::size_t steps = 0;
  std::size_t replay_warnings = 0;
};

TaskReport train_task(RunState& state, const Experience& experience, const Strategy& strategy,
                      const TrainHyper& hyper);

// Marks the experience's classes as seen and, for cvm, freezes a copy of the
// current network together with the classes seen so far.
void snapshot_and_advance(RunState& state, const Experience& completed, const Strategy& strategy);

// Accuracy on `data` restricted to the currently seen classes.
double evaluate(const RunState& state, const LabeledData& data, const Strategy& strategy);
std::vector<ClassId> predict(const RunState& state, const Tensor& inputs, const Strategy& strategy);

struct RunOptions {
  // Called after each task with (task index, state); used to write checkpoints.
  std::function<void(std::uint32_t, const RunState&)> on_task_end;
};

struct RunResult {
  AccuracyMatrix accuracy;
  std::vector<TaskReport> reports;
  RunState final_state;
};

RunResult run_stream(const TaskStream& stream, const Strategy& strategy, const NetConfig& net_cfg,
                     const TrainHyper& hyper, AnchorSetPtr anchors, std::uint64_t seed,
                     const RunOptions& options = {});

}  // namespace cvm
