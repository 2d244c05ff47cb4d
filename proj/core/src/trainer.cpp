#include "cvm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

namespace cvm {

std::string to_string(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::naive_ce:
      return "naive-ce";
    case StrategyKind::naive_lm:
      return "naive-lm";
    case StrategyKind::er_ce:
      return "er-ce";
    case StrategyKind::er_lm:
      return "er-lm";
    case StrategyKind::cvm:
      return "cvm";
  }
  return "unknown";
}

StrategyKind strategy_kind_from_string(const std::string& name) {
  for (auto k : {StrategyKind::naive_ce, StrategyKind::naive_lm, StrategyKind::er_ce,
                 StrategyKind::er_lm, StrategyKind::cvm}) {
    if (to_string(k) == name) return k;
  }
  throw ConfigError("unknown strategy '" + name + "'");
}

bool Strategy::uses_anchors() const noexcept {
  return kind == StrategyKind::naive_lm || kind == StrategyKind::er_lm || kind == StrategyKind::cvm;
}

bool Strategy::uses_replay() const noexcept {
  return kind == StrategyKind::er_ce || kind == StrategyKind::er_lm || kind == StrategyKind::cvm;
}

// ---------------------------------------------------------------------------
// ClassifierHead
// ---------------------------------------------------------------------------

void ClassifierHead::add_classes(std::span<const ClassId> classes, Rng& rng) {
  std::vector<ClassId> fresh;
  for (ClassId c : classes) {
    if (!column_of(c) && std::find(fresh.begin(), fresh.end(), c) == fresh.end()) {
      fresh.push_back(c);
    }
  }
  if (fresh.empty()) return;
  const std::size_t old_k = classes_.size();
  const std::size_t new_k = old_k + fresh.size();
  FeatureNet::Layer layer{LayerKind::affine, feature_dim_, new_k,
                          std::vector<float>(feature_dim_ * new_k, 0.0f),
                          std::vector<float>(new_k, 0.0f)};
  if (old_k > 0) {
    const auto& old = net_.layer(0);
    for (std::size_t i = 0; i < feature_dim_; ++i) {
      for (std::size_t o = 0; o < old_k; ++o) layer.weight[i * new_k + o] = old.weight[i * old_k + o];
    }
    std::copy(old.bias.begin(), old.bias.end(), layer.bias.begin());
  }
  const double limit = std::sqrt(6.0 / static_cast<double>(feature_dim_ + new_k));
  for (std::size_t i = 0; i < feature_dim_; ++i) {
    for (std::size_t o = old_k; o < new_k; ++o) {
      layer.weight[i * new_k + o] = static_cast<float>(rng.uniform(-limit, limit));
    }
  }
  net_ = FeatureNet({std::move(layer)});
  classes_.insert(classes_.end(), fresh.begin(), fresh.end());
}

std::optional<std::size_t> ClassifierHead::column_of(ClassId id) const {
  auto it = std::find(classes_.begin(), classes_.end(), id);
  if (it == classes_.end()) return std::nullopt;
  return static_cast<std::size_t>(it - classes_.begin());
}

ClassifierHead ClassifierHead::restore(FeatureNet net, std::vector<ClassId> classes) {
  if (net.layers().size() != 1 || net.layer(0).kind != LayerKind::affine ||
      net.output_dim() != classes.size()) {
    throw StateError("stored classifier head does not match its class list");
  }
  ClassifierHead head(net.in_dim());
  head.net_ = std::move(net);
  head.classes_ = std::move(classes);
  return head;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

RunState make_run_state(const Strategy& strategy, const NetConfig& net_cfg,
                        const TrainHyper& hyper, std::size_t input_dim, AnchorSetPtr anchors,
                        std::uint64_t seed) {
  if (strategy.uses_anchors()) {
    if (!anchors) throw ConfigError(strategy.name() + " needs an anchor set");
    if (net_cfg.embed_dim != anchors->dim()) {
      throw ConfigError("embedding dim " + std::to_string(net_cfg.embed_dim) +
                        " must equal the anchor dim " + std::to_string(anchors->dim()));
    }
    if (!net_cfg.l2norm_head) {
      throw ConfigError("anchor-based strategies need the l2norm head on the feature network");
    }
  }
  if (hyper.batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(hyper.lr >= 0.0)) throw ConfigError("lr must be non-negative");
  if (strategy.kind == StrategyKind::cvm && !(strategy.beta >= 0.0)) {
    throw ConfigError("beta must be non-negative");
  }

  RunState state;
  state.anchors = std::move(anchors);
  state.init_rng = Rng::derive(seed, 1);
  state.shuffle_rng = Rng::derive(seed, 2);
  state.replay_rng = Rng::derive(seed, 3);
  state.negative_rng = Rng::derive(seed, 4);
  state.net = FeatureNet::mlp(input_dim, net_cfg.hidden, net_cfg.embed_dim, net_cfg.activation,
                              net_cfg.l2norm_head, state.init_rng);
  if (strategy.uses_head()) state.head = ClassifierHead(net_cfg.embed_dim);
  if (strategy.uses_replay()) {
    state.buffer.emplace(hyper.memory_size, input_dim, hyper.replay_policy,
                         Rng::derive(seed, 5).next_u64());
  }
  return state;
}

namespace {

void require_finite(double loss, const Experience& exp, std::size_t epoch, std::uint64_t step) {
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite loss " + std::to_string(loss) + " at task " +
                       std::to_string(exp.task_index) + ", epoch " + std::to_string(epoch + 1) +
                       ", step " + std::to_string(step));
  }
}

std::vector<ClassId> merge_sorted(const std::vector<ClassId>& a, const std::vector<ClassId>& b) {
  std::set<ClassId> s(a.begin(), a.end());
  s.insert(b.begin(), b.end());
  return {s.begin(), s.end()};
}

}  // namespace

TaskReport train_task(RunState& state, const Experience& experience, const Strategy& strategy,
                      const TrainHyper& hyper) {
  TaskReport report;
  report.task_index = experience.task_index;
  const auto& train = experience.train;
  if (train.size() == 0) throw StateError("task " + std::to_string(experience.task_index) + " has no training data");
  if (train.dim() != state.net.in_dim()) throw DimensionError("task inputs do not match network input width");

  std::optional<SeenClassView> view;
  if (strategy.uses_anchors()) {
    for (ClassId c : experience.class_set) {
      if (!state.anchors->contains(c)) {
        throw ConfigError("class " + std::to_string(c) + " has no anchor vector");
      }
    }
    view.emplace(state.anchors, merge_sorted(state.seen_classes, experience.class_set));
  } else {
    state.head->add_classes(experience.class_set, state.init_rng);
  }

  const bool retention = strategy.kind == StrategyKind::cvm && state.snapshot &&
                         state.prev_view && strategy.beta != 0.0;
  Rng* negative_rng =
      strategy.triplet.mining == NegativeMining::uniform_random ? &state.negative_rng : nullptr;
  const auto lr = static_cast<float>(hyper.lr);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> columns;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    state.shuffle_rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t loss_steps = 0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const Tensor x = train.inputs.gather_rows(rows);
      std::vector<ClassId> labels;
      labels.reserve(rows.size());
      for (auto r : rows) labels.push_back(train.labels[r]);

      MixedBatch batch;
      if (state.buffer) {
        batch = concat_batch(x, labels, *state.buffer, hyper.replay_fraction, state.replay_rng);
        if (batch.warning) ++report.replay_warnings;
      } else {
        batch = MixedBatch{x, labels, std::vector<bool>(labels.size(), false), {}};
      }

      ++state.steps;
      double step_loss = 0.0;
      if (strategy.uses_anchors()) {
        auto [emb, tape] = forward(state.net, batch.inputs);
        LossValue loss;
        if (strategy.kind == StrategyKind::cvm) {
          std::optional<RetentionTerm> term;
          if (retention) {
            term = RetentionTerm{infer(*state.snapshot, batch.inputs), *state.prev_view,
                                 strategy.retention_metric};
          }
          loss = combined_loss(emb, batch.labels, *view, strategy.triplet, term,
                               static_cast<float>(strategy.beta), negative_rng);
        } else {
          loss = triplet_mapping_loss(emb, batch.labels, *view, strategy.triplet, negative_rng);
        }
        require_finite(loss.value, experience, epoch, state.steps);
        step_loss = loss.value;
        sgd_step(state.net, backward(state.net, tape, loss.grad), lr);
      } else {
        auto& head = *state.head;
        auto [features, net_tape] = forward(state.net, batch.inputs);
        auto [logits, head_tape] = forward(head.net(), features);
        columns.clear();
        for (ClassId c : batch.labels) columns.push_back(*head.column_of(c));
        const auto loss = cross_entropy_loss(logits, columns);
        require_finite(loss.value, experience, epoch, state.steps);
        step_loss = loss.value;
        auto [head_grads, feature_grad] = backward_with_input(head.net(), head_tape, loss.grad);
        const auto net_grads = backward(state.net, net_tape, feature_grad);
        sgd_step(head.net(), head_grads, lr);
        sgd_step(state.net, net_grads, lr);
      }
      loss_sum += step_loss;
      ++loss_steps;

      if (state.buffer && hyper.buffer_update == BufferUpdate::during && epoch == 0) {
        for (std::size_t r = 0; r < x.rows(); ++r) {
          state.buffer->insert(x.row(r), labels[r], experience.task_index);
        }
      }
    }
    report.epoch_loss.push_back(loss_steps ? loss_sum / static_cast<double>(loss_steps) : 0.0);
    report.steps += loss_steps;
  }

  if (state.buffer && (hyper.buffer_update == BufferUpdate::after || hyper.epochs == 0)) {
    for (std::size_t r = 0; r < train.size(); ++r) {
      state.buffer->insert(train.inputs.row(r), train.labels[r], experience.task_index);
    }
  }
  return report;
}

void snapshot_and_advance(RunState& state, const Experience& completed, const Strategy& strategy) {
  state.seen_classes = merge_sorted(state.seen_classes, completed.class_set);
  ++state.tasks_completed;
  if (strategy.kind == StrategyKind::cvm) {
    state.snapshot = std::make_shared<const FeatureNet>(state.net);
    state.prev_view.emplace(state.anchors, state.seen_classes);
  }
}

std::vector<ClassId> predict(const RunState& state, const Tensor& inputs, const Strategy& strategy) {
  if (state.seen_classes.empty()) throw StateError("prediction before any class has been seen");
  const Tensor features = infer(state.net, inputs);
  if (strategy.uses_anchors()) {
    return classify_batch(features, SeenClassView(state.anchors, state.seen_classes));
  }
  const auto& head = *state.head;
  const Tensor logits = infer(head.net(), features);
  std::vector<bool> visible(head.classes().size(), false);
  for (std::size_t col = 0; col < visible.size(); ++col) {
    visible[col] = std::binary_search(state.seen_classes.begin(), state.seen_classes.end(),
                                      head.classes()[col]);
  }
  std::vector<ClassId> out(inputs.rows());
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    auto z = logits.row(b);
    float best = -std::numeric_limits<float>::infinity();
    std::size_t best_col = 0;
    bool found = false;
    for (std::size_t col = 0; col < z.size(); ++col) {
      if (!visible[col]) continue;  // unseen classes are masked to -inf
      if (!found || z[col] > best) {
        best = z[col];
        best_col = col;
        found = true;
      }
    }
    if (!found) throw StateError("classifier head has no seen class columns");
    out[b] = head.classes()[best_col];
  }
  return out;
}

double evaluate(const RunState& state, const LabeledData& data, const Strategy& strategy) {
  if (data.size() == 0) throw StateError("evaluation on an empty test set");
  const auto pred = predict(state, data.inputs, strategy);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

RunResult run_stream(const TaskStream& stream, const Strategy& strategy, const NetConfig& net_cfg,
                     const TrainHyper& hyper, AnchorSetPtr anchors, std::uint64_t seed,
                     const RunOptions& options) {
  const std::size_t t_count = stream.num_tasks();
  if (t_count < 2) throw ConfigError("a task stream needs at least 2 tasks");
  RunResult result{AccuracyMatrix(t_count), {},
                   make_run_state(strategy, net_cfg, hyper, stream.experiences.front().train.dim(),
                                  std::move(anchors), seed)};
  auto& state = result.final_state;
  for (std::size_t t = 0; t < t_count; ++t) {
    const auto& exp = stream.experiences[t];
    result.reports.push_back(train_task(state, exp, strategy, hyper));
    snapshot_and_advance(state, exp, strategy);
    for (std::size_t j = 0; j < t_count; ++j) {
      result.accuracy.set(t + 1, j + 1, evaluate(state, stream.experiences[j].test, strategy));
    }
    if (options.on_task_end) options.on_task_end(exp.task_index, state);
  }
  return result;
}

}  // namespace cvm
