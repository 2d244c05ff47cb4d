#include "cvm/metrics.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "cvm/losses.hpp"

namespace cvm {

AccuracyMatrix::AccuracyMatrix(std::size_t num_tasks)
    : tasks_(num_tasks), cells_(num_tasks * num_tasks) {}

std::size_t AccuracyMatrix::index(std::size_t i, std::size_t j) const {
  if (i < 1 || j < 1 || i > tasks_ || j > tasks_) {
    throw RangeError("accuracy matrix index (" + std::to_string(i) + ", " + std::to_string(j) +
                     ") outside 1.." + std::to_string(tasks_));
  }
  return (i - 1) * tasks_ + (j - 1);
}

void AccuracyMatrix::set(std::size_t after_task, std::size_t eval_task, double accuracy) {
  if (!(accuracy >= 0.0 && accuracy <= 1.0)) throw RangeError("accuracy outside [0, 1]");
  cells_[index(after_task, eval_task)] = accuracy;
}

std::optional<double> AccuracyMatrix::get(std::size_t after_task, std::size_t eval_task) const {
  return cells_[index(after_task, eval_task)];
}

double AccuracyMatrix::at(std::size_t after_task, std::size_t eval_task) const {
  auto v = get(after_task, eval_task);
  if (!v) {
    throw StateError("accuracy (" + std::to_string(after_task) + ", " +
                     std::to_string(eval_task) + ") has not been recorded");
  }
  return *v;
}

bool AccuracyMatrix::row_complete(std::size_t after_task) const {
  for (std::size_t j = 1; j <= tasks_; ++j) {
    if (!get(after_task, j)) return false;
  }
  return true;
}

std::string AccuracyMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "after_task";
  for (std::size_t j = 1; j <= tasks_; ++j) os << ",task_" << j;
  os << '\n';
  for (std::size_t i = 1; i <= tasks_; ++i) {
    os << i;
    for (std::size_t j = 1; j <= tasks_; ++j) {
      os << ',';
      if (auto v = get(i, j)) os << *v;
    }
    os << '\n';
  }
  return os.str();
}

AccuracyMatrix AccuracyMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  AccuracyMatrix m(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw DimensionError("accuracy matrix must be square");
    for (std::size_t j = 0; j < rows.size(); ++j) m.set(i + 1, j + 1, rows[i][j]);
  }
  return m;
}

double avg_accuracy(const AccuracyMatrix& m) {
  const std::size_t t = m.num_tasks();
  if (t == 0 || !m.row_complete(t)) throw StateError("final row of the accuracy matrix is incomplete");
  double sum = 0.0;
  for (std::size_t i = 1; i <= t; ++i) sum += m.at(t, i);
  return sum / static_cast<double>(t);
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t t = m.num_tasks();
  if (t < 2) throw StateError("forgetting needs at least 2 tasks");
  double sum = 0.0;
  for (std::size_t i = 1; i < t; ++i) sum += m.at(i, i) - m.at(t, i);
  return sum / static_cast<double>(t - 1);
}

double fw_score(std::span<const double> per_task_probe, std::size_t num_tasks) {
  if (num_tasks < 2) throw StateError("FW score needs at least 2 tasks");
  if (per_task_probe.size() != num_tasks - 1) {
    throw StateError("FW score needs " + std::to_string(num_tasks - 1) + " probe values, got " +
                     std::to_string(per_task_probe.size()));
  }
  double sum = 0.0;
  for (double a : per_task_probe) {
    if (!(a >= 0.0 && a <= 1.0)) throw StateError("probe accuracy missing or outside [0, 1]");
    sum += a;
  }
  return sum / static_cast<double>(per_task_probe.size());
}

double linear_probe(const FeatureNet& frozen, const LabeledData& train, const LabeledData& test,
                    const ProbeHyper& hyper) {
  if (train.size() == 0 || test.size() == 0) throw StateError("linear probe on an empty unseen set");
  if (hyper.batch_size == 0) throw ConfigError("probe batch size must be positive");

  std::map<ClassId, std::size_t> column;
  for (ClassId c : train.labels) column.emplace(c, 0);
  std::size_t k = 0;
  for (auto& kv : column) kv.second = k++;
  if (k < 2) throw StateError("linear probe needs at least two classes in the training data");

  const Tensor train_feat = infer(frozen, train.inputs);
  const Tensor test_feat = infer(frozen, test.inputs);
  const std::size_t dim = train_feat.cols();

  Rng init_rng = Rng::derive(hyper.seed, 0x9B0E);
  Rng shuffle_rng = Rng::derive(hyper.seed, 0x9B0F);
  const std::size_t no_hidden[] = {0};
  auto head = FeatureNet::mlp(dim, std::span<const std::size_t>(no_hidden, 0), k, LayerKind::relu,
                              false, init_rng);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<std::size_t> targets;
  for (std::size_t e = 0; e < hyper.epochs; ++e) {
    shuffle_rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t end = std::min(order.size(), start + hyper.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const Tensor x = train_feat.gather_rows(rows);
      targets.clear();
      for (auto r : rows) targets.push_back(column.at(train.labels[r]));
      auto [logits, tape] = forward(head, x);
      const auto loss = cross_entropy_loss(logits, targets);
      sgd_step(head, backward(head, tape, loss.grad), static_cast<float>(hyper.lr));
    }
  }

  const Tensor logits = infer(head, test_feat);
  std::vector<ClassId> by_column(k);
  for (const auto& [c, col] : column) by_column[col] = c;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < logits.rows(); ++b) {
    auto z = logits.row(b);
    const auto best = static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin());
    if (by_column[best] == test.labels[b]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

ZeroShotResult zero_shot_eval(const FeatureNet& frozen, const AnchorSetPtr& anchors,
                              std::span<const ClassId> unseen_classes, const LabeledData& test,
                              std::span<const ClassId> seen_classes) {
  if (unseen_classes.empty()) throw StateError("zero-shot evaluation with no unseen classes");
  if (test.size() == 0) throw StateError("zero-shot evaluation on an empty test set");
  const std::set<ClassId> seen(seen_classes.begin(), seen_classes.end());
  for (ClassId c : unseen_classes) {
    if (seen.count(c)) {
      throw StateError("class " + std::to_string(c) + " is listed as both seen and unseen");
    }
  }
  const SeenClassView view(anchors, {unseen_classes.begin(), unseen_classes.end()});
  const Tensor emb = infer(frozen, test.inputs);
  const auto pred = classify_batch(emb, view);
  std::size_t correct = 0;
  for (std::size_t b = 0; b < pred.size(); ++b) correct += pred[b] == test.labels[b] ? 1 : 0;
  return {static_cast<double>(correct) / static_cast<double>(test.size()),
          1.0 / static_cast<double>(view.size()), test.size()};
}

}  // namespace cvm
