#pragma once

#include <cstddef>
#include <memory>
#include <optional>
#include <span>

#include "cvm/anchors.hpp"
#include "cvm/feature_net.hpp"
#include "cvm/rng.hpp"
#include "cvm/tensor.hpp"

namespace cvm {

enum class NegativeMining { hardest, uniform_random };

struct TripletConfig {
  double margin = 0.2;  // alpha
  NegativeMining mining = NegativeMining::hardest;
};

// Outer discrepancy between the current and snapshot distance vectors.
enum class RetentionMetric {
  squared,  // mean squared difference (default)
  cosine,   // cosine distance between the two distance vectors
};

// Scalar loss and its gradient with respect to the batch embeddings/logits.
template <class T>
struct BasicLossValue {
  T value{};
  BasicTensor<T> grad;
};

using LossValue = BasicLossValue<float>;

// Frozen model from the previous task boundary and the classes seen up to it.
struct RetentionContext {
  std::shared_ptr<const FeatureNet> snapshot;
  SeenClassView prev_classes;
};

// Retention inputs at the embedding level: snapshot embeddings of the same
// batch and the previously seen classes.
template <class T>
struct BasicRetentionTerm {
  BasicTensor<T> snapshot_embeddings;
  SeenClassView prev_classes;
  RetentionMetric metric = RetentionMetric::squared;
};

using RetentionTerm = BasicRetentionTerm<float>;

// Batch mean of max(0, d(f, C_pos) - d(f, C_neg) + margin). The negative is the
// nearest seen anchor other than the label (hardest) or a uniformly drawn one,
// which requires `rng`.
template <class T>
BasicLossValue<T> triplet_mapping_loss(const BasicTensor<T>& embeddings,
                                       std::span<const ClassId> labels, const SeenClassView& view,
                                       const TripletConfig& cfg, Rng* rng = nullptr);

// Batch mean of D(u, v) where u and v hold the distances of the current and
// snapshot embeddings to every previously seen anchor. The gradient flows
// only through the current embeddings.
template <class T>
BasicLossValue<T> retention_loss(const BasicTensor<T>& embeddings,
                                 const BasicRetentionTerm<T>& term);

// Runs both networks on `batch` and evaluates the retention loss.
LossValue retention_loss(const Tensor& batch, const FeatureNet& current,
                         const RetentionContext& ctx,
                         RetentionMetric metric = RetentionMetric::squared);

// L_m + beta * L_d. Without a retention term (first task) this is L_m
// exactly; with beta == 0 the retention term is not evaluated at all.
template <class T>
BasicLossValue<T> combined_loss(const BasicTensor<T>& embeddings, std::span<const ClassId> labels,
                                const SeenClassView& view, const TripletConfig& cfg,
                                const std::optional<BasicRetentionTerm<T>>& retention, T beta,
                                Rng* rng = nullptr);

// Mean negative log-softmax of the true column. Labels are column indices.
template <class T>
BasicLossValue<T> cross_entropy_loss(const BasicTensor<T>& logits,
                                     std::span<const std::size_t> labels);

}  // namespace cvm
