#include "cvm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace cvm {

template <class T>
BasicLossValue<T> triplet_mapping_loss(const BasicTensor<T>& embeddings,
                                       std::span<const ClassId> labels, const SeenClassView& view,
                                       const TripletConfig& cfg, Rng* rng) {
  const std::size_t batch = embeddings.rows();
  if (batch == 0) throw DimensionError("triplet loss on an empty batch");
  if (labels.size() != batch) throw DimensionError("label count does not match batch size");
  if (cfg.margin < 0.0) throw ConfigError("triplet margin must be non-negative");
  if (view.size() < 2) throw DegenerateInputError("triplet loss needs at least two seen classes");
  if (cfg.mining == NegativeMining::uniform_random && rng == nullptr) {
    throw StateError("uniform-random negative mining needs a random stream");
  }
  const auto& anchors = view.anchors();
  if (embeddings.cols() != anchors.dim()) throw DimensionError("embedding/anchor dim mismatch");

  BasicLossValue<T> out{T{0}, BasicTensor<T>({batch, embeddings.cols()})};
  const T margin = static_cast<T>(cfg.margin);
  const T inv_b = T{1} / static_cast<T>(batch);
  std::vector<T> dist(view.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const auto pos_idx = view.index_of(labels[b]);
    if (!pos_idx) {
      throw StateError("label " + std::to_string(labels[b]) + " is not among the seen classes");
    }
    auto f = embeddings.row(b);
    std::size_t neg_idx = 0;
    if (cfg.mining == NegativeMining::hardest) {
      T best = std::numeric_limits<T>::infinity();
      for (std::size_t c = 0; c < view.size(); ++c) {
        if (c == *pos_idx) continue;
        const T d = cosine_distance_raw<T, float>(f, anchors.vector(view.ids()[c]));
        if (d < best) {
          best = d;
          neg_idx = c;
        }
      }
    } else {
      neg_idx = static_cast<std::size_t>(rng->uniform_index(view.size() - 1));
      if (neg_idx >= *pos_idx) ++neg_idx;
    }
    const auto pos = anchors.vector(view.ids()[*pos_idx]);
    const auto neg = anchors.vector(view.ids()[neg_idx]);
    const T hinge = cosine_distance_raw<T, float>(f, pos) - cosine_distance_raw<T, float>(f, neg) + margin;
    if (hinge > T{0}) {
      out.value += hinge;
      auto g = out.grad.row(b);
      add_cosine_distance_grad<T, float>(f, pos, inv_b, g);
      add_cosine_distance_grad<T, float>(f, neg, -inv_b, g);
    }
  }
  out.value *= inv_b;
  return out;
}

template <class T>
BasicLossValue<T> retention_loss(const BasicTensor<T>& embeddings,
                                 const BasicRetentionTerm<T>& term) {
  const auto& prev = term.prev_classes;
  if (prev.empty()) throw StateError("retention loss needs at least one previously seen class");
  const std::size_t batch = embeddings.rows();
  if (batch == 0) throw DimensionError("retention loss on an empty batch");
  if (term.snapshot_embeddings.shape() != embeddings.shape()) {
    throw DimensionError("snapshot embeddings do not match current embeddings");
  }
  const auto& anchors = prev.anchors();
  const std::size_t k = prev.size();
  const T inv_b = T{1} / static_cast<T>(batch);
  BasicLossValue<T> out{T{0}, BasicTensor<T>({batch, embeddings.cols()})};
  std::vector<T> u(k), v(k), du(k);
  for (std::size_t b = 0; b < batch; ++b) {
    auto f = embeddings.row(b);
    auto fs = term.snapshot_embeddings.row(b);
    for (std::size_t c = 0; c < k; ++c) {
      const auto a = anchors.vector(prev.ids()[c]);
      u[c] = cosine_distance_raw<T, float>(f, a);
      v[c] = cosine_distance_raw<T, float>(fs, a);
    }
    T term_value{0};
    std::fill(du.begin(), du.end(), T{0});
    if (term.metric == RetentionMetric::squared) {
      const T inv_k = T{1} / static_cast<T>(k);
      for (std::size_t c = 0; c < k; ++c) {
        const T diff = u[c] - v[c];
        term_value += diff * diff * inv_k;
        du[c] = T{2} * diff * inv_k;
      }
    } else if (u != v) {
      // equal distance vectors sit at the minimum: zero value, zero gradient
      std::span<const T> us(u), vs(v);
      term_value = cosine_distance_raw<T, T>(us, vs);
      add_cosine_distance_grad<T, T>(us, vs, T{1}, std::span<T>(du));
    }
    out.value += term_value;
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < k; ++c) {
      if (du[c] != T{0}) {
        add_cosine_distance_grad<T, float>(f, anchors.vector(prev.ids()[c]), du[c] * inv_b, g);
      }
    }
  }
  out.value *= inv_b;
  return out;
}

LossValue retention_loss(const Tensor& batch, const FeatureNet& current,
                         const RetentionContext& ctx, RetentionMetric metric) {
  if (!ctx.snapshot) throw StateError("retention context has no snapshot network");
  if (!ctx.snapshot->same_architecture(current)) {
    throw StateError("snapshot and current network differ in architecture");
  }
  const Tensor current_emb = infer(current, batch);
  return retention_loss(current_emb,
                        RetentionTerm{infer(*ctx.snapshot, batch), ctx.prev_classes, metric});
}

template <class T>
BasicLossValue<T> combined_loss(const BasicTensor<T>& embeddings, std::span<const ClassId> labels,
                                const SeenClassView& view, const TripletConfig& cfg,
                                const std::optional<BasicRetentionTerm<T>>& retention, T beta,
                                Rng* rng) {
  if (!(beta >= T{0})) throw ConfigError("beta must be non-negative");
  auto total = triplet_mapping_loss(embeddings, labels, view, cfg, rng);
  if (!retention || beta == T{0}) return total;
  const auto ret = retention_loss(embeddings, *retention);
  total.value += beta * ret.value;
  for (std::size_t k = 0; k < total.grad.size(); ++k) total.grad[k] += beta * ret.grad[k];
  return total;
}

template <class T>
BasicLossValue<T> cross_entropy_loss(const BasicTensor<T>& logits,
                                     std::span<const std::size_t> labels) {
  const std::size_t batch = logits.rows();
  const std::size_t classes = logits.cols();
  if (classes < 2) throw DimensionError("cross-entropy needs at least two classes");
  if (batch == 0) throw DimensionError("cross-entropy on an empty batch");
  if (labels.size() != batch) throw DimensionError("label count does not match batch size");
  BasicLossValue<T> out{T{0}, BasicTensor<T>({batch, classes})};
  const T inv_b = T{1} / static_cast<T>(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    if (labels[b] >= classes) {
      throw RangeError("label " + std::to_string(labels[b]) + " out of range for " +
                       std::to_string(classes) + " classes");
    }
    auto z = logits.row(b);
    const T zmax = *std::max_element(z.begin(), z.end());
    T sum{0};
    for (T zi : z) sum += std::exp(zi - zmax);
    const T log_sum = std::log(sum);
    out.value += -(z[labels[b]] - zmax - log_sum);
    auto g = out.grad.row(b);
    for (std::size_t c = 0; c < classes; ++c) {
      const T p = std::exp(z[c] - zmax - log_sum);
      g[c] = (p - (c == labels[b] ? T{1} : T{0})) * inv_b;
    }
  }
  out.value *= inv_b;
  return out;
}

#define CVM_INSTANTIATE(T)                                                                     \
  template BasicLossValue<T> triplet_mapping_loss(const BasicTensor<T>&, std::span<const ClassId>, \
                                                  const SeenClassView&, const TripletConfig&,   \
                                                  Rng*);                                        \
  template BasicLossValue<T> retention_loss(const BasicTensor<T>&, const BasicRetentionTerm<T>&); \
  template BasicLossValue<T> combined_loss(const BasicTensor<T>&, std::span<const ClassId>,     \
                                           const SeenClassView&, const TripletConfig&,          \
                                           const std::optional<BasicRetentionTerm<T>>&, T,      \
                                           Rng*);                                               \
  template BasicLossValue<T> cross_entropy_loss(const BasicTensor<T>&,                          \
                                                std::span<const std::size_t>);

CVM_INSTANTIATE(float)
CVM_INSTANTIATE(double)

#undef CVM_INSTANTIATE

}  // namespace cvm
