#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvm/error.hpp"
#include "cvm/tensor.hpp"

namespace cvm {

using ClassId = std::uint32_t;

// The frozen conceptual space: one unit-norm vector per class. Immutable once
// built; share it through std::shared_ptr<const AnchorSet>.
class AnchorSet {
 public:
  struct Entry {
    std::string label;
    std::vector<float> vector;
    friend bool operator==(const Entry&, const Entry&) = default;
  };

  // Validates dims and normalizes every vector to unit norm; zero vectors are
  // rejected.
  AnchorSet(std::size_t dim, std::map<ClassId, Entry> entries, std::string provenance = {});

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return entries_.size(); }
  const std::string& provenance() const noexcept { return provenance_; }

  bool contains(ClassId id) const { return entries_.count(id) != 0; }
  std::span<const float> vector(ClassId id) const;
  const std::string& label(ClassId id) const;
  std::optional<ClassId> find_label(const std::string& label) const;

  // Ascending class ids.
  std::vector<ClassId> ids() const;
  const std::map<ClassId, Entry>& entries() const noexcept { return entries_; }

  friend bool operator==(const AnchorSet&, const AnchorSet&) = default;

 private:
  std::size_t dim_;
  std::map<ClassId, Entry> entries_;
  std::string provenance_;
};

using AnchorSetPtr = std::shared_ptr<const AnchorSet>;

// The subset of anchors that are currently "seen". Ids are kept in ascending
// order, which is also the order of every per-class vector derived from a view.
class SeenClassView {
 public:
  SeenClassView() = default;
  SeenClassView(AnchorSetPtr anchors, std::vector<ClassId> ids);

  const AnchorSet& anchors() const { return *anchors_; }
  const AnchorSetPtr& anchors_ptr() const noexcept { return anchors_; }
  const std::vector<ClassId>& ids() const noexcept { return ids_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  bool contains(ClassId id) const;
  // Position of `id` inside ids(), or nullopt.
  std::optional<std::size_t> index_of(ClassId id) const;

  SeenClassView with(std::span<const ClassId> more) const;

 private:
  AnchorSetPtr anchors_;
  std::vector<ClassId> ids_;
};

// 1 - <u,v>/(|u||v|) without clamping; used inside the losses so values and
// gradients stay consistent.
template <class T, class U>
T cosine_distance_raw(std::span<const T> u, std::span<const U> v) {
  if (u.size() != v.size()) throw DimensionError("cosine distance of vectors of unequal length");
  T uv{0}, uu{0}, vv{0};
  for (std::size_t k = 0; k < u.size(); ++k) {
    const T vk = static_cast<T>(v[k]);
    uv += u[k] * vk;
    uu += u[k] * u[k];
    vv += vk * vk;
  }
  if (!(uu > T{0}) || !(vv > T{0})) throw NumericError("cosine distance of a zero-norm vector");
  return T{1} - uv / (std::sqrt(uu) * std::sqrt(vv));
}

// d/du of cosine_distance_raw(u, v), accumulated into `out` scaled by `scale`.
template <class T, class U>
void add_cosine_distance_grad(std::span<const T> u, std::span<const U> v, T scale,
                              std::span<T> out) {
  T uv{0}, uu{0}, vv{0};
  for (std::size_t k = 0; k < u.size(); ++k) {
    const T vk = static_cast<T>(v[k]);
    uv += u[k] * vk;
    uu += u[k] * u[k];
    vv += vk * vk;
  }
  const T nu = std::sqrt(uu);
  const T nv = std::sqrt(vv);
  // d = 1 - uv/(nu nv);  dd/du = -v/(nu nv) + uv u/(nu^3 nv)
  const T a = -scale / (nu * nv);
  const T b = scale * uv / (uu * nu * nv);
  for (std::size_t k = 0; k < u.size(); ++k) out[k] += a * static_cast<T>(v[k]) + b * u[k];
}

// Cosine distance clamped to [0, 2].
double cosine_distance(std::span<const float> u, std::span<const float> v);

// Nearest seen anchor by cosine distance; ties go to the smallest class id.
ClassId classify(std::span<const float> embedding, const SeenClassView& view);
std::vector<ClassId> classify_batch(const Tensor& embeddings, const SeenClassView& view);

// Pairwise cosine distances in ascending id order.
std::vector<std::vector<double>> distance_matrix(const AnchorSet& anchors);

// Binary (magic "CVMANC1\0") or JSON text; detected from the first bytes.
AnchorSet load_anchors(const std::string& path);
void save_anchors_binary(const AnchorSet& anchors, const std::string& path);
void save_anchors_text(const AnchorSet& anchors, const std::string& path);

AnchorSet parse_anchors_binary(std::span<const std::uint8_t> bytes,
                               const std::string& provenance = {});
std::vector<std::uint8_t> encode_anchors_binary(const AnchorSet& anchors);

struct ClusterSpec {
  // Partition of 0..k-1 into semantic groups. Empty means one group per class.
  std::vector<std::vector<ClassId>> groups;
  double s_in = 0.8;   // minimum within-group cosine similarity
  double s_out = 0.0;  // maximum across-group cosine similarity
};

// k unit vectors labelled "class_0".."class_{k-1}" whose pairwise similarities
// follow `spec`: exactly s_in inside a group, 0 across groups.
AnchorSet synth_anchors(std::size_t k, std::size_t dim, const ClusterSpec& spec,
                        std::uint64_t seed);

std::string synthetic_label(ClassId id);

}  // namespace cvm
