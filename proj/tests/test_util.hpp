#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/feature_net.hpp"
#include "cvm/rng.hpp"
#include "cvm/tensor.hpp"

namespace cvm::test {

inline Tensor random_tensor(std::size_t rows, std::size_t cols, std::uint64_t seed,
                            double scale = 1.0) {
  Rng rng(seed);
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
  return t;
}

inline FeatureNet random_net(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                             LayerKind act, bool l2norm, std::uint64_t seed) {
  Rng rng(seed);
  return FeatureNet::mlp(in, hidden, out, act, l2norm, rng);
}

// k classes on the axes of R^dim (k <= dim).
inline AnchorSetPtr axis_anchors(std::size_t k, std::size_t dim) {
  std::map<ClassId, AnchorSet::Entry> e;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<float> v(dim, 0.0f);
    v[c] = 1.0f;
    e.emplace(static_cast<ClassId>(c), AnchorSet::Entry{synthetic_label(static_cast<ClassId>(c)), v});
  }
  return std::make_shared<const AnchorSet>(dim, std::move(e));
}

inline AnchorSetPtr random_anchors(std::size_t k, std::size_t dim, std::uint64_t seed) {
  return std::make_shared<const AnchorSet>(synth_anchors(k, dim, {}, seed));
}

inline std::string fixture(const std::string& name) {
  return std::string(CVM_FIXTURE_DIR) + "/" + name;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("cvm_test_" + tag);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace cvm::test
