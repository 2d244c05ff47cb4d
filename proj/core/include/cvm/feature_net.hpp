#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cvm/rng.hpp"
#include "cvm/tensor.hpp"

namespace cvm {

// Numeric codes are part of the checkpoint format.
enum class LayerKind : std::uint8_t { affine = 0, relu = 1, tanh = 2, l2norm = 3 };

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

template <class T>
struct BasicLayer {
  LayerKind kind = LayerKind::affine;
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  // affine only: weight is [in_dim, out_dim] row-major, bias is [out_dim].
  std::vector<T> weight;
  std::vector<T> bias;

  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

  friend bool operator==(const BasicLayer&, const BasicLayer&) = default;
};

// Multilayer perceptron f_theta. The flat parameter order is: for each affine
// layer in sequence, its weight (row-major [in, out]) followed by its bias.
template <class T>
class BasicFeatureNet {
 public:
  using Layer = BasicLayer<T>;

  BasicFeatureNet() = default;
  explicit BasicFeatureNet(std::vector<Layer> layers);

  // affine(+act) blocks through `hidden`, a final affine to out_dim, then an
  // optional l2norm head. Weights are Glorot-uniform, biases zero.
  static BasicFeatureNet mlp(std::size_t in_dim, std::span<const std::size_t> hidden,
                             std::size_t out_dim, LayerKind activation, bool l2norm_head,
                             Rng& rng);

  std::size_t in_dim() const noexcept { return layers_.empty() ? 0 : layers_.front().in_dim; }
  std::size_t output_dim() const noexcept {
    return layers_.empty() ? 0 : layers_.back().out_dim;
  }
  std::size_t param_count() const noexcept;

  const std::vector<Layer>& layers() const noexcept { return layers_; }
  Layer& layer(std::size_t i) { return layers_.at(i); }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }

  std::vector<T> flat_params() const;
  void set_flat_params(std::span<const T> flat);

  bool ends_with_l2norm() const noexcept {
    return !layers_.empty() && layers_.back().kind == LayerKind::l2norm;
  }

  // Structural equality (kinds and dims), ignoring parameter values.
  bool same_architecture(const BasicFeatureNet& other) const;

  template <class U>
  BasicFeatureNet<U> cast() const {
    std::vector<BasicLayer<U>> out;
    out.reserve(layers_.size());
    for (const auto& l : layers_) {
      out.push_back({l.kind, l.in_dim, l.out_dim, std::vector<U>(l.weight.begin(), l.weight.end()),
                     std::vector<U>(l.bias.begin(), l.bias.end())});
    }
    return BasicFeatureNet<U>(std::move(out));
  }

  friend bool operator==(const BasicFeatureNet&, const BasicFeatureNet&) = default;

 private:
  std::vector<Layer> layers_;
};

using FeatureNet = BasicFeatureNet<float>;

// Cached activations of one forward pass: activations[0] is the input,
// activations[k + 1] the output of layer k.
template <class T>
struct BasicForwardTape {
  std::vector<BasicTensor<T>> activations;
  // Layer kinds and dims of the net that produced the tape.
  std::vector<std::pair<LayerKind, std::size_t>> signature;
};

template <class T>
struct BasicGradientBundle {
  // Aligned with the net's layers; empty vectors for parameterless layers.
  std::vector<std::vector<T>> weight;
  std::vector<std::vector<T>> bias;

  static BasicGradientBundle zeros_like(const BasicFeatureNet<T>& net);

  std::vector<T> flat() const;
  std::size_t param_count() const noexcept;
  bool all_finite() const;

  BasicGradientBundle& operator+=(const BasicGradientBundle& other);
  friend bool operator==(const BasicGradientBundle&, const BasicGradientBundle&) = default;
};

using ForwardTape = BasicForwardTape<float>;
using GradientBundle = BasicGradientBundle<float>;

// Embeddings [B, out_dim] plus the tape needed by backward.
template <class T>
std::pair<BasicTensor<T>, BasicForwardTape<T>> forward(const BasicFeatureNet<T>& net,
                                                        const BasicTensor<T>& batch);

// Same as forward but without keeping intermediate activations.
template <class T>
BasicTensor<T> infer(const BasicFeatureNet<T>& net, const BasicTensor<T>& batch);

// Gradient of sum_b <grad_out[b], output[b]> with respect to every parameter.
template <class T>
BasicGradientBundle<T> backward(const BasicFeatureNet<T>& net, const BasicForwardTape<T>& tape,
                                const BasicTensor<T>& grad_out);

// Like backward, but also returns the gradient with respect to the input batch.
template <class T>
std::pair<BasicGradientBundle<T>, BasicTensor<T>> backward_with_input(
    const BasicFeatureNet<T>& net, const BasicForwardTape<T>& tape, const BasicTensor<T>& grad_out);

// p <- p - lr * g for every parameter.
template <class T>
void sgd_step(BasicFeatureNet<T>& net, const BasicGradientBundle<T>& grads, T lr);

}  // namespace cvm
