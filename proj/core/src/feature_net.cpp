#include "cvm/feature_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cvm {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::affine:
      return "affine";
    case LayerKind::relu:
      return "relu";
    case LayerKind::tanh:
      return "tanh";
    case LayerKind::l2norm:
      return "l2norm";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  if (name == "affine") return LayerKind::affine;
  if (name == "relu") return LayerKind::relu;
  if (name == "tanh") return LayerKind::tanh;
  if (name == "l2norm") return LayerKind::l2norm;
  throw ConfigError("unknown layer kind '" + name + "'");
}

// ---------------------------------------------------------------------------
// BasicFeatureNet
// ---------------------------------------------------------------------------

template <class T>
BasicFeatureNet<T>::BasicFeatureNet(std::vector<Layer> layers) : layers_(std::move(layers)) {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    if (l.kind == LayerKind::affine) {
      if (l.weight.size() != l.in_dim * l.out_dim || l.bias.size() != l.out_dim) {
        throw DimensionError("affine layer " + std::to_string(i) + " has inconsistent shapes");
      }
    } else {
      if (l.in_dim != l.out_dim || !l.weight.empty() || !l.bias.empty()) {
        throw DimensionError("parameterless layer " + std::to_string(i) +
                             " must preserve width and carry no parameters");
      }
    }
    if (i > 0 && layers_[i - 1].out_dim != l.in_dim) {
      throw DimensionError("layer " + std::to_string(i) + " input width " +
                           std::to_string(l.in_dim) + " != previous output width " +
                           std::to_string(layers_[i - 1].out_dim));
    }
  }
}

template <class T>
BasicFeatureNet<T> BasicFeatureNet<T>::mlp(std::size_t in_dim, std::span<const std::size_t> hidden,
                                           std::size_t out_dim, LayerKind activation,
                                           bool l2norm_head, Rng& rng) {
  if (activation != LayerKind::relu && activation != LayerKind::tanh) {
    throw ConfigError("mlp activation must be relu or tanh");
  }
  std::vector<Layer> layers;
  auto add_affine = [&](std::size_t in, std::size_t out) {
    Layer l{LayerKind::affine, in, out, std::vector<T>(in * out), std::vector<T>(out, T{0})};
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    for (auto& w : l.weight) w = static_cast<T>(rng.uniform(-limit, limit));
    layers.push_back(std::move(l));
  };
  std::size_t width = in_dim;
  for (std::size_t h : hidden) {
    add_affine(width, h);
    layers.push_back({activation, h, h, {}, {}});
    width = h;
  }
  add_affine(width, out_dim);
  if (l2norm_head) layers.push_back({LayerKind::l2norm, out_dim, out_dim, {}, {}});
  return BasicFeatureNet(std::move(layers));
}

template <class T>
std::size_t BasicFeatureNet<T>::param_count() const noexcept {
  std::size_t n = 0;
  for (const auto& l : layers_) n += l.param_count();
  return n;
}

template <class T>
std::vector<T> BasicFeatureNet<T>::flat_params() const {
  std::vector<T> flat;
  flat.reserve(param_count());
  for (const auto& l : layers_) {
    flat.insert(flat.end(), l.weight.begin(), l.weight.end());
    flat.insert(flat.end(), l.bias.begin(), l.bias.end());
  }
  return flat;
}

template <class T>
void BasicFeatureNet<T>::set_flat_params(std::span<const T> flat) {
  if (flat.size() != param_count()) {
    throw DimensionError("flat parameter vector has length " + std::to_string(flat.size()) +
                         ", expected " + std::to_string(param_count()));
  }
  std::size_t off = 0;
  for (auto& l : layers_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.weight.size(), l.weight.begin());
    off += l.weight.size();
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), l.bias.size(), l.bias.begin());
    off += l.bias.size();
  }
}

template <class T>
bool BasicFeatureNet<T>::same_architecture(const BasicFeatureNet& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& a = layers_[i];
    const auto& b = other.layers_[i];
    if (a.kind != b.kind || a.in_dim != b.in_dim || a.out_dim != b.out_dim) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// GradientBundle
// ---------------------------------------------------------------------------

template <class T>
BasicGradientBundle<T> BasicGradientBundle<T>::zeros_like(const BasicFeatureNet<T>& net) {
  BasicGradientBundle g;
  for (const auto& l : net.layers()) {
    g.weight.emplace_back(l.weight.size(), T{0});
    g.bias.emplace_back(l.bias.size(), T{0});
  }
  return g;
}

template <class T>
std::vector<T> BasicGradientBundle<T>::flat() const {
  std::vector<T> out;
  out.reserve(param_count());
  for (std::size_t i = 0; i < weight.size(); ++i) {
    out.insert(out.end(), weight[i].begin(), weight[i].end());
    out.insert(out.end(), bias[i].begin(), bias[i].end());
  }
  return out;
}

template <class T>
std::size_t BasicGradientBundle<T>::param_count() const noexcept {
  std::size_t n = 0;
  for (std::size_t i = 0; i < weight.size(); ++i) n += weight[i].size() + bias[i].size();
  return n;
}

template <class T>
bool BasicGradientBundle<T>::all_finite() const {
  auto finite = [](const std::vector<T>& v) {
    return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
  };
  return std::all_of(weight.begin(), weight.end(), finite) &&
         std::all_of(bias.begin(), bias.end(), finite);
}

template <class T>
BasicGradientBundle<T>& BasicGradientBundle<T>::operator+=(const BasicGradientBundle& other) {
  if (other.weight.size() != weight.size()) throw DimensionError("gradient bundles not aligned");
  for (std::size_t i = 0; i < weight.size(); ++i) {
    if (weight[i].size() != other.weight[i].size() || bias[i].size() != other.bias[i].size()) {
      throw DimensionError("gradient bundles not aligned");
    }
    for (std::size_t k = 0; k < weight[i].size(); ++k) weight[i][k] += other.weight[i][k];
    for (std::size_t k = 0; k < bias[i].size(); ++k) bias[i][k] += other.bias[i][k];
  }
  return *this;
}

// ---------------------------------------------------------------------------
// forward / backward
// ---------------------------------------------------------------------------

namespace {

template <class T>
BasicTensor<T> apply_layer(const BasicLayer<T>& l, const BasicTensor<T>& x) {
  const std::size_t batch = x.rows();
  BasicTensor<T> y({batch, l.out_dim});
  switch (l.kind) {
    case LayerKind::affine:
      for (std::size_t b = 0; b < batch; ++b) {
        auto out = y.row(b);
        std::copy(l.bias.begin(), l.bias.end(), out.begin());
        auto in = x.row(b);
        for (std::size_t i = 0; i < l.in_dim; ++i) {
          const T xi = in[i];
          const T* w = l.weight.data() + i * l.out_dim;
          for (std::size_t o = 0; o < l.out_dim; ++o) out[o] += xi * w[o];
        }
      }
      break;
    case LayerKind::relu:
      for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > T{0} ? x[k] : T{0};
      break;
    case LayerKind::tanh:
      for (std::size_t k = 0; k < x.size(); ++k) y[k] = std::tanh(x[k]);
      break;
    case LayerKind::l2norm:
      for (std::size_t b = 0; b < batch; ++b) {
        auto in = x.row(b);
        auto out = y.row(b);
        const T n = norm2<T>(in);
        if (n < std::numeric_limits<T>::min()) {
          std::fill(out.begin(), out.end(), T{0});
        } else {
          for (std::size_t k = 0; k < in.size(); ++k) out[k] = in[k] / n;
        }
      }
      break;
  }
  return y;
}

template <class T>
std::vector<std::pair<LayerKind, std::size_t>> signature_of(const BasicFeatureNet<T>& net) {
  std::vector<std::pair<LayerKind, std::size_t>> sig;
  for (const auto& l : net.layers()) sig.emplace_back(l.kind, l.out_dim);
  return sig;
}

template <class T>
void check_input(const BasicFeatureNet<T>& net, const BasicTensor<T>& batch) {
  if (net.layers().empty()) throw StateError("forward on an empty network");
  if (batch.rank() != 2 || batch.cols() != net.in_dim()) {
    throw DimensionError("batch width " + std::to_string(batch.cols()) +
                         " does not match network input width " + std::to_string(net.in_dim()));
  }
}

}  // namespace

template <class T>
std::pair<BasicTensor<T>, BasicForwardTape<T>> forward(const BasicFeatureNet<T>& net,
                                                        const BasicTensor<T>& batch) {
  check_input(net, batch);
  BasicForwardTape<T> tape;
  tape.signature = signature_of(net);
  tape.activations.reserve(net.layers().size() + 1);
  tape.activations.push_back(batch);
  for (const auto& l : net.layers()) {
    tape.activations.push_back(apply_layer(l, tape.activations.back()));
  }
  BasicTensor<T> out = tape.activations.back();
  return {std::move(out), std::move(tape)};
}

template <class T>
BasicTensor<T> infer(const BasicFeatureNet<T>& net, const BasicTensor<T>& batch) {
  check_input(net, batch);
  BasicTensor<T> x = batch;
  for (const auto& l : net.layers()) x = apply_layer(l, x);
  return x;
}

template <class T>
std::pair<BasicGradientBundle<T>, BasicTensor<T>> backward_with_input(
    const BasicFeatureNet<T>& net, const BasicForwardTape<T>& tape,
    const BasicTensor<T>& grad_out) {
  const auto& layers = net.layers();
  if (tape.signature != signature_of(net) || tape.activations.size() != layers.size() + 1) {
    throw StateError("forward tape was not produced by this network");
  }
  const auto& out = tape.activations.back();
  if (grad_out.shape() != out.shape()) {
    throw DimensionError("grad_out shape does not match network output");
  }

  auto grads = BasicGradientBundle<T>::zeros_like(net);
  BasicTensor<T> g = grad_out;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const auto& l = layers[li];
    const auto& x = tape.activations[li];
    const auto& y = tape.activations[li + 1];
    const std::size_t batch = x.rows();
    BasicTensor<T> gx({batch, l.in_dim});
    switch (l.kind) {
      case LayerKind::affine: {
        auto& gw = grads.weight[li];
        auto& gb = grads.bias[li];
        for (std::size_t b = 0; b < batch; ++b) {
          auto gy = g.row(b);
          auto in = x.row(b);
          auto gin = gx.row(b);
          for (std::size_t o = 0; o < l.out_dim; ++o) gb[o] += gy[o];
          for (std::size_t i = 0; i < l.in_dim; ++i) {
            const T* w = l.weight.data() + i * l.out_dim;
            T* gwi = gw.data() + i * l.out_dim;
            T acc{0};
            for (std::size_t o = 0; o < l.out_dim; ++o) {
              gwi[o] += in[i] * gy[o];
              acc += w[o] * gy[o];
            }
            gin[i] = acc;
          }
        }
        break;
      }
      case LayerKind::relu:
        for (std::size_t k = 0; k < x.size(); ++k) gx[k] = x[k] > T{0} ? g[k] : T{0};
        break;
      case LayerKind::tanh:
        for (std::size_t k = 0; k < x.size(); ++k) gx[k] = g[k] * (T{1} - y[k] * y[k]);
        break;
      case LayerKind::l2norm:
        // y = x/|x|  =>  dx = (g - y <y, g>) / |x|
        for (std::size_t b = 0; b < batch; ++b) {
          auto in = x.row(b);
          auto yr = y.row(b);
          auto gy = g.row(b);
          auto gin = gx.row(b);
          const T n = norm2<T>(in);
          if (n < std::numeric_limits<T>::min()) {
            std::fill(gin.begin(), gin.end(), T{0});
            continue;
          }
          const T proj = dot<T>(yr, gy);
          for (std::size_t k = 0; k < in.size(); ++k) gin[k] = (gy[k] - yr[k] * proj) / n;
        }
        break;
    }
    g = std::move(gx);
  }
  return {std::move(grads), std::move(g)};
}

template <class T>
BasicGradientBundle<T> backward(const BasicFeatureNet<T>& net, const BasicForwardTape<T>& tape,
                                const BasicTensor<T>& grad_out) {
  return backward_with_input(net, tape, grad_out).first;
}

template <class T>
void sgd_step(BasicFeatureNet<T>& net, const BasicGradientBundle<T>& grads, T lr) {
  if (grads.weight.size() != net.layers().size()) {
    throw DimensionError("gradient bundle does not match network layers");
  }
  if (!grads.all_finite()) throw NumericError("non-finite gradient in sgd_step");
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    auto& l = net.layer(i);
    if (grads.weight[i].size() != l.weight.size() || grads.bias[i].size() != l.bias.size()) {
      throw DimensionError("gradient bundle does not match layer " + std::to_string(i));
    }
    for (std::size_t k = 0; k < l.weight.size(); ++k) l.weight[k] -= lr * grads.weight[i][k];
    for (std::size_t k = 0; k < l.bias.size(); ++k) l.bias[k] -= lr * grads.bias[i][k];
  }
}

#define CVM_INSTANTIATE(T)                                                                      \
  template class BasicFeatureNet<T>;                                                           \
  template struct BasicGradientBundle<T>;                                                      \
  template std::pair<BasicTensor<T>, BasicForwardTape<T>> forward(const BasicFeatureNet<T>&,   \
                                                                   const BasicTensor<T>&);     \
  template BasicTensor<T> infer(const BasicFeatureNet<T>&, const BasicTensor<T>&);             \
  template BasicGradientBundle<T> backward(const BasicFeatureNet<T>&, const BasicForwardTape<T>&, \
                                           const BasicTensor<T>&);                             \
  template std::pair<BasicGradientBundle<T>, BasicTensor<T>> backward_with_input(              \
      const BasicFeatureNet<T>&, const BasicForwardTape<T>&, const BasicTensor<T>&);           \
  template void sgd_step(BasicFeatureNet<T>&, const BasicGradientBundle<T>&, T);

CVM_INSTANTIATE(float)
CVM_INSTANTIATE(double)

#undef CVM_INSTANTIATE

}  // namespace cvm
