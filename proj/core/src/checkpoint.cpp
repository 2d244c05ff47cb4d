#include "cvm/checkpoint.hpp"

#include <cstring>

#include "byte_io.hpp"

namespace cvm {

namespace {

constexpr char kNetMagic[8] = {'C', 'V', 'M', 'N', 'E', 'T', '1', '\0'};

void write_net(detail::ByteWriter& w, const FeatureNet& net) {
  w.bytes(std::string_view(kNetMagic, sizeof kNetMagic));
  w.u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.u32(static_cast<std::uint32_t>(l.in_dim));
    w.u32(static_cast<std::uint32_t>(l.out_dim));
  }
  for (float p : net.flat_params()) w.f32(p);
}

FeatureNet read_net(detail::ByteReader& r) {
  auto magic = r.bytes(sizeof kNetMagic, "magic");
  if (std::memcmp(magic.data(), kNetMagic, sizeof kNetMagic) != 0) {
    throw FormatError("bad network checkpoint magic", 0);
  }
  const auto n_layers = r.u32("layer count");
  std::vector<FeatureNet::Layer> layers;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto at = r.offset();
    const auto code = r.u8("layer kind");
    if (code > static_cast<std::uint8_t>(LayerKind::l2norm)) {
      throw FormatError("unknown layer kind code " + std::to_string(code), at);
    }
    FeatureNet::Layer l;
    l.kind = static_cast<LayerKind>(code);
    l.in_dim = r.u32("layer in_dim");
    l.out_dim = r.u32("layer out_dim");
    if (l.kind == LayerKind::affine) {
      l.weight.resize(l.in_dim * l.out_dim);
      l.bias.resize(l.out_dim);
    }
    layers.push_back(std::move(l));
  }
  const auto at = r.offset();
  FeatureNet net;
  try {
    net = FeatureNet(std::move(layers));
  } catch (const DimensionError& e) {
    throw FormatError(std::string("inconsistent layer descriptors: ") + e.what(), at);
  }
  std::vector<float> flat(net.param_count());
  for (auto& p : flat) p = r.f32("parameters");
  net.set_flat_params(flat);
  return net;
}

}  // namespace

std::vector<std::uint8_t> encode_net(const FeatureNet& net) {
  detail::ByteWriter w;
  write_net(w, net);
  return w.take();
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  detail::ByteWriter w;
  write_net(w, ckpt.net);
  for (const auto& [tag, payload] : ckpt.sections) {
    if (tag.size() != 4) throw RangeError("checkpoint section tags must be 4 characters");
    w.bytes(tag);
    w.u64(payload.size());
    w.bytes(payload);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  Checkpoint ckpt;
  ckpt.net = read_net(r);
  while (!r.at_end()) {
    const auto at = r.offset();
    auto tag = r.string(4, "section tag");
    const auto len = r.u64("section length");
    auto payload = r.bytes(len, "section payload");
    if (!ckpt.sections.emplace(tag, std::vector<std::uint8_t>(payload.begin(), payload.end())).second) {
      throw FormatError("duplicate checkpoint section '" + tag + "'", at);
    }
  }
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  detail::write_file_bytes(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace cvm
