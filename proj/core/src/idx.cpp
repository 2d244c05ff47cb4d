#include "cvm/idx.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>

#include "byte_io.hpp"

namespace cvm {

namespace {

std::size_t element_size(IdxType t) { return t == IdxType::u8 ? 1 : 4; }

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  const auto magic = r.u32_be("magic");
  const auto type_code = static_cast<std::uint8_t>((magic >> 8) & 0xFF);
  const auto rank = static_cast<std::uint8_t>(magic & 0xFF);
  if ((magic >> 16) != 0 ||
      (type_code != 0x08 && type_code != 0x0C && type_code != 0x0D) || rank == 0) {
    throw FormatError("bad IDX magic 0x" + [&] {
      char buf[9];
      std::snprintf(buf, sizeof buf, "%08X", magic);
      return std::string(buf);
    }(), 0);
  }
  IdxArray out;
  out.type = static_cast<IdxType>(type_code);
  std::uint64_t count = 1;
  for (std::uint8_t d = 0; d < rank; ++d) {
    out.dims.push_back(r.u32_be("dimension size"));
    count *= out.dims.back();
  }
  const std::uint64_t payload = count * element_size(out.type);
  if (r.remaining() < payload) {
    throw FormatError("IDX payload truncated: expected " + std::to_string(payload) +
                          " bytes, found " + std::to_string(r.remaining()),
                      r.offset());
  }
  out.values.resize(count);
  for (auto& v : out.values) {
    switch (out.type) {
      case IdxType::u8:
        v = r.u8("payload");
        break;
      case IdxType::i32:
        v = static_cast<float>(static_cast<std::int32_t>(r.u32_be("payload")));
        break;
      case IdxType::f32:
        v = std::bit_cast<float>(r.u32_be("payload"));
        break;
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes after IDX payload", r.offset());
  return out;
}

std::vector<std::uint8_t> encode_idx(const IdxArray& array) {
  if (array.dims.empty() || array.dims.size() > 255) throw RangeError("IDX rank must be 1..255");
  std::uint64_t count = 1;
  for (auto d : array.dims) count *= d;
  if (count != array.values.size()) throw DimensionError("IDX dims do not match value count");
  detail::ByteWriter w;
  w.u32_be((static_cast<std::uint32_t>(array.type) << 8) |
           static_cast<std::uint32_t>(array.dims.size()));
  for (auto d : array.dims) w.u32_be(d);
  for (float v : array.values) {
    switch (array.type) {
      case IdxType::u8:
        if (v < 0.0f || v > 255.0f) throw RangeError("value does not fit an IDX u8 element");
        w.u8(static_cast<std::uint8_t>(std::lround(v)));
        break;
      case IdxType::i32:
        w.u32_be(static_cast<std::uint32_t>(static_cast<std::int32_t>(std::lround(v))));
        break;
      case IdxType::f32:
        w.u32_be(std::bit_cast<std::uint32_t>(v));
        break;
    }
  }
  return w.take();
}

IdxArray read_idx(const std::string& path) { return parse_idx(detail::read_file_bytes(path)); }

void write_idx(const std::string& path, const IdxArray& array) {
  detail::write_file_bytes(path, encode_idx(array));
}

IdxDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto images = read_idx(images_path);
  const auto labels = read_idx(labels_path);
  if (images.dims.size() < 2) {
    throw FormatError("IDX image file must have at least 2 dimensions", 3);
  }
  if (labels.dims.size() != 1 || labels.type == IdxType::f32) {
    throw FormatError("IDX label file must be a 1-dimensional integer array", 3);
  }
  if (images.dims[0] != labels.dims[0]) {
    throw FormatError("image count " + std::to_string(images.dims[0]) +
                          " does not match label count " + std::to_string(labels.dims[0]),
                      4);
  }
  IdxDataset out;
  const std::size_t n = images.dims[0];
  std::size_t width = 1;
  for (std::size_t d = 1; d < images.dims.size(); ++d) {
    out.item_shape.push_back(images.dims[d]);
    width *= images.dims[d];
  }
  std::vector<float> values = images.values;
  if (images.type == IdxType::u8) {
    for (auto& v : values) v /= 255.0f;
  }
  out.data.inputs = Tensor({n, width}, std::move(values));
  out.data.labels.reserve(n);
  for (float v : labels.values) {
    if (v < 0.0f) throw FormatError("negative class label in IDX label file", 0);
    out.data.labels.push_back(static_cast<ClassId>(v));
  }
  return out;
}

void write_idx_pair(const std::string& images_path, const std::string& labels_path,
                    const LabeledData& data, const std::vector<std::size_t>& item_shape,
                    IdxType image_type) {
  IdxArray images;
  images.type = image_type;
  images.dims.push_back(static_cast<std::uint32_t>(data.size()));
  if (item_shape.empty()) {
    images.dims.push_back(static_cast<std::uint32_t>(data.dim()));
  } else {
    for (auto d : item_shape) images.dims.push_back(static_cast<std::uint32_t>(d));
  }
  images.values.assign(data.inputs.data().begin(), data.inputs.data().end());
  if (image_type == IdxType::u8) {
    for (auto& v : images.values) v = std::clamp(v, 0.0f, 1.0f) * 255.0f;
  }
  IdxArray labels;
  const ClassId max_label =
      data.labels.empty() ? 0 : *std::max_element(data.labels.begin(), data.labels.end());
  labels.type = max_label <= 255 ? IdxType::u8 : IdxType::i32;
  labels.dims = {static_cast<std::uint32_t>(data.size())};
  labels.values.assign(data.labels.begin(), data.labels.end());
  write_idx(images_path, images);
  write_idx(labels_path, labels);
}

Dataset split_idx_dataset(const IdxDataset& all, double train_fraction) {
  if (train_fraction <= 0.0 || train_fraction >= 1.0) {
    throw ConfigError("train fraction must lie in (0, 1)");
  }
  std::map<ClassId, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < all.data.size(); ++i) by_class[all.data.labels[i]].push_back(i);
  std::vector<std::size_t> train_rows, test_rows;
  Dataset ds;
  for (const auto& [c, rows] : by_class) {
    const auto n_train = static_cast<std::size_t>(
        std::lround(train_fraction * static_cast<double>(rows.size())));
    train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_train));
    test_rows.insert(test_rows.end(), rows.begin() + static_cast<std::ptrdiff_t>(n_train), rows.end());
    ds.class_names[c] = std::to_string(c);
  }
  std::sort(train_rows.begin(), train_rows.end());
  std::sort(test_rows.begin(), test_rows.end());
  ds.train = all.data.subset(train_rows);
  ds.test = all.data.subset(test_rows);
  ds.image_shape = all.item_shape.size() == 2 ? all.item_shape : std::vector<std::size_t>{};
  return ds;
}

}  // namespace cvm
