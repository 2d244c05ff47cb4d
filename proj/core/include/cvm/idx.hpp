#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cvm/stream.hpp"

namespace cvm {

// IDX element type codes (third magic byte).
enum class IdxType : std::uint8_t { u8 = 0x08, i32 = 0x0C, f32 = 0x0D };

struct IdxArray {
  IdxType type = IdxType::u8;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;  // raw element values, not rescaled
};

// Big-endian header and payload, as in the canonical MNIST files.
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_idx(const IdxArray& array);

IdxArray read_idx(const std::string& path);
void write_idx(const std::string& path, const IdxArray& array);

struct IdxDataset {
  LabeledData data;
  std::vector<std::size_t> item_shape;  // e.g. {28, 28}
};

// Images (u8 scaled to [0, 1], or f32 taken as is) and labels (u8 or i32).
IdxDataset load_idx(const std::string& images_path, const std::string& labels_path);

// Writes images as u8 (values in [0, 1] scaled by 255) or f32, labels as u8
// when every label fits, else i32.
void write_idx_pair(const std::string& images_path, const std::string& labels_path,
                    const LabeledData& data, const std::vector<std::size_t>& item_shape,
                    IdxType image_type);

// Per class, the first `train_fraction` of rows (in file order) become training rows.
Dataset split_idx_dataset(const IdxDataset& all, double train_fraction);

}  // namespace cvm
