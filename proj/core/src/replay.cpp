#include "cvm/replay.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "byte_io.hpp"

namespace cvm {

std::string to_string(ReplayPolicy policy) {
  return policy == ReplayPolicy::class_balanced ? "class-balanced" : "reservoir";
}

ReplayPolicy replay_policy_from_string(const std::string& name) {
  if (name == "class-balanced") return ReplayPolicy::class_balanced;
  if (name == "reservoir") return ReplayPolicy::reservoir;
  throw ConfigError("unknown replay policy '" + name + "'");
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, std::size_t input_dim, ReplayPolicy policy,
                           std::uint64_t seed)
    : capacity_(capacity), input_dim_(input_dim), policy_(policy), rng_(Rng::derive(seed, 0xB0F)) {
  if (capacity_ == 0) throw ConfigError("replay buffer capacity must be positive");
  if (input_dim_ == 0) throw ConfigError("replay buffer input dim must be positive");
  slots_.reserve(capacity_);
}

void ReplayBuffer::insert(std::span<const float> sample, ClassId label, std::uint32_t task) {
  if (sample.size() != input_dim_) {
    throw DimensionError("replay sample has width " + std::to_string(sample.size()) +
                         ", expected " + std::to_string(input_dim_));
  }
  ++arrivals_[label];
  ++total_arrivals_;
  ReplaySlot slot{{sample.begin(), sample.end()}, label, task};
  if (slots_.size() < capacity_) {
    slots_.push_back(std::move(slot));
    return;
  }

  if (policy_ == ReplayPolicy::reservoir) {
    const auto j = rng_.uniform_index(total_arrivals_);
    if (j < capacity_) slots_[j] = std::move(slot);
    return;
  }

  const auto counts = class_counts();
  std::size_t max_count = 0;
  for (const auto& kv : counts) max_count = std::max(max_count, kv.second);
  ClassId victim_class = label;
  auto own = counts.find(label);
  if (own == counts.end() || own->second < max_count) {
    for (const auto& [c, n] : counts) {  // ascending ids
      if (n == max_count) {
        victim_class = c;
        break;
      }
    }
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].label == victim_class) candidates.push_back(i);
  }
  slots_[candidates[rng_.uniform_index(candidates.size())]] = std::move(slot);
}

std::map<ClassId, std::size_t> ReplayBuffer::class_counts() const {
  std::map<ClassId, std::size_t> counts;
  for (const auto& s : slots_) ++counts[s.label];
  return counts;
}

bool ReplayBuffer::balance_invariant_holds() const {
  if (slots_.size() > capacity_) return false;
  if (policy_ != ReplayPolicy::class_balanced) return true;
  const auto counts = class_counts();
  std::size_t max_count = 0;
  for (const auto& kv : counts) max_count = std::max(max_count, kv.second);
  for (const auto& [c, a] : arrivals_) {
    auto it = counts.find(c);
    const std::uint64_t n = it == counts.end() ? 0 : it->second;
    const std::uint64_t floor = max_count == 0 ? 0 : max_count - 1;
    if (n < std::min<std::uint64_t>(a, floor)) return false;
  }
  return true;
}

ReplaySample ReplayBuffer::sample_batch(std::size_t m, Rng& rng) const {
  if (slots_.empty()) throw StateError("sample_batch on an empty replay buffer");
  ReplaySample out;
  out.slots.reserve(m);
  if (m <= slots_.size()) {
    std::vector<std::size_t> idx(slots_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < m; ++i) {  // partial Fisher-Yates
      const auto j = i + rng.uniform_index(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.slots.push_back(idx[i]);
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) out.slots.push_back(rng.uniform_index(slots_.size()));
  }
  out.inputs = Tensor({m, input_dim_});
  out.labels.reserve(m);
  for (std::size_t r = 0; r < m; ++r) {
    const auto& s = slots_[out.slots[r]];
    std::copy(s.input.begin(), s.input.end(), out.inputs.row(r).begin());
    out.labels.push_back(s.label);
  }
  return out;
}

namespace {
constexpr char kBufferMagic[8] = {'C', 'V', 'M', 'B', 'U', 'F', '1', '\0'};
}

std::vector<std::uint8_t> ReplayBuffer::serialize() const {
  detail::ByteWriter w;
  w.bytes(std::string_view(kBufferMagic, sizeof kBufferMagic));
  w.u8(policy_ == ReplayPolicy::class_balanced ? 0 : 1);
  w.u64(capacity_);
  w.u64(input_dim_);
  w.u64(total_arrivals_);
  w.u64(arrivals_.size());
  for (const auto& [c, a] : arrivals_) {
    w.u32(c);
    w.u64(a);
  }
  w.u64(slots_.size());
  for (const auto& s : slots_) {
    w.u32(s.label);
    w.u32(s.task);
    for (float x : s.input) w.f32(x);
  }
  const auto state = rng_.save_state();
  w.u64(state.size());
  w.bytes(state);
  return w.take();
}

ReplayBuffer ReplayBuffer::deserialize(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(sizeof kBufferMagic, "magic");
  if (!std::equal(magic.begin(), magic.end(), kBufferMagic)) {
    throw FormatError("bad replay buffer magic", 0);
  }
  const auto policy_code = r.u8("policy");
  if (policy_code > 1) throw FormatError("unknown replay policy code", r.offset() - 1);
  const auto capacity = r.u64("capacity");
  const auto dim = r.u64("input dim");
  ReplayBuffer buf(capacity, dim,
                   policy_code == 0 ? ReplayPolicy::class_balanced : ReplayPolicy::reservoir, 0);
  buf.total_arrivals_ = r.u64("total arrivals");
  const auto n_arr = r.u64("arrival count");
  for (std::uint64_t i = 0; i < n_arr; ++i) {
    const auto c = r.u32("arrival class");
    buf.arrivals_[c] = r.u64("arrivals");
  }
  const auto n_slots = r.u64("slot count");
  if (n_slots > capacity) throw FormatError("replay buffer holds more slots than capacity", r.offset());
  for (std::uint64_t i = 0; i < n_slots; ++i) {
    ReplaySlot s;
    s.label = r.u32("slot label");
    s.task = r.u32("slot task");
    s.input.resize(dim);
    for (auto& x : s.input) x = r.f32("slot input");
    buf.slots_.push_back(std::move(s));
  }
  const auto state_len = r.u64("rng state length");
  buf.rng_.load_state(r.string(state_len, "rng state"));
  return buf;
}

std::size_t MixedBatch::memory_rows() const {
  return static_cast<std::size_t>(std::count(from_memory.begin(), from_memory.end(), true));
}

MixedBatch concat_batch(const Tensor& current, std::span<const ClassId> labels,
                        const ReplayBuffer& buffer, double replay_fraction, Rng& rng) {
  const std::size_t b = current.rows();
  if (b == 0) throw DimensionError("concat_batch on an empty current batch");
  if (labels.size() != b) throw DimensionError("label count does not match batch size");
  if (replay_fraction < 0.0) throw ConfigError("replay_fraction must be non-negative");

  MixedBatch out{current, {labels.begin(), labels.end()}, std::vector<bool>(b, false), {}};
  const auto m = static_cast<std::size_t>(std::ceil(replay_fraction * static_cast<double>(b)));
  if (m == 0) return out;
  if (buffer.empty()) {
    out.warning = "replay requested but the buffer is empty; using the current batch only";
    return out;
  }
  auto drawn = buffer.sample_batch(m, rng);
  out.inputs = concat_rows(out.inputs, drawn.inputs);
  out.labels.insert(out.labels.end(), drawn.labels.begin(), drawn.labels.end());
  out.from_memory.resize(b + m, true);
  return out;
}

}  // namespace cvm
