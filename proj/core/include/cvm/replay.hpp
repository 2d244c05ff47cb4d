#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cvm/anchors.hpp"
#include "cvm/rng.hpp"
#include "cvm/tensor.hpp"

namespace cvm {

enum class ReplayPolicy { class_balanced, reservoir };

std::string to_string(ReplayPolicy policy);
ReplayPolicy replay_policy_from_string(const std::string& name);

struct ReplaySlot {
  std::vector<float> input;
  ClassId label = 0;
  std::uint32_t task = 0;

  friend bool operator==(const ReplaySlot&, const ReplaySlot&) = default;
};

struct ReplaySample {
  Tensor inputs;
  std::vector<ClassId> labels;
  std::vector<std::size_t> slots;  // buffer positions drawn
};

// Bounded episodic memory of raw inputs.
//
// class_balanced: while full, an arriving sample evicts a uniformly random slot
// of the most-represented class (smallest id on ties); if the arriving class is
// itself most represented it replaces one of its own slots. This keeps, for
// every class c, count(c) >= min(arrivals(c), max_count - 1): a class either
// holds everything it has seen or sits within one of the largest class.
//
// reservoir: classic reservoir sampling over all arrivals.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t input_dim, ReplayPolicy policy,
               std::uint64_t seed);

  void insert(std::span<const float> sample, ClassId label, std::uint32_t task);

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t size() const noexcept { return slots_.size(); }
  bool empty() const noexcept { return slots_.empty(); }
  ReplayPolicy policy() const noexcept { return policy_; }
  const std::vector<ReplaySlot>& slots() const noexcept { return slots_; }

  std::map<ClassId, std::size_t> class_counts() const;
  const std::map<ClassId, std::uint64_t>& arrivals() const noexcept { return arrivals_; }
  std::uint64_t total_arrivals() const noexcept { return total_arrivals_; }

  // The class_balanced invariant described above (always true for reservoir).
  bool balance_invariant_holds() const;

  // m uniform draws: without replacement when m <= size(), else with
  // replacement. Throws StateError on an empty buffer.
  ReplaySample sample_batch(std::size_t m, Rng& rng) const;

  std::vector<std::uint8_t> serialize() const;
  static ReplayBuffer deserialize(std::span<const std::uint8_t> bytes);

  friend bool operator==(const ReplayBuffer& a, const ReplayBuffer& b) {
    return a.capacity_ == b.capacity_ && a.input_dim_ == b.input_dim_ && a.policy_ == b.policy_ &&
           a.slots_ == b.slots_ && a.arrivals_ == b.arrivals_ &&
           a.total_arrivals_ == b.total_arrivals_ && a.rng_.save_state() == b.rng_.save_state();
  }

 private:
  std::size_t capacity_;
  std::size_t input_dim_;
  ReplayPolicy policy_;
  std::vector<ReplaySlot> slots_;
  std::map<ClassId, std::uint64_t> arrivals_;
  std::uint64_t total_arrivals_ = 0;
  Rng rng_;
};

struct MixedBatch {
  Tensor inputs;
  std::vector<ClassId> labels;
  std::vector<bool> from_memory;  // per row: true when drawn from the buffer
  std::optional<std::string> warning;

  std::size_t memory_rows() const;
};

// Appends ceil(replay_fraction * b) buffer draws to the current batch of b rows.
// An empty buffer leaves the batch unchanged and sets `warning` when replay was
// requested.
MixedBatch concat_batch(const Tensor& current, std::span<const ClassId> labels,
                        const ReplayBuffer& buffer, double replay_fraction, Rng& rng);

}  // namespace cvm
