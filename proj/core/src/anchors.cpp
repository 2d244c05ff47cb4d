#include "cvm/anchors.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "byte_io.hpp"
#include "cvm/rng.hpp"
#include "json.hpp"

namespace cvm {

namespace {

constexpr char kAnchorMagic[8] = {'C', 'V', 'M', 'A', 'N', 'C', '1', '\0'};
// Loaded vectors may deviate this much from unit norm before being rejected.
constexpr double kRenormTolerance = 0.01;

double norm_of(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += static_cast<double>(x) * x;
  return std::sqrt(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// AnchorSet / SeenClassView
// ---------------------------------------------------------------------------

AnchorSet::AnchorSet(std::size_t dim, std::map<ClassId, Entry> entries, std::string provenance)
    : dim_(dim), entries_(std::move(entries)), provenance_(std::move(provenance)) {
  if (dim_ == 0) throw DimensionError("anchor dimensionality must be positive");
  for (auto& [id, e] : entries_) {
    if (e.vector.size() != dim_) {
      throw DimensionError("anchor for class " + std::to_string(id) + " has dim " +
                           std::to_string(e.vector.size()) + ", expected " + std::to_string(dim_));
    }
    const double n = norm_of(e.vector);
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw NumericError("anchor for class " + std::to_string(id) + " has zero or non-finite norm");
    }
    for (auto& x : e.vector) x = static_cast<float>(x / n);
  }
}

std::span<const float> AnchorSet::vector(ClassId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw StateError("no anchor for class " + std::to_string(id));
  return it->second.vector;
}

const std::string& AnchorSet::label(ClassId id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw StateError("no anchor for class " + std::to_string(id));
  return it->second.label;
}

std::optional<ClassId> AnchorSet::find_label(const std::string& label) const {
  for (const auto& [id, e] : entries_) {
    if (e.label == label) return id;
  }
  return std::nullopt;
}

std::vector<ClassId> AnchorSet::ids() const {
  std::vector<ClassId> out;
  out.reserve(entries_.size());
  for (const auto& kv : entries_) out.push_back(kv.first);
  return out;
}

SeenClassView::SeenClassView(AnchorSetPtr anchors, std::vector<ClassId> ids)
    : anchors_(std::move(anchors)), ids_(std::move(ids)) {
  if (!anchors_) throw StateError("seen-class view without an anchor set");
  std::sort(ids_.begin(), ids_.end());
  ids_.erase(std::unique(ids_.begin(), ids_.end()), ids_.end());
  for (ClassId id : ids_) {
    if (!anchors_->contains(id)) {
      throw StateError("class " + std::to_string(id) + " is not in the anchor set");
    }
  }
}

bool SeenClassView::contains(ClassId id) const {
  return std::binary_search(ids_.begin(), ids_.end(), id);
}

std::optional<std::size_t> SeenClassView::index_of(ClassId id) const {
  auto it = std::lower_bound(ids_.begin(), ids_.end(), id);
  if (it == ids_.end() || *it != id) return std::nullopt;
  return static_cast<std::size_t>(it - ids_.begin());
}

SeenClassView SeenClassView::with(std::span<const ClassId> more) const {
  std::vector<ClassId> all = ids_;
  all.insert(all.end(), more.begin(), more.end());
  return SeenClassView(anchors_, std::move(all));
}

// ---------------------------------------------------------------------------
// distances and classification
// ---------------------------------------------------------------------------

double cosine_distance(std::span<const float> u, std::span<const float> v) {
  if (u.size() != v.size()) throw DimensionError("cosine distance of vectors of unequal length");
  double uv = 0, uu = 0, vv = 0;
  for (std::size_t k = 0; k < u.size(); ++k) {
    uv += static_cast<double>(u[k]) * v[k];
    uu += static_cast<double>(u[k]) * u[k];
    vv += static_cast<double>(v[k]) * v[k];
  }
  if (!(uu > 0.0) || !(vv > 0.0)) throw NumericError("cosine distance of a zero-norm vector");
  return std::clamp(1.0 - uv / (std::sqrt(uu) * std::sqrt(vv)), 0.0, 2.0);
}

ClassId classify(std::span<const float> embedding, const SeenClassView& view) {
  if (view.empty()) throw StateError("classify against an empty seen-class view");
  const auto& anchors = view.anchors();
  if (embedding.size() != anchors.dim()) {
    throw DimensionError("embedding dim " + std::to_string(embedding.size()) +
                         " does not match anchor dim " + std::to_string(anchors.dim()));
  }
  ClassId best = view.ids().front();
  double best_d = std::numeric_limits<double>::infinity();
  for (ClassId id : view.ids()) {  // ascending, so strict < keeps the smallest id on ties
    const double d = cosine_distance(embedding, anchors.vector(id));
    if (d < best_d) {
      best_d = d;
      best = id;
    }
  }
  return best;
}

std::vector<ClassId> classify_batch(const Tensor& embeddings, const SeenClassView& view) {
  std::vector<ClassId> out(embeddings.rows());
  for (std::size_t b = 0; b < embeddings.rows(); ++b) out[b] = classify(embeddings.row(b), view);
  return out;
}

std::vector<std::vector<double>> distance_matrix(const AnchorSet& anchors) {
  const auto ids = anchors.ids();
  std::vector<std::vector<double>> m(ids.size(), std::vector<double>(ids.size(), 0.0));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    for (std::size_t j = i + 1; j < ids.size(); ++j) {
      m[i][j] = m[j][i] = cosine_distance(anchors.vector(ids[i]), anchors.vector(ids[j]));
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// file formats
// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_anchors_binary(const AnchorSet& anchors) {
  detail::ByteWriter w;
  w.bytes(std::string_view(kAnchorMagic, sizeof kAnchorMagic));
  w.u32(static_cast<std::uint32_t>(anchors.dim()));
  w.u32(static_cast<std::uint32_t>(anchors.size()));
  for (const auto& [id, e] : anchors.entries()) {
    if (e.label.size() > 0xFFFF) throw RangeError("anchor label longer than 65535 bytes");
    w.u32(id);
    w.u16(static_cast<std::uint16_t>(e.label.size()));
    w.bytes(e.label);
    for (float x : e.vector) w.f32(x);
  }
  return w.take();
}

namespace {

void check_and_insert(std::map<ClassId, AnchorSet::Entry>& entries, ClassId id,
                      AnchorSet::Entry entry, std::uint64_t offset) {
  const double n = norm_of(entry.vector);
  if (!std::isfinite(n) || std::abs(n - 1.0) > kRenormTolerance) {
    throw FormatError("anchor for class " + std::to_string(id) + " has norm " + std::to_string(n) +
                          ", outside 1 +/- " + std::to_string(kRenormTolerance),
                      offset);
  }
  if (!entries.emplace(id, std::move(entry)).second) {
    throw FormatError("duplicate class id " + std::to_string(id), offset);
  }
}

AnchorSet parse_anchors_text(std::span<const std::uint8_t> bytes, const std::string& provenance) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("anchor text file is not valid JSON: ") + e.what(), e.byte);
  }
  try {
    if (!doc.is_object() || doc.value("format", "") != "cvm-anchors") {
      throw FormatError("anchor text file lacks \"format\": \"cvm-anchors\"", 0);
    }
    const auto dim = doc.at("dim").get<std::size_t>();
    std::map<ClassId, AnchorSet::Entry> entries;
    const auto& list = doc.at("anchors");
    // Text entries carry no byte positions once parsed; report the entry index.
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto& item = list[i];
      AnchorSet::Entry e{item.at("label").get<std::string>(),
                         item.at("vector").get<std::vector<float>>()};
      const auto id = item.at("id").get<ClassId>();
      if (e.vector.size() != dim) {
        throw FormatError("anchor entry " + std::to_string(i) + " has dim " +
                              std::to_string(e.vector.size()) + ", expected " + std::to_string(dim),
                          0);
      }
      check_and_insert(entries, id, std::move(e), 0);
    }
    return AnchorSet(dim, std::move(entries), doc.value("provenance", provenance));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed anchor text file: ") + e.what(), 0);
  }
}

}  // namespace

AnchorSet parse_anchors_binary(std::span<const std::uint8_t> bytes, const std::string& provenance) {
  detail::ByteReader r(bytes);
  auto magic = r.bytes(sizeof kAnchorMagic, "magic");
  if (std::memcmp(magic.data(), kAnchorMagic, sizeof kAnchorMagic) != 0) {
    throw FormatError("bad anchor file magic", 0);
  }
  const std::uint32_t dim = r.u32("dim");
  if (dim == 0) throw FormatError("anchor dim is zero", r.offset() - 4);
  const std::uint32_t count = r.u32("count");
  std::map<ClassId, AnchorSet::Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint64_t entry_offset = r.offset();
    const ClassId id = r.u32("class id");
    const std::uint16_t len = r.u16("label length");
    AnchorSet::Entry e{r.string(len, "label"), std::vector<float>(dim)};
    for (auto& x : e.vector) x = r.f32("vector");
    check_and_insert(entries, id, std::move(e), entry_offset);
  }
  if (!r.at_end()) throw FormatError("trailing bytes after last anchor entry", r.offset());
  return AnchorSet(dim, std::move(entries), provenance);
}

AnchorSet load_anchors(const std::string& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.empty()) throw FormatError("anchor file is empty: " + path, 0);
  const bool binary = bytes.size() >= sizeof kAnchorMagic &&
                      std::memcmp(bytes.data(), kAnchorMagic, sizeof kAnchorMagic) == 0;
  if (binary) return parse_anchors_binary(bytes, "file:" + path);
  if (bytes[0] == 'C') throw FormatError("bad anchor file magic", 0);
  return parse_anchors_text(bytes, "file:" + path);
}

void save_anchors_binary(const AnchorSet& anchors, const std::string& path) {
  detail::write_file_bytes(path, encode_anchors_binary(anchors));
}

void save_anchors_text(const AnchorSet& anchors, const std::string& path) {
  nlohmann::json doc;
  doc["format"] = "cvm-anchors";
  doc["version"] = 1;
  doc["dim"] = anchors.dim();
  doc["provenance"] = anchors.provenance();
  auto& list = doc["anchors"] = nlohmann::json::array();
  for (const auto& [id, e] : anchors.entries()) {
    list.push_back({{"id", id}, {"label", e.label}, {"vector", e.vector}});
  }
  const std::string text = doc.dump(2) + "\n";
  detail::write_file_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

// ---------------------------------------------------------------------------
// synthetic anchors
// ---------------------------------------------------------------------------

std::string synthetic_label(ClassId id) { return "class_" + std::to_string(id); }

AnchorSet synth_anchors(std::size_t k, std::size_t dim, const ClusterSpec& spec,
                        std::uint64_t seed) {
  if (k < 2) throw ConstructionError("synth_anchors needs at least 2 classes");
  if (dim < 2) throw ConstructionError("synth_anchors needs dim >= 2");

  std::vector<std::vector<ClassId>> groups = spec.groups;
  if (groups.empty()) {
    for (ClassId c = 0; c < k; ++c) groups.push_back({c});
  }
  std::set<ClassId> covered;
  for (const auto& g : groups) {
    if (g.empty()) throw ConstructionError("empty semantic group");
    for (ClassId c : g) {
      if (c >= k || !covered.insert(c).second) {
        throw ConstructionError("semantic groups must partition classes 0..k-1");
      }
    }
  }
  if (covered.size() != k) throw ConstructionError("semantic groups must cover every class");

  const bool any_multi = std::any_of(groups.begin(), groups.end(),
                                     [](const auto& g) { return g.size() > 1; });
  if (any_multi && (spec.s_in <= spec.s_out || spec.s_in <= 0.0 || spec.s_in > 1.0)) {
    throw ConstructionError("cluster spec needs 0 < s_out < s_in <= 1");
  }
  // Groups are built on mutually orthogonal directions, so cross-group
  // similarity is exactly 0; a negative bound is not reachable this way.
  if (spec.s_out < 0.0) {
    throw ConstructionError("cross-group similarity bound s_out < 0 is not achievable");
  }

  // One orthonormal direction per group plus a private one per member of a
  // multi-member group.
  std::size_t needed = groups.size();
  for (const auto& g : groups) {
    if (g.size() > 1) needed += g.size();
  }
  if (needed > dim) {
    throw ConstructionError("dim " + std::to_string(dim) + " cannot pack " + std::to_string(k) +
                            " anchors in " + std::to_string(groups.size()) +
                            " groups (needs " + std::to_string(needed) + ")");
  }

  Rng rng = Rng::derive(seed, 0xA5C0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < needed) {
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    for (const auto& b : basis) {  // Gram-Schmidt, applied twice for stability
      for (int pass = 0; pass < 2; ++pass) {
        double p = 0;
        for (std::size_t i = 0; i < dim; ++i) p += v[i] * b[i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= p * b[i];
      }
    }
    double n = 0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-6) continue;
    for (auto& x : v) x /= n;
    basis.push_back(std::move(v));
  }

  std::map<ClassId, AnchorSet::Entry> entries;
  std::size_t next = groups.size();
  const double a = std::sqrt(spec.s_in);
  const double b = std::sqrt(1.0 - spec.s_in);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    for (ClassId c : groups[gi]) {
      std::vector<float> v(dim);
      if (groups[gi].size() == 1) {
        for (std::size_t i = 0; i < dim; ++i) v[i] = static_cast<float>(basis[gi][i]);
      } else {
        const auto& own = basis[next++];
        for (std::size_t i = 0; i < dim; ++i) v[i] = static_cast<float>(a * basis[gi][i] + b * own[i]);
      }
      entries.emplace(c, AnchorSet::Entry{synthetic_label(c), std::move(v)});
    }
  }
  return AnchorSet(dim, std::move(entries), "synthetic:seed=" + std::to_string(seed));
}

}  // namespace cvm
