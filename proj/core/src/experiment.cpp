#include "cvm/experiment.hpp"

#include <openssl/sha.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "cvm/checkpoint.hpp"
#include "cvm/error.hpp"
#include "cvm/idx.hpp"

namespace cvm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// strict JSON reading
// ---------------------------------------------------------------------------

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  std::string field(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  const json* find(const std::string& key) {
    used_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  template <class T>
  void read(const std::string& key, T& out) {
    const json* v = find(key);
    if (!v) return;
    out = convert<T>(*v, field(key));
  }

  // Rejects any key that was never asked for.
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError(field(it.key()) + ": unknown key");
    }
  }

  template <class T>
  static T convert(const json& v, const std::string& name) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(name + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(name + ": expected a string");
      return v.get<std::string>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError(name + ": expected a number");
      return v.get<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(name + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return static_cast<T>(v.get<std::uint64_t>());
        if (v.get<std::int64_t>() < 0) throw ConfigError(name + ": must be non-negative");
      }
      return static_cast<T>(v.get<std::int64_t>());
    } else {
      // std::vector<...>
      if (!v.is_array()) throw ConfigError(name + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], name + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void parse_dataset(const json& j, DatasetConfig& d) {
  Fields f(j, "dataset");
  f.read("kind", d.kind);
  f.read("classes", d.classes);
  f.read("dim", d.dim);
  f.read("samples_per_class", d.samples_per_class);
  f.read("alignment", d.alignment);
  f.read("noise", d.noise);
  f.read("radius", d.radius);
  f.read("train_fraction", d.train_fraction);
  f.read("seed", d.seed);
  f.read("train_images", d.train_images);
  f.read("train_labels", d.train_labels);
  f.read("test_images", d.test_images);
  f.read("test_labels", d.test_labels);
  f.read("class_names", d.class_names);
  f.read("transforms", d.transforms);
  f.read("test_mode", d.test_mode);
  f.finish();
}

void parse_anchors(const json& j, AnchorConfig& a) {
  Fields f(j, "anchors");
  f.read("source", a.source);
  f.read("path", a.path);
  f.read("dim", a.dim);
  f.read("groups", a.groups);
  f.read("s_in", a.s_in);
  f.read("s_out", a.s_out);
  f.read("seed", a.seed);
  f.finish();
}

void parse_network(const json& j, NetworkConfig& n) {
  Fields f(j, "network");
  f.read("hidden", n.hidden);
  f.read("activation", n.activation);
  f.read("l2norm_head", n.l2norm_head);
  f.finish();
}

void parse_hyper(const json& j, HyperConfig& h) {
  Fields f(j, "hyper");
  f.read("lr", h.lr);
  f.read("batch_size", h.batch_size);
  f.read("epochs", h.epochs);
  f.read("memory_size", h.memory_size);
  f.read("replay_fraction", h.replay_fraction);
  f.read("replay_policy", h.replay_policy);
  f.read("buffer_update", h.buffer_update);
  f.read("alpha", h.alpha);
  f.read("beta", h.beta);
  f.read("negative_mining", h.negative_mining);
  f.read("retention_metric", h.retention_metric);
  f.finish();
}

void parse_probe(const json& j, ProbeConfig& p) {
  Fields f(j, "probe");
  f.read("epochs", p.epochs);
  f.read("lr", p.lr);
  f.read("batch_size", p.batch_size);
  f.finish();
}

void parse_sweep(const json& j, SweepConfig& s) {
  Fields f(j, "sweep");
  f.read("memory", s.memory);
  f.read("beta", s.beta);
  f.finish();
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["schema_version"] = c.schema_version;
  j["name"] = c.name;
  j["scenario"] = c.scenario;
  j["tasks"] = c.tasks;
  j["seeds"] = c.seeds;
  const auto& d = c.dataset;
  j["dataset"] = {{"kind", d.kind},
                  {"classes", d.classes},
                  {"dim", d.dim},
                  {"samples_per_class", d.samples_per_class},
                  {"alignment", d.alignment},
                  {"noise", d.noise},
                  {"radius", d.radius},
                  {"train_fraction", d.train_fraction},
                  {"seed", d.seed},
                  {"train_images", d.train_images},
                  {"train_labels", d.train_labels},
                  {"test_images", d.test_images},
                  {"test_labels", d.test_labels},
                  {"class_names", d.class_names},
                  {"transforms", d.transforms},
                  {"test_mode", d.test_mode}};
  const auto& a = c.anchors;
  j["anchors"] = {{"source", a.source}, {"path", a.path}, {"dim", a.dim},   {"groups", a.groups},
                  {"s_in", a.s_in},     {"s_out", a.s_out}, {"seed", a.seed}};
  j["network"] = {{"hidden", c.network.hidden},
                  {"activation", c.network.activation},
                  {"l2norm_head", c.network.l2norm_head}};
  j["strategies"] = c.strategies;
  const auto& h = c.hyper;
  j["hyper"] = {{"lr", h.lr},
                {"batch_size", h.batch_size},
                {"epochs", h.epochs},
                {"memory_size", h.memory_size},
                {"replay_fraction", h.replay_fraction},
                {"replay_policy", h.replay_policy},
                {"buffer_update", h.buffer_update},
                {"alpha", h.alpha},
                {"beta", h.beta},
                {"negative_mining", h.negative_mining},
                {"retention_metric", h.retention_metric}};
  j["probe"] = {{"epochs", c.probe.epochs}, {"lr", c.probe.lr}, {"batch_size", c.probe.batch_size}};
  j["sweep"] = {{"memory", c.sweep.memory}, {"beta", c.sweep.beta}};
  j["output_dir"] = c.output_dir;
  return j;
}

// ---------------------------------------------------------------------------
// small helpers
// ---------------------------------------------------------------------------

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StateError("cannot write " + path.string());
  os << text;
  if (!os) throw StateError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path resolve_input(const ExperimentConfig& cfg, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : fs::path(cfg.base_dir) / path;
}

RetentionMetric retention_metric_from_string(const std::string& s) {
  if (s == "squared") return RetentionMetric::squared;
  if (s == "cosine") return RetentionMetric::cosine;
  throw ConfigError("hyper.retention_metric: expected 'squared' or 'cosine', got '" + s + "'");
}

NegativeMining mining_from_string(const std::string& s) {
  if (s == "hardest") return NegativeMining::hardest;
  if (s == "random") return NegativeMining::uniform_random;
  throw ConfigError("hyper.negative_mining: expected 'hardest' or 'random', got '" + s + "'");
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

fs::path checkpoint_path(const fs::path& run_dir, const std::string& strategy, std::uint64_t seed,
                         std::size_t task) {
  return run_dir / "checkpoints" / strategy / ("seed" + std::to_string(seed)) /
         ("task_" + std::to_string(task) + ".ckpt");
}

std::vector<std::uint8_t> to_bytes(const std::string& s) { return {s.begin(), s.end()}; }

}  // namespace

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

ExperimentConfig parse_config(const std::string& json_text, const std::string& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  ExperimentConfig cfg;
  cfg.base_dir = base_dir;
  Fields f(j, "");
  if (!f.find("schema_version")) throw ConfigError("schema_version: required");
  f.read("schema_version", cfg.schema_version);
  if (cfg.schema_version != kConfigSchemaVersion) {
    throw ConfigError("schema_version: unsupported version " + std::to_string(cfg.schema_version) +
                      " (expected " + std::to_string(kConfigSchemaVersion) + ")");
  }
  f.read("name", cfg.name);
  f.read("scenario", cfg.scenario);
  f.read("tasks", cfg.tasks);
  f.read("seeds", cfg.seeds);
  f.read("strategies", cfg.strategies);
  f.read("output_dir", cfg.output_dir);
  if (auto* v = f.find("dataset")) parse_dataset(*v, cfg.dataset);
  if (auto* v = f.find("anchors")) parse_anchors(*v, cfg.anchors);
  if (auto* v = f.find("network")) parse_network(*v, cfg.network);
  if (auto* v = f.find("hyper")) parse_hyper(*v, cfg.hyper);
  if (auto* v = f.find("probe")) parse_probe(*v, cfg.probe);
  if (auto* v = f.find("sweep")) parse_sweep(*v, cfg.sweep);
  f.finish();
  validate_config(cfg);
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("config: file not found: " + path);
  auto base = fs::path(path).parent_path();
  return parse_config(read_text(path), base.empty() ? "." : base.string());
}

void validate_config(const ExperimentConfig& c) {
  auto fail = [](const std::string& field, const std::string& msg) {
    throw ConfigError(field + ": " + msg);
  };
  if (c.name.empty()) fail("name", "must not be empty");
  Scenario scenario;
  try {
    scenario = scenario_from_string(c.scenario);
  } catch (const Error&) {
    fail("scenario", "expected 'class-il' or 'domain-il', got '" + c.scenario + "'");
  }
  if (c.tasks < 2) fail("tasks", "must be at least 2");
  if (c.seeds.empty()) fail("seeds", "must list at least one seed");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    fail("seeds", "must not repeat");
  }
  if (c.output_dir.empty()) fail("output_dir", "must not be empty");

  const auto& d = c.dataset;
  if (d.kind == "synthetic") {
    if (d.classes < 2) fail("dataset.classes", "must be at least 2");
    if (d.dim < 1) fail("dataset.dim", "must be positive");
    if (d.samples_per_class < 2) fail("dataset.samples_per_class", "must be at least 2");
    if (!(d.alignment >= 0.0 && d.alignment <= 1.0)) fail("dataset.alignment", "must lie in [0, 1]");
    if (!(d.noise >= 0.0)) fail("dataset.noise", "must be non-negative");
    if (!(d.radius > 0.0)) fail("dataset.radius", "must be positive");
    if (d.alignment > 0.0 && d.dim < c.anchors.dim && c.anchors.source == "synthetic") {
      fail("dataset.dim", "must be at least anchors.dim when alignment > 0");
    }
    if (scenario == Scenario::class_il && d.classes % c.tasks != 0) {
      fail("tasks", std::to_string(d.classes) + " classes cannot be split into " +
                        std::to_string(c.tasks) + " equal tasks");
    }
  } else if (d.kind == "idx") {
    if (d.train_images.empty()) fail("dataset.train_images", "required for idx datasets");
    if (d.train_labels.empty()) fail("dataset.train_labels", "required for idx datasets");
    if (d.test_images.empty() != d.test_labels.empty()) {
      fail("dataset.test_images", "test_images and test_labels must be given together");
    }
  } else {
    fail("dataset.kind", "expected 'synthetic' or 'idx', got '" + d.kind + "'");
  }
  if (!(d.train_fraction > 0.0 && d.train_fraction < 1.0)) {
    fail("dataset.train_fraction", "must lie in (0, 1)");
  }
  if (scenario == Scenario::domain_il) {
    if (d.transforms.size() != c.tasks) {
      fail("dataset.transforms", "domain-il needs exactly one transform per task (" +
                                     std::to_string(c.tasks) + ")");
    }
    for (std::size_t i = 0; i < d.transforms.size(); ++i) {
      try {
        (void)InputTransform::parse(d.transforms[i]);
      } catch (const Error& e) {
        fail("dataset.transforms[" + std::to_string(i) + "]", e.what());
      }
    }
  } else if (!d.transforms.empty()) {
    fail("dataset.transforms", "only valid for domain-il");
  }
  if (d.test_mode != "per-task" && d.test_mode != "fixed") {
    fail("dataset.test_mode", "expected 'per-task' or 'fixed'");
  }

  const auto& a = c.anchors;
  if (a.source == "synthetic") {
    if (a.dim < 2) fail("anchors.dim", "must be at least 2");
    if (!(a.s_in >= 0.0 && a.s_in < 1.0)) fail("anchors.s_in", "must lie in [0, 1)");
    if (!(a.s_out >= 0.0 && a.s_out <= a.s_in)) fail("anchors.s_out", "must lie in [0, s_in]");
    std::set<ClassId> grouped;
    for (const auto& g : a.groups) {
      for (ClassId id : g) {
        if (!grouped.insert(id).second) {
          fail("anchors.groups", "class " + std::to_string(id) + " appears twice");
        }
      }
    }
  } else if (a.source == "file") {
    if (a.path.empty()) fail("anchors.path", "required when anchors.source is 'file'");
  } else {
    fail("anchors.source", "expected 'synthetic' or 'file', got '" + a.source + "'");
  }

  try {
    (void)layer_kind_from_string(c.network.activation);
  } catch (const Error&) {
    fail("network.activation", "unknown activation '" + c.network.activation + "'");
  }
  if (c.network.activation != "relu" && c.network.activation != "tanh") {
    fail("network.activation", "expected 'relu' or 'tanh'");
  }
  for (std::size_t i = 0; i < c.network.hidden.size(); ++i) {
    if (c.network.hidden[i] == 0) fail("network.hidden[" + std::to_string(i) + "]", "must be positive");
  }

  if (c.strategies.empty()) fail("strategies", "must list at least one strategy");
  std::set<std::string> names;
  for (std::size_t i = 0; i < c.strategies.size(); ++i) {
    const auto& s = c.strategies[i];
    try {
      (void)strategy_kind_from_string(s);
    } catch (const Error&) {
      fail("strategies[" + std::to_string(i) + "]", "unknown strategy '" + s + "'");
    }
    if (!names.insert(s).second) fail("strategies[" + std::to_string(i) + "]", "duplicate '" + s + "'");
    if (strategy_kind_from_string(s) != StrategyKind::naive_ce &&
        strategy_kind_from_string(s) != StrategyKind::er_ce && !c.network.l2norm_head) {
      fail("network.l2norm_head", "anchor-based strategy '" + s + "' needs the l2norm head");
    }
  }

  const auto& h = c.hyper;
  if (!(h.lr >= 0.0) || !std::isfinite(h.lr)) fail("hyper.lr", "must be a finite non-negative number");
  if (h.batch_size < 1) fail("hyper.batch_size", "must be positive");
  if (h.epochs < 1) fail("hyper.epochs", "must be positive");
  if (h.memory_size < 1) fail("hyper.memory_size", "must be positive");
  if (!(h.replay_fraction >= 0.0) || !std::isfinite(h.replay_fraction)) {
    fail("hyper.replay_fraction", "must be a finite non-negative number");
  }
  try {
    (void)replay_policy_from_string(h.replay_policy);
  } catch (const Error&) {
    fail("hyper.replay_policy", "expected 'class-balanced' or 'reservoir', got '" + h.replay_policy + "'");
  }
  if (h.buffer_update != "during" && h.buffer_update != "after") {
    fail("hyper.buffer_update", "expected 'during' or 'after'");
  }
  if (!(h.alpha >= 0.0) || !std::isfinite(h.alpha)) fail("hyper.alpha", "must be a finite non-negative number");
  if (!(h.beta >= 0.0) || !std::isfinite(h.beta)) fail("hyper.beta", "must be a finite non-negative number");
  (void)mining_from_string(h.negative_mining);
  (void)retention_metric_from_string(h.retention_metric);

  if (c.probe.epochs < 1) fail("probe.epochs", "must be positive");
  if (!(c.probe.lr > 0.0)) fail("probe.lr", "must be positive");
  if (c.probe.batch_size < 1) fail("probe.batch_size", "must be positive");

  if (c.sweep.memory.empty()) fail("sweep.memory", "must not be empty");
  for (std::size_t i = 0; i < c.sweep.memory.size(); ++i) {
    if (c.sweep.memory[i] < 1) fail("sweep.memory[" + std::to_string(i) + "]", "must be positive");
  }
  if (c.sweep.beta.empty()) fail("sweep.beta", "must not be empty");
  for (std::size_t i = 0; i < c.sweep.beta.size(); ++i) {
    if (!(c.sweep.beta[i] >= 0.0) || !std::isfinite(c.sweep.beta[i])) {
      fail("sweep.beta[" + std::to_string(i) + "]", "must be a finite non-negative number");
    }
  }
}

std::string to_json_text(const ExperimentConfig& cfg) { return to_json(cfg).dump(2) + "\n"; }

std::string git_blob_hash(std::string_view content) {
  std::string blob = "blob " + std::to_string(content.size());
  blob.push_back('\0');
  blob.append(content);
  unsigned char md[SHA_DIGEST_LENGTH];
  SHA1(reinterpret_cast<const unsigned char*>(blob.data()), blob.size(), md);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned char b : md) {
    out.push_back(hex[b >> 4]);
    out.push_back(hex[b & 15]);
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) { return git_blob_hash(to_json_text(cfg)); }

// ---------------------------------------------------------------------------
// inputs
// ---------------------------------------------------------------------------

ExperimentInputs prepare_inputs(const ExperimentConfig& cfg) {
  validate_config(cfg);
  ExperimentInputs in;
  std::string hashes = config_hash(cfg);
  auto add_file = [&](const fs::path& p) {
    hashes += "\n" + git_blob_hash(read_text(p));
  };

  std::shared_ptr<const AnchorSet> raw;
  if (cfg.anchors.source == "synthetic") {
    ClusterSpec spec{cfg.anchors.groups, cfg.anchors.s_in, cfg.anchors.s_out};
    const std::size_t k = cfg.dataset.kind == "synthetic" ? cfg.dataset.classes
                                                          : std::max<std::size_t>(cfg.dataset.class_names.size(), 0);
    if (k < 2) {
      throw ConfigError("anchors.source: synthetic anchors with an idx dataset need dataset.class_names");
    }
    try {
      raw = std::make_shared<const AnchorSet>(synth_anchors(k, cfg.anchors.dim, spec, cfg.anchors.seed));
    } catch (const ConstructionError& e) {
      throw ConfigError(std::string("anchors: ") + e.what());
    }
  } else {
    const auto path = resolve_input(cfg, cfg.anchors.path);
    if (!fs::exists(path)) throw ConfigError("anchors.path: file not found: " + path.string());
    raw = std::make_shared<const AnchorSet>(load_anchors(path.string()));
    add_file(path);
  }

  if (cfg.dataset.kind == "synthetic") {
    SynthDatasetSpec spec;
    spec.classes = cfg.dataset.classes;
    spec.dim = cfg.dataset.dim;
    spec.samples_per_class = cfg.dataset.samples_per_class;
    spec.alignment = cfg.dataset.alignment;
    spec.radius = cfg.dataset.radius;
    spec.noise = cfg.dataset.noise;
    spec.train_fraction = cfg.dataset.train_fraction;
    if (raw->size() < spec.classes) {
      throw ConfigError("anchors: " + std::to_string(raw->size()) + " anchors cannot cover " +
                        std::to_string(spec.classes) + " classes");
    }
    try {
      in.dataset = synth_dataset(spec, *raw, cfg.dataset.seed);
    } catch (const ConstructionError& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
    in.anchors = raw;
  } else {
    auto req = [&](const std::string& field, const std::string& p) {
      const auto path = resolve_input(cfg, p);
      if (!fs::exists(path)) throw ConfigError("dataset." + field + ": file not found: " + path.string());
      add_file(path);
      return path.string();
    };
    const auto tr = load_idx(req("train_images", cfg.dataset.train_images),
                             req("train_labels", cfg.dataset.train_labels));
    if (cfg.dataset.test_images.empty()) {
      in.dataset = split_idx_dataset(tr, cfg.dataset.train_fraction);
    } else {
      const auto te = load_idx(req("test_images", cfg.dataset.test_images),
                               req("test_labels", cfg.dataset.test_labels));
      if (te.data.dim() != tr.data.dim()) {
        throw ConfigError("dataset.test_images: item size differs from the training images");
      }
      in.dataset.train = tr.data;
      in.dataset.test = te.data;
      in.dataset.image_shape = tr.item_shape.size() == 2 ? tr.item_shape : std::vector<std::size_t>{};
      for (ClassId c : tr.data.labels) in.dataset.class_names[c] = std::to_string(c);
      for (ClassId c : te.data.labels) in.dataset.class_names[c] = std::to_string(c);
    }
    if (!cfg.dataset.class_names.empty()) {
      for (auto& [c, name] : in.dataset.class_names) {
        if (c >= cfg.dataset.class_names.size()) {
          throw ConfigError("dataset.class_names: no name for label " + std::to_string(c));
        }
        name = cfg.dataset.class_names[c];
      }
    }
    // Re-key the anchors by dataset class id, matching on the label.
    std::map<ClassId, AnchorSet::Entry> entries;
    std::vector<std::string> missing;
    for (const auto& [c, name] : in.dataset.class_names) {
      std::optional<ClassId> id = raw->find_label(name);
      if (!id && cfg.anchors.source == "synthetic" && raw->contains(c)) id = c;
      if (!id) {
        missing.push_back(name);
        continue;
      }
      const auto v = raw->vector(*id);
      entries.emplace(c, AnchorSet::Entry{name, {v.begin(), v.end()}});
    }
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      throw ConfigError("anchors: no anchor for class label(s) " + list);
    }
    in.anchors = std::make_shared<const AnchorSet>(raw->dim(), std::move(entries), raw->provenance());
  }

  if (scenario_from_string(cfg.scenario) == Scenario::class_il &&
      in.dataset.classes().size() % cfg.tasks != 0) {
    throw ConfigError("tasks: " + std::to_string(in.dataset.classes().size()) +
                      " classes cannot be split into " + std::to_string(cfg.tasks) + " equal tasks");
  }
  in.input_hash = git_blob_hash(hashes);
  return in;
}

TaskStream build_stream(const ExperimentConfig& cfg, const Dataset& dataset, std::uint64_t seed) {
  if (scenario_from_string(cfg.scenario) == Scenario::class_il) {
    return split_class_incremental(dataset, cfg.tasks, seed);
  }
  std::vector<InputTransform> schedule;
  for (const auto& t : cfg.dataset.transforms) schedule.push_back(InputTransform::parse(t));
  return make_domain_incremental(
      dataset, cfg.tasks, schedule, seed,
      cfg.dataset.test_mode == "fixed" ? DomainTestMode::fixed : DomainTestMode::per_task);
}

Strategy make_strategy(const ExperimentConfig& cfg, const std::string& kind) {
  Strategy s;
  s.kind = strategy_kind_from_string(kind);
  s.beta = cfg.hyper.beta;
  s.triplet.margin = cfg.hyper.alpha;
  s.triplet.mining = mining_from_string(cfg.hyper.negative_mining);
  s.retention_metric = retention_metric_from_string(cfg.hyper.retention_metric);
  return s;
}

NetConfig make_net_config(const ExperimentConfig& cfg) {
  NetConfig n;
  n.hidden = cfg.network.hidden;
  n.activation = layer_kind_from_string(cfg.network.activation);
  n.embed_dim = cfg.anchors.source == "synthetic" ? cfg.anchors.dim : 0;
  n.l2norm_head = cfg.network.l2norm_head;
  return n;
}

TrainHyper make_train_hyper(const ExperimentConfig& cfg) {
  TrainHyper h;
  h.lr = cfg.hyper.lr;
  h.batch_size = cfg.hyper.batch_size;
  h.epochs = cfg.hyper.epochs;
  h.memory_size = cfg.hyper.memory_size;
  h.replay_fraction = cfg.hyper.replay_fraction;
  h.replay_policy = replay_policy_from_string(cfg.hyper.replay_policy);
  h.buffer_update = cfg.hyper.buffer_update == "after" ? BufferUpdate::after : BufferUpdate::during;
  return h;
}

ProbeHyper make_probe_hyper(const ExperimentConfig& cfg, std::uint64_t seed) {
  return {cfg.probe.epochs, cfg.probe.lr, cfg.probe.batch_size, seed};
}

std::string resolve_output_dir(const ExperimentConfig& cfg) {
  fs::path p(cfg.output_dir);
  if (p.is_relative()) {
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) p = fs::path(root) / p;
  }
  return p.lexically_normal().string();
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

std::vector<SeedSummary> run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                        std::ostream& log) {
  const auto inputs = prepare_inputs(cfg);
  const std::string hash = config_hash(cfg);
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  NetConfig net_cfg = make_net_config(cfg);
  net_cfg.embed_dim = inputs.anchors->dim();
  const TrainHyper hyper = make_train_hyper(cfg);

  std::vector<SeedSummary> results;
  std::ostringstream metrics;
  metrics << "config_hash,seed,strategy,metric,task,value\n";
  json per_run = json::object();

  for (const auto& name : cfg.strategies) {
    const Strategy strategy = make_strategy(cfg, name);
    for (std::uint64_t seed : cfg.seeds) {
      const TaskStream stream = build_stream(cfg, inputs.dataset, seed);
      RunOptions opts;
      opts.on_task_end = [&](std::uint32_t task, const RunState& state) {
        Checkpoint ckpt{state.net, {}};
        json meta = {{"config_hash", hash},       {"strategy", name},
                     {"seed", seed},              {"task", task},
                     {"steps", state.steps},      {"seen_classes", state.seen_classes}};
        if (state.head) {
          ckpt.sections[kSectionHead] = encode_net(state.head->net());
          meta["head_classes"] = state.head->classes();
        }
        if (state.buffer) ckpt.sections[kSectionBuffer] = state.buffer->serialize();
        ckpt.sections[kSectionMeta] = to_bytes(meta.dump());
        const auto path = checkpoint_path(dir, name, seed, task);
        fs::create_directories(path.parent_path());
        save_checkpoint(path.string(), ckpt);
      };
      log << "run " << name << " seed " << seed << "\n" << std::flush;
      RunResult run = run_stream(stream, strategy, net_cfg, hyper, inputs.anchors, seed, opts);

      SeedSummary s;
      s.strategy = name;
      s.seed = seed;
      s.accuracy = run.accuracy;
      s.avg_accuracy = avg_accuracy(run.accuracy);
      s.forgetting = forgetting(run.accuracy);
      s.last_task_accuracy = run.accuracy.at(cfg.tasks, cfg.tasks);

      write_text(dir / "accuracy" / (name + "_seed" + std::to_string(seed) + ".csv"),
                 "# config_hash=" + hash + "\n" + run.accuracy.to_csv());

      const std::string prefix = hash + "," + std::to_string(seed) + "," + name + ",";
      for (std::size_t i = 1; i <= cfg.tasks; ++i) {
        metrics << prefix << "final_accuracy," << i << "," << num(run.accuracy.at(cfg.tasks, i)) << "\n";
      }
      for (std::size_t i = 1; i <= cfg.tasks; ++i) {
        metrics << prefix << "diagonal_accuracy," << i << "," << num(run.accuracy.at(i, i)) << "\n";
      }
      for (const auto& rep : run.reports) {
        metrics << prefix << "train_loss," << rep.task_index << ","
                << num(rep.epoch_loss.empty() ? 0.0 : rep.epoch_loss.back()) << "\n";
      }
      metrics << prefix << "avg_accuracy,all," << num(s.avg_accuracy) << "\n";
      metrics << prefix << "forgetting,all," << num(s.forgetting) << "\n";
      metrics << prefix << "last_task_accuracy," << cfg.tasks << "," << num(s.last_task_accuracy) << "\n";

      std::size_t warnings = 0;
      for (const auto& rep : run.reports) warnings += rep.replay_warnings;
      per_run[name][std::to_string(seed)] = {{"avg_accuracy", s.avg_accuracy},
                                             {"forgetting", s.forgetting},
                                             {"last_task_accuracy", s.last_task_accuracy},
                                             {"replay_warnings", warnings},
                                             {"steps", run.final_state.steps}};
      results.push_back(std::move(s));
    }
  }

  json summary = {{"config_hash", hash}, {"name", cfg.name}, {"strategies", json::object()}};
  for (const auto& name : cfg.strategies) {
    std::vector<double> avg, fgt, last;
    for (const auto& r : results) {
      if (r.strategy != name) continue;
      avg.push_back(r.avg_accuracy);
      fgt.push_back(r.forgetting);
      last.push_back(r.last_task_accuracy);
    }
    summary["strategies"][name] = {
        {"avg_accuracy", {{"mean", mean_of(avg)}, {"stddev", stddev_of(avg)}}},
        {"forgetting", {{"mean", mean_of(fgt)}, {"stddev", stddev_of(fgt)}}},
        {"last_task_accuracy", {{"mean", mean_of(last)}, {"stddev", stddev_of(last)}}},
        {"seeds", per_run[name]}};
  }

  json manifest = {{"schema_version", kConfigSchemaVersion},
                   {"config_hash", hash},
                   {"input_hash", inputs.input_hash},
                   {"base_dir", fs::absolute(cfg.base_dir).lexically_normal().string()},
                   {"scenario", cfg.scenario},
                   {"tasks", cfg.tasks},
                   {"seeds", cfg.seeds},
                   {"strategies", cfg.strategies},
                   {"anchor_provenance", inputs.anchors->provenance()},
                   {"files",
                    {"config.json", "metrics.csv", "summary.json", "accuracy/", "checkpoints/"}},
                   {"complete", true}};

  write_text(dir / "config.json", to_json_text(cfg));
  write_text(dir / "metrics.csv", metrics.str());
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return results;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

std::vector<ProbeRow> probe_run_dir(const std::string& run_dir, std::ostream& log) {
  const fs::path dir(run_dir);
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw StateError("not a run directory (missing " + manifest_path.string() + ")");
  }
  const json manifest = json::parse(read_text(manifest_path));
  ExperimentConfig cfg =
      parse_config(read_text(dir / "config.json"), manifest.at("base_dir").get<std::string>());
  if (scenario_from_string(cfg.scenario) != Scenario::class_il) {
    throw StateError("probe needs a class-il run: domain-il tasks leave no unseen classes");
  }

  // Check every expected checkpoint before doing any work.
  std::vector<std::string> missing;
  for (const auto& name : cfg.strategies) {
    for (std::uint64_t seed : cfg.seeds) {
      for (std::size_t t = 1; t < cfg.tasks; ++t) {
        const auto p = checkpoint_path(dir, name, seed, t);
        if (!fs::exists(p)) missing.push_back(p.string());
      }
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing checkpoints:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw StateError(msg);
  }

  const auto inputs = prepare_inputs(cfg);
  std::vector<ProbeRow> rows;
  for (const auto& name : cfg.strategies) {
    const Strategy strategy = make_strategy(cfg, name);
    for (std::uint64_t seed : cfg.seeds) {
      const TaskStream stream = build_stream(cfg, inputs.dataset, seed);
      ProbeRow row;
      row.strategy = name;
      row.seed = seed;
      for (std::size_t t = 1; t < cfg.tasks; ++t) {
        const Checkpoint ckpt = load_checkpoint(checkpoint_path(dir, name, seed, t).string());
        std::vector<ClassId> seen, unseen;
        std::vector<const Experience*> future;
        for (const auto& e : stream.experiences) {
          auto& into = e.task_index <= t ? seen : unseen;
          into.insert(into.end(), e.class_set.begin(), e.class_set.end());
          if (e.task_index > t) future.push_back(&e);
        }
        std::sort(seen.begin(), seen.end());
        std::sort(unseen.begin(), unseen.end());
        LabeledData train, test;
        std::vector<Tensor> tr_parts, te_parts;
        for (const auto* e : future) {
          tr_parts.push_back(e->train.inputs);
          te_parts.push_back(e->test.inputs);
          train.labels.insert(train.labels.end(), e->train.labels.begin(), e->train.labels.end());
          test.labels.insert(test.labels.end(), e->test.labels.begin(), e->test.labels.end());
        }
        train.inputs = tr_parts.front();
        test.inputs = te_parts.front();
        for (std::size_t i = 1; i < tr_parts.size(); ++i) {
          train.inputs = concat_rows(train.inputs, tr_parts[i]);
          test.inputs = concat_rows(test.inputs, te_parts[i]);
        }

        row.probe_accuracy.push_back(
            linear_probe(ckpt.net, train, test, make_probe_hyper(cfg, Rng::derive(seed, t).next_u64())));
        row.zero_shot_chance.push_back(1.0 / static_cast<double>(unseen.size()));
        if (strategy.uses_anchors()) {
          row.zero_shot_accuracy.push_back(
              zero_shot_eval(ckpt.net, inputs.anchors, unseen, test, seen).accuracy);
        } else {
          row.zero_shot_accuracy.push_back(std::nullopt);
        }
      }
      row.fw_score = fw_score(row.probe_accuracy, cfg.tasks);
      log << "probe " << name << " seed " << seed << " fw_score " << num(row.fw_score) << "\n";
      rows.push_back(std::move(row));
    }
  }

  const std::string hash = manifest.at("config_hash").get<std::string>();
  std::ostringstream csv;
  csv << "config_hash,strategy,seed,task,metric,value\n";
  for (const auto& r : rows) {
    const std::string prefix = hash + "," + r.strategy + "," + std::to_string(r.seed) + ",";
    for (std::size_t i = 0; i < r.probe_accuracy.size(); ++i) {
      csv << prefix << i + 1 << ",probe_accuracy," << num(r.probe_accuracy[i]) << "\n";
    }
    for (std::size_t i = 0; i < r.zero_shot_accuracy.size(); ++i) {
      csv << prefix << i + 1 << ",zero_shot_accuracy,"
          << (r.zero_shot_accuracy[i] ? num(*r.zero_shot_accuracy[i]) : "inapplicable") << "\n";
      csv << prefix << i + 1 << ",zero_shot_chance," << num(r.zero_shot_chance[i]) << "\n";
    }
    csv << prefix << "all,fw_score," << num(r.fw_score) << "\n";
  }
  write_text(dir / "probe.csv", csv.str());
  return rows;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

namespace {

template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    body();
    return 0;
  } catch (const ConfigError& e) {
    err << "error: invalid configuration: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
}

struct SweepRow {
  std::string strategy;
  std::uint64_t seed;
  double avg_accuracy, forgetting, last_task_accuracy;
};

}  // namespace

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed, std::ostream& out,
            std::ostream& err) {
  return guarded(err, [&] {
    ExperimentConfig cfg = load_config(config_path);
    if (seed) cfg.seeds = {*seed};
    const auto dir = resolve_output_dir(cfg);
    const auto results = run_experiment(cfg, dir, out);
    for (const auto& r : results) {
      out << r.strategy << " seed " << r.seed << ": avg_accuracy " << num(r.avg_accuracy)
          << " forgetting " << num(r.forgetting) << "\n";
    }
    out << "wrote " << dir << "\n";
  });
}

int cmd_sweep(const std::string& config_path, const std::string& axis, std::ostream& out,
              std::ostream& err) {
  return guarded(err, [&] {
    if (axis != "memory" && axis != "beta") {
      throw ConfigError("axis: expected 'memory' or 'beta', got '" + axis + "'");
    }
    const ExperimentConfig base = load_config(config_path);
    std::vector<std::string> strategies;
    for (const auto& s : base.strategies) {
      const auto kind = strategy_kind_from_string(s);
      const bool relevant = axis == "beta" ? kind == StrategyKind::cvm
                                           : make_strategy(base, s).uses_replay();
      if (relevant) strategies.push_back(s);
    }
    if (strategies.empty()) {
      throw ConfigError("strategies: none of the configured strategies depend on " + axis);
    }

    std::vector<double> grid;
    if (axis == "memory") {
      for (auto m : base.sweep.memory) grid.push_back(static_cast<double>(m));
    } else {
      grid = base.sweep.beta;
    }

    const fs::path root = fs::path(resolve_output_dir(base)) / ("sweep_" + axis);
    std::ostringstream csv;
    csv << "config_hash,axis,value,strategy,seed,avg_accuracy,forgetting,last_task_accuracy\n";
    std::ostringstream plot;
    plot << "config_hash,axis,value,strategy,metric,mean,stddev\n";

    for (double v : grid) {
      ExperimentConfig cfg = base;
      cfg.strategies = strategies;
      if (axis == "memory") {
        cfg.hyper.memory_size = static_cast<std::size_t>(v);
      } else {
        cfg.hyper.beta = v;
      }
      const std::string hash = config_hash(cfg);
      const fs::path point = root / (axis + "_" + num(v));
      const fs::path result_file = point / "point.json";

      std::vector<SweepRow> rows;
      bool reused = false;
      if (fs::exists(result_file)) {
        const json j = json::parse(read_text(result_file));
        if (j.value("config_hash", "") == hash) {
          for (const auto& r : j.at("rows")) {
            rows.push_back({r.at("strategy"), r.at("seed"), r.at("avg_accuracy"),
                            r.at("forgetting"), r.at("last_task_accuracy")});
          }
          reused = true;
          out << "skip " << axis << "=" << num(v) << " (already complete)\n";
        }
      }
      if (!reused) {
        out << "sweep " << axis << "=" << num(v) << "\n";
        for (const auto& r : run_experiment(cfg, point.string(), out)) {
          rows.push_back({r.strategy, r.seed, r.avg_accuracy, r.forgetting, r.last_task_accuracy});
        }
        json j = {{"config_hash", hash}, {"axis", axis}, {"value", v}, {"rows", json::array()}};
        for (const auto& r : rows) {
          j["rows"].push_back({{"strategy", r.strategy},
                               {"seed", r.seed},
                               {"avg_accuracy", r.avg_accuracy},
                               {"forgetting", r.forgetting},
                               {"last_task_accuracy", r.last_task_accuracy}});
        }
        write_text(result_file, j.dump(2) + "\n");
      }

      for (const auto& r : rows) {
        csv << hash << "," << axis << "," << num(v) << "," << r.strategy << "," << r.seed << ","
            << num(r.avg_accuracy) << "," << num(r.forgetting) << "," << num(r.last_task_accuracy)
            << "\n";
      }
      for (const auto& s : strategies) {
        std::map<std::string, std::vector<double>> m;
        for (const auto& r : rows) {
          if (r.strategy != s) continue;
          m["avg_accuracy"].push_back(r.avg_accuracy);
          m["forgetting"].push_back(r.forgetting);
          m["last_task_accuracy"].push_back(r.last_task_accuracy);
        }
        for (const auto& [metric, vals] : m) {
          plot << hash << "," << axis << "," << num(v) << "," << s << "," << metric << ","
               << num(mean_of(vals)) << "," << num(stddev_of(vals)) << "\n";
        }
      }
    }
    write_text(root / ("sweep_" + axis + ".csv"), csv.str());
    write_text(root / ("sweep_" + axis + "_plot.csv"), plot.str());
    out << "wrote " << root.string() << "\n";
  });
}

int cmd_probe(const std::string& run_dir, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const auto rows = probe_run_dir(run_dir, out);
    for (const auto& r : rows) {
      out << r.strategy << " seed " << r.seed << ": fw_score " << num(r.fw_score);
      if (!r.zero_shot_accuracy.empty()) {
        const auto& z = r.zero_shot_accuracy.back();
        out << " zero_shot(task " << r.zero_shot_accuracy.size() << ") "
            << (z ? num(*z) : std::string("inapplicable"));
      }
      out << "\n";
    }
    out << "wrote " << (fs::path(run_dir) / "probe.csv").string() << "\n";
  });
}

}  // namespace cvm
