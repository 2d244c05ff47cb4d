#include "cvm/stream.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <set>

#include "cvm/rng.hpp"

namespace cvm {

LabeledData LabeledData::subset(std::span<const std::size_t> rows) const {
  LabeledData out{inputs.gather_rows(rows), {}};
  out.labels.reserve(rows.size());
  for (auto r : rows) out.labels.push_back(labels[r]);
  return out;
}

std::vector<ClassId> Dataset::classes() const {
  std::set<ClassId> s(train.labels.begin(), train.labels.end());
  s.insert(test.labels.begin(), test.labels.end());
  for (const auto& kv : class_names) s.insert(kv.first);
  return {s.begin(), s.end()};
}

std::string to_string(Scenario s) { return s == Scenario::class_il ? "class-il" : "domain-il"; }

Scenario scenario_from_string(const std::string& name) {
  if (name == "class-il") return Scenario::class_il;
  if (name == "domain-il") return Scenario::domain_il;
  throw ConfigError("unknown scenario '" + name + "'");
}

namespace {

std::vector<std::size_t> rows_with_labels(const LabeledData& data, const std::set<ClassId>& keep) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (keep.count(data.labels[i])) rows.push_back(i);
  }
  return rows;
}

}  // namespace

TaskStream split_class_incremental(const Dataset& dataset, std::size_t num_tasks,
                                   std::uint64_t seed) {
  if (num_tasks < 2) throw ConfigError("a task stream needs at least 2 tasks");
  const auto classes = dataset.classes();
  if (classes.size() % num_tasks != 0) {
    throw ConfigError(std::to_string(classes.size()) + " classes cannot be split into " +
                      std::to_string(num_tasks) + " equal tasks");
  }
  const std::size_t per_task = classes.size() / num_tasks;
  std::vector<std::size_t> order(num_tasks);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, 0x5EED);
  rng.shuffle(order.begin(), order.end());

  TaskStream stream;
  stream.scenario = Scenario::class_il;
  stream.class_names = dataset.class_names;
  stream.image_shape = dataset.image_shape;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    const std::size_t g = order[t];
    std::vector<ClassId> group(classes.begin() + static_cast<std::ptrdiff_t>(g * per_task),
                               classes.begin() + static_cast<std::ptrdiff_t>((g + 1) * per_task));
    const std::set<ClassId> keep(group.begin(), group.end());
    Experience e;
    e.task_index = static_cast<std::uint32_t>(t + 1);
    e.class_set = group;
    e.train = dataset.train.subset(rows_with_labels(dataset.train, keep));
    e.test = dataset.test.subset(rows_with_labels(dataset.test, keep));
    stream.experiences.push_back(std::move(e));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// transforms
// ---------------------------------------------------------------------------

InputTransform InputTransform::parse(const std::string& text) {
  const auto colon = text.find(':');
  const std::string kind = text.substr(0, colon);
  InputTransform t;
  if (kind == "identity") {
    t.kind = Kind::identity;
    return t;
  }
  if (colon == std::string::npos) throw ConfigError("transform '" + text + "' needs ':amount'");
  try {
    t.amount = std::stod(text.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError("transform '" + text + "' has a non-numeric amount");
  }
  if (kind == "noise") {
    if (t.amount < 0) throw ConfigError("noise level must be non-negative");
    t.kind = Kind::noise;
  } else if (kind == "rotation") {
    t.kind = Kind::rotation;
  } else if (kind == "brightness") {
    t.kind = Kind::brightness;
  } else {
    throw ConfigError("unknown transform '" + kind + "'");
  }
  return t;
}

std::string InputTransform::describe() const {
  switch (kind) {
    case Kind::identity:
      return "identity";
    case Kind::noise:
      return "noise:" + std::to_string(amount);
    case Kind::rotation:
      return "rotation:" + std::to_string(amount);
    case Kind::brightness:
      return "brightness:" + std::to_string(amount);
  }
  return "identity";
}

void apply_transform(Tensor& inputs, const InputTransform& transform,
                     const std::vector<std::size_t>& image_shape, Rng& rng) {
  const bool image = image_shape.size() == 2;
  switch (transform.kind) {
    case InputTransform::Kind::identity:
      return;
    case InputTransform::Kind::noise:
      for (auto& x : inputs.data()) x += static_cast<float>(transform.amount * rng.normal());
      return;
    case InputTransform::Kind::brightness:
      for (auto& x : inputs.data()) {
        x += static_cast<float>(transform.amount);
        if (image) x = std::clamp(x, 0.0f, 1.0f);
      }
      return;
    case InputTransform::Kind::rotation: {
      const double rad = transform.amount * std::numbers::pi / 180.0;
      const double c = std::cos(rad), s = std::sin(rad);
      if (image) {
        const std::size_t h = image_shape[0], w = image_shape[1];
        if (h * w != inputs.cols()) throw DimensionError("image shape does not match row width");
        const double cy = (static_cast<double>(h) - 1) / 2, cx = (static_cast<double>(w) - 1) / 2;
        std::vector<float> src(h * w);
        for (std::size_t r = 0; r < inputs.rows(); ++r) {
          auto row = inputs.row(r);
          std::copy(row.begin(), row.end(), src.begin());
          // Inverse mapping with nearest-neighbour sampling; outside pixels are 0.
          for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
              const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
              const double sx = c * dx + s * dy + cx;
              const double sy = -s * dx + c * dy + cy;
              const auto ix = static_cast<long>(std::lround(sx));
              const auto iy = static_cast<long>(std::lround(sy));
              const bool inside = ix >= 0 && iy >= 0 && ix < static_cast<long>(w) &&
                                  iy < static_cast<long>(h);
              row[y * w + x] = inside ? src[static_cast<std::size_t>(iy) * w +
                                            static_cast<std::size_t>(ix)]
                                      : 0.0f;
            }
          }
        }
      } else {
        for (std::size_t r = 0; r < inputs.rows(); ++r) {
          auto row = inputs.row(r);
          for (std::size_t k = 0; k + 1 < row.size(); k += 2) {
            const double a = row[k], b = row[k + 1];
            row[k] = static_cast<float>(c * a - s * b);
            row[k + 1] = static_cast<float>(s * a + c * b);
          }
        }
      }
      return;
    }
  }
}

TaskStream make_domain_incremental(const Dataset& dataset, std::size_t num_tasks,
                                   const std::vector<InputTransform>& schedule, std::uint64_t seed,
                                   DomainTestMode test_mode) {
  if (num_tasks < 2) throw ConfigError("a task stream needs at least 2 tasks");
  if (schedule.size() != num_tasks) {
    throw ConfigError("transform schedule has " + std::to_string(schedule.size()) +
                      " entries for " + std::to_string(num_tasks) + " tasks");
  }
  const auto classes = dataset.classes();
  Rng rng = Rng::derive(seed, 0xD0A1);

  // Deal each class's training rows round-robin into T shards.
  std::vector<std::vector<std::size_t>> shards(num_tasks);
  for (ClassId c : classes) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < dataset.train.size(); ++i) {
      if (dataset.train.labels[i] == c) rows.push_back(i);
    }
    if (rows.size() < num_tasks) {
      throw ConfigError("class " + std::to_string(c) + " has fewer training rows than tasks");
    }
    rng.shuffle(rows.begin(), rows.end());
    for (std::size_t k = 0; k < rows.size(); ++k) shards[k % num_tasks].push_back(rows[k]);
  }

  TaskStream stream;
  stream.scenario = Scenario::domain_il;
  stream.class_names = dataset.class_names;
  stream.image_shape = dataset.image_shape;
  for (std::size_t t = 0; t < num_tasks; ++t) {
    std::sort(shards[t].begin(), shards[t].end());
    Experience e;
    e.task_index = static_cast<std::uint32_t>(t + 1);
    e.class_set = classes;
    e.train = dataset.train.subset(shards[t]);
    Rng train_rng = Rng::derive(seed, 0x7A00 + t);
    apply_transform(e.train.inputs, schedule[t], dataset.image_shape, train_rng);
    e.test = dataset.test;
    if (test_mode == DomainTestMode::per_task) {
      Rng test_rng = Rng::derive(seed, 0x7E00 + t);
      apply_transform(e.test.inputs, schedule[t], dataset.image_shape, test_rng);
    }
    stream.experiences.push_back(std::move(e));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// synthetic data
// ---------------------------------------------------------------------------

Dataset synth_dataset(const SynthDatasetSpec& spec, const AnchorSet& anchors, std::uint64_t seed) {
  if (spec.alignment < 0.0 || spec.alignment > 1.0) {
    throw ConstructionError("anchor alignment must lie in [0, 1]");
  }
  if (spec.classes < 2) throw ConstructionError("synthetic dataset needs at least 2 classes");
  if (spec.samples_per_class < 2) throw ConstructionError("need at least 2 samples per class");
  if (spec.train_fraction <= 0.0 || spec.train_fraction >= 1.0) {
    throw ConstructionError("train fraction must lie in (0, 1)");
  }
  const auto ids = anchors.ids();
  if (ids.size() < spec.classes) {
    throw ConstructionError("anchor set has only " + std::to_string(ids.size()) + " classes");
  }
  const std::size_t adim = anchors.dim();
  if (spec.alignment > 0.0 && spec.dim < adim) {
    throw ConstructionError("input dim " + std::to_string(spec.dim) +
                            " is smaller than the anchor dim " + std::to_string(adim) +
                            "; anchor geometry cannot be embedded");
  }

  Rng rng = Rng::derive(seed, 0xDA7A);
  auto random_unit = [&](std::size_t n) {
    std::vector<double> v(n);
    double s = 0;
    do {
      s = 0;
      for (auto& x : v) {
        x = rng.normal();
        s += x * x;
      }
    } while (s < 1e-12);
    s = std::sqrt(s);
    for (auto& x : v) x /= s;
    return v;
  };

  // Isometry P: columns are orthonormal vectors in input space.
  std::vector<std::vector<double>> columns;
  if (spec.alignment > 0.0) {
    while (columns.size() < adim) {
      auto v = random_unit(spec.dim);
      for (const auto& b : columns) {
        for (int pass = 0; pass < 2; ++pass) {
          double p = 0;
          for (std::size_t i = 0; i < spec.dim; ++i) p += v[i] * b[i];
          for (std::size_t i = 0; i < spec.dim; ++i) v[i] -= p * b[i];
        }
      }
      double n = 0;
      for (double x : v) n += x * x;
      n = std::sqrt(n);
      if (n < 1e-6) continue;
      for (auto& x : v) x /= n;
      columns.push_back(std::move(v));
    }
  }

  const double rho = spec.alignment;
  const double rest = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  const auto n_train = static_cast<std::size_t>(
      std::lround(spec.train_fraction * static_cast<double>(spec.samples_per_class)));
  const std::size_t n_test = spec.samples_per_class - n_train;

  Dataset ds;
  ds.train.inputs = Tensor({spec.classes * n_train, spec.dim});
  ds.test.inputs = Tensor({spec.classes * n_test, spec.dim});
  std::size_t tr = 0, te = 0;
  for (std::size_t ci = 0; ci < spec.classes; ++ci) {
    const ClassId c = ids[ci];
    ds.class_names[c] = anchors.label(c);
    std::vector<double> mean(spec.dim, 0.0);
    if (rho > 0.0) {
      const auto a = anchors.vector(c);
      for (std::size_t j = 0; j < adim; ++j) {
        for (std::size_t i = 0; i < spec.dim; ++i) mean[i] += rho * a[j] * columns[j][i];
      }
    }
    if (rest > 0.0) {
      const auto r = random_unit(spec.dim);
      for (std::size_t i = 0; i < spec.dim; ++i) mean[i] += rest * r[i];
    }
    double n = 0;
    for (double x : mean) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-9) throw ConstructionError("degenerate class mean for class " + std::to_string(c));
    for (auto& x : mean) x *= spec.radius / n;

    for (std::size_t s = 0; s < spec.samples_per_class; ++s) {
      const bool is_train = s < n_train;
      auto row = is_train ? ds.train.inputs.row(tr++) : ds.test.inputs.row(te++);
      for (std::size_t i = 0; i < spec.dim; ++i) {
        row[i] = static_cast<float>(mean[i] + spec.noise * rng.normal());
      }
      (is_train ? ds.train.labels : ds.test.labels).push_back(c);
    }
  }
  return ds;
}

}  // namespace cvm
