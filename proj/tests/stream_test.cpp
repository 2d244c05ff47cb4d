#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "cvm/error.hpp"
#include "cvm/idx.hpp"
#include "cvm/stream.hpp"
#include "test_util.hpp"

namespace cvm {
namespace {

Dataset small_synth(std::size_t k = 10, std::size_t spc = 50, double noise = 0.3,
                    std::uint64_t seed = 3) {
  auto anchors = test::random_anchors(k, 16, 1);
  SynthDatasetSpec spec;
  spec.classes = k;
  spec.samples_per_class = spc;
  spec.noise = noise;
  return synth_dataset(spec, *anchors, seed);
}

std::set<std::vector<float>> row_set(const Tensor& t) {
  std::set<std::vector<float>> s;
  for (std::size_t i = 0; i < t.rows(); ++i) s.emplace(t.row(i).begin(), t.row(i).end());
  return s;
}

TEST(ClassIncremental, PartitionIntoEqualDisjointTasks) {
  const auto ds = small_synth();
  const auto stream = split_class_incremental(ds, 5, 7);
  ASSERT_EQ(stream.num_tasks(), 5u);
  std::set<ClassId> all;
  for (const auto& e : stream.experiences) {
    EXPECT_EQ(e.class_set.size(), 2u);
    for (ClassId c : e.class_set) EXPECT_TRUE(all.insert(c).second);
    const std::set<ClassId> cs(e.class_set.begin(), e.class_set.end());
    for (ClassId l : e.train.labels) EXPECT_TRUE(cs.count(l));
    for (ClassId l : e.test.labels) EXPECT_TRUE(cs.count(l));
    EXPECT_EQ(e.train.size(), 80u);
    EXPECT_EQ(e.test.size(), 20u);
  }
  EXPECT_EQ(all.size(), 10u);
}

TEST(ClassIncremental, SeedPermutesGroupOrder) {
  const auto ds = small_synth();
  std::set<std::vector<ClassId>> orders;
  for (std::uint64_t s = 1; s <= 6; ++s) {
    const auto stream = split_class_incremental(ds, 5, s);
    std::vector<ClassId> firsts;
    for (const auto& e : stream.experiences) {
      firsts.push_back(e.class_set[0]);
      // contiguous groups: {2g, 2g+1}
      EXPECT_EQ(e.class_set[1], e.class_set[0] + 1);
      EXPECT_EQ(e.class_set[0] % 2, 0u);
    }
    orders.insert(firsts);
  }
  EXPECT_GT(orders.size(), 1u);
}

TEST(ClassIncremental, IndivisibleClassCountIsConfigError) {
  EXPECT_THROW(split_class_incremental(small_synth(), 3, 1), ConfigError);
}

TEST(ClassIncremental, TrainAndTestDisjointAndPure) {
  const auto ds = small_synth();
  const auto a = split_class_incremental(ds, 5, 4);
  const auto b = split_class_incremental(ds, 5, 4);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto tr = row_set(a.experiences[t].train.inputs);
    for (const auto& r : row_set(a.experiences[t].test.inputs)) EXPECT_FALSE(tr.count(r));
    EXPECT_EQ(a.experiences[t].train.inputs, b.experiences[t].train.inputs);
    EXPECT_EQ(a.experiences[t].test.labels, b.experiences[t].test.labels);
  }
}

TEST(DomainIncremental, IdentityScheduleKeepsOriginalRows) {
  const auto ds = small_synth();
  std::vector<InputTransform> schedule(3);
  const auto stream = make_domain_incremental(ds, 3, schedule, 5);
  const auto original = row_set(ds.train.inputs);
  std::size_t total = 0;
  for (const auto& e : stream.experiences) {
    EXPECT_EQ(e.class_set, ds.classes());
    for (const auto& r : row_set(e.train.inputs)) EXPECT_TRUE(original.count(r));
    total += e.train.size();
    std::map<ClassId, std::size_t> per;
    for (ClassId l : e.train.labels) ++per[l];
    for (const auto& [c, n] : per) EXPECT_NEAR(static_cast<double>(n), 40.0 / 3, 1.0);
  }
  EXPECT_EQ(total, ds.train.size());
}

TEST(DomainIncremental, NoiseScheduleIncreasesVariance) {
  const auto ds = small_synth(10, 300, 0.3);
  std::vector<InputTransform> schedule{InputTransform::parse("noise:0"), InputTransform::parse("noise:0.1"),
                                       InputTransform::parse("noise:0.2")};
  const auto stream = make_domain_incremental(ds, 3, schedule, 5);
  // variance around each class mean, averaged over classes and coordinates
  auto spread = [](const LabeledData& d) {
    std::map<ClassId, std::vector<double>> sum, sq;
    std::map<ClassId, double> n;
    for (std::size_t i = 0; i < d.size(); ++i) {
      auto& s = sum[d.labels[i]];
      auto& q = sq[d.labels[i]];
      s.resize(d.dim());
      q.resize(d.dim());
      for (std::size_t j = 0; j < d.dim(); ++j) {
        s[j] += d.inputs(i, j);
        q[j] += double(d.inputs(i, j)) * d.inputs(i, j);
      }
      n[d.labels[i]] += 1;
    }
    double v = 0;
    for (auto& [c, s] : sum) {
      for (std::size_t j = 0; j < s.size(); ++j) v += sq[c][j] / n[c] - std::pow(s[j] / n[c], 2);
    }
    return v;
  };
  const double v0 = spread(stream.experiences[0].train);
  const double v1 = spread(stream.experiences[1].train);
  const double v2 = spread(stream.experiences[2].train);
  EXPECT_LT(v0, v1);
  EXPECT_LT(v1, v2);
}

TEST(DomainIncremental, ScheduleLengthMismatchIsConfigError) {
  EXPECT_THROW(make_domain_incremental(small_synth(), 3, std::vector<InputTransform>(2), 1), ConfigError);
}

TEST(DomainIncremental, FixedTestModeSharesUntransformedTestSet) {
  const auto ds = small_synth();
  std::vector<InputTransform> schedule{InputTransform::parse("rotation:30"),
                                       InputTransform::parse("brightness:0.2")};
  const auto fixed = make_domain_incremental(ds, 2, schedule, 5, DomainTestMode::fixed);
  EXPECT_EQ(fixed.experiences[0].test.inputs, ds.test.inputs);
  EXPECT_EQ(fixed.experiences[1].test.inputs, ds.test.inputs);
  const auto per = make_domain_incremental(ds, 2, schedule, 5, DomainTestMode::per_task);
  EXPECT_NE(per.experiences[0].test.inputs, ds.test.inputs);
}

TEST(Transforms, ParseAndDescribe) {
  EXPECT_EQ(InputTransform::parse("noise:0.1").kind, InputTransform::Kind::noise);
  EXPECT_DOUBLE_EQ(InputTransform::parse("rotation:45").amount, 45.0);
  EXPECT_EQ(InputTransform::parse("identity").kind, InputTransform::Kind::identity);
  EXPECT_EQ(InputTransform::parse(InputTransform::parse("brightness:0.5").describe()).amount, 0.5);
  EXPECT_THROW(InputTransform::parse("blur:1"), ConfigError);
}

TEST(Transforms, VectorRotationPreservesNorm) {
  Tensor t = test::random_tensor(5, 6, 3);
  const Tensor before = t;
  Rng rng(1);
  apply_transform(t, InputTransform::parse("rotation:37"), {}, rng);
  EXPECT_NE(t, before);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(norm2<float>(t.row(i)), norm2<float>(before.row(i)), 1e-5);
}

TEST(Transforms, ImageRotationBy90MovesPixels) {
  Tensor img({1, 9}, std::vector<float>{1, 0, 0, 0, 0, 0, 0, 0, 0});
  Rng rng(1);
  apply_transform(img, InputTransform::parse("rotation:90"), {3, 3}, rng);
  EXPECT_EQ(img(0, 0), 0.0f);
  float total = 0;
  for (float v : img.data()) total += v;
  EXPECT_NEAR(total, 1.0f, 1e-5);
  Tensor b({1, 4}, 0.9f);
  apply_transform(b, InputTransform::parse("brightness:0.5"), {2, 2}, rng);
  for (float v : b.data()) EXPECT_EQ(v, 1.0f);
}

TEST(SynthDataset, AlignedOrthogonalAnchorsGiveOrthogonalMeans) {
  auto anchors = test::axis_anchors(4, 4);
  SynthDatasetSpec spec;
  spec.classes = 4;
  spec.dim = 12;
  spec.noise = 0.0;
  spec.alignment = 1.0;
  const auto ds = synth_dataset(spec, *anchors, 9);
  std::vector<std::vector<double>> means(4, std::vector<double>(12, 0.0));
  std::vector<double> n(4, 0);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    for (std::size_t j = 0; j < 12; ++j) means[ds.train.labels[i]][j] += ds.train.inputs(i, j);
    n[ds.train.labels[i]] += 1;
  }
  for (std::size_t a = 0; a < 4; ++a) {
    for (std::size_t b = a + 1; b < 4; ++b) {
      double d = 0, na = 0, nb = 0;
      for (std::size_t j = 0; j < 12; ++j) {
        d += means[a][j] * means[b][j];
        na += means[a][j] * means[a][j];
        nb += means[b][j] * means[b][j];
      }
      EXPECT_NEAR(d / std::sqrt(na * nb), 0.0, 1e-2);
    }
  }
}

TEST(SynthDataset, MeanGeometryFollowsAnchors) {
  auto anchors = std::make_shared<const AnchorSet>(synth_anchors(4, 8, {{{0, 1}, {2, 3}}, 0.8, 0.1}, 2));
  SynthDatasetSpec spec;
  spec.classes = 4;
  spec.dim = 20;
  spec.noise = 0.0;
  const auto ds = synth_dataset(spec, *anchors, 4);
  auto first_row = [&](ClassId c) {
    for (std::size_t i = 0; i < ds.train.size(); ++i) {
      if (ds.train.labels[i] == c) return std::vector<float>(ds.train.inputs.row(i).begin(), ds.train.inputs.row(i).end());
    }
    return std::vector<float>{};
  };
  for (ClassId a = 0; a < 4; ++a) {
    for (ClassId b = a + 1; b < 4; ++b) {
      const double want = 1 - cosine_distance(anchors->vector(a), anchors->vector(b));
      const double got = 1 - cosine_distance(first_row(a), first_row(b));
      EXPECT_NEAR(got, want, 1e-5);
    }
  }
}

TEST(SynthDataset, DeterministicAndSplitArithmetic) {
  const auto a = small_synth(10, 50, 0.3, 8);
  const auto b = small_synth(10, 50, 0.3, 8);
  EXPECT_EQ(a.train.inputs, b.train.inputs);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_EQ(a.train.size(), 400u);
  EXPECT_EQ(a.test.size(), 100u);
  EXPECT_NE(small_synth(10, 50, 0.3, 9).train.inputs, a.train.inputs);
  EXPECT_EQ(a.class_names.at(3), "class_3");
}

TEST(SynthDataset, InvalidSpecs) {
  auto anchors = test::random_anchors(4, 8, 1);
  SynthDatasetSpec spec;
  spec.classes = 4;
  spec.alignment = 1.5;
  EXPECT_THROW(synth_dataset(spec, *anchors, 1), ConstructionError);
  spec.alignment = 1.0;
  spec.dim = 4;
  EXPECT_THROW(synth_dataset(spec, *anchors, 1), ConstructionError);
  spec.dim = 32;
  spec.classes = 5;
  EXPECT_THROW(synth_dataset(spec, *anchors, 1), ConstructionError);
}

TEST(Idx, MagicConstants) {
  IdxArray img{IdxType::u8, {2, 2, 2}, {0, 1, 2, 3, 4, 5, 6, 7}};
  const auto b = encode_idx(img);
  EXPECT_EQ(b[0], 0);
  EXPECT_EQ(b[1], 0);
  EXPECT_EQ(b[2], 0x08);
  EXPECT_EQ(b[3], 3);
  EXPECT_EQ(b[7], 2);  // big-endian first dim
  IdxArray lab{IdxType::u8, {2}, {0, 1}};
  const auto lb = encode_idx(lab);
  EXPECT_EQ(lb[3], 1);
  EXPECT_EQ(parse_idx(b).values, img.values);
}

TEST(Idx, TypedRoundTrip) {
  IdxArray i32{IdxType::i32, {3}, {-5, 7, 100000}};
  EXPECT_EQ(parse_idx(encode_idx(i32)).values, i32.values);
  IdxArray f32{IdxType::f32, {2, 2}, {0.5f, -1.25f, 3, 4}};
  const auto back = parse_idx(encode_idx(f32));
  EXPECT_EQ(back.values, f32.values);
  EXPECT_EQ(back.dims, f32.dims);
}

TEST(Idx, BadMagicAndTruncation) {
  auto b = encode_idx({IdxType::u8, {4}, {1, 2, 3, 4}});
  auto bad = b;
  bad[0] = 1;
  try {
    parse_idx(bad);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  b.pop_back();
  EXPECT_THROW(parse_idx(b), FormatError);
}

TEST(Idx, TwentyImageFixtureRoundTrips) {
  const auto dir = test::temp_dir("idx_rt");
  LabeledData data;
  data.inputs = Tensor({20, 16});
  Rng rng(3);
  for (auto& v : data.inputs.data()) v = static_cast<float>(rng.uniform_index(256)) / 255.0f;
  for (int i = 0; i < 20; ++i) data.labels.push_back(static_cast<ClassId>(i % 4));
  write_idx_pair((dir / "img.idx").string(), (dir / "lab.idx").string(), data, {4, 4}, IdxType::u8);
  const auto back = load_idx((dir / "img.idx").string(), (dir / "lab.idx").string());
  EXPECT_EQ(back.item_shape, (std::vector<std::size_t>{4, 4}));
  EXPECT_EQ(back.data.labels, data.labels);
  for (std::size_t i = 0; i < data.inputs.size(); ++i) EXPECT_FLOAT_EQ(back.data.inputs[i], data.inputs[i]);
}

TEST(Idx, CountMismatchIsFormatError) {
  const auto dir = test::temp_dir("idx_mismatch");
  write_idx((dir / "img.idx").string(), {IdxType::u8, {3, 2, 2}, std::vector<float>(12, 1)});
  write_idx((dir / "lab.idx").string(), {IdxType::u8, {2}, {0, 1}});
  EXPECT_THROW(load_idx((dir / "img.idx").string(), (dir / "lab.idx").string()), FormatError);
}

}  // namespace
}  // namespace cvm
