#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "cvm/error.hpp"
#include "cvm/metrics.hpp"
#include "test_util.hpp"

namespace cvm {
namespace {

TEST(AvgAccuracy, Examples) {
  EXPECT_DOUBLE_EQ(avg_accuracy(AccuracyMatrix::from_rows({{0.9, 0.0}, {0.5, 0.7}})), 0.6);
  EXPECT_DOUBLE_EQ(avg_accuracy(AccuracyMatrix::from_rows({{1, 1}, {1, 1}})), 1.0);
  const auto m = AccuracyMatrix::from_rows({{0.9, 0.1, 0.0}, {0.5, 0.8, 0.2}, {0.2, 0.4, 0.9}});
  EXPECT_NEAR(avg_accuracy(m), 0.5, 1e-15);
}

TEST(AvgAccuracy, IncompleteRowIsStateError) {
  AccuracyMatrix m(2);
  m.set(2, 1, 0.5);
  EXPECT_THROW(avg_accuracy(m), StateError);
}

TEST(Forgetting, Examples) {
  EXPECT_NEAR(forgetting(AccuracyMatrix::from_rows({{0.9, 0.0}, {0.6, 0.8}})), 0.3, 1e-15);
  EXPECT_EQ(forgetting(AccuracyMatrix::from_rows({{0.7, 0.0, 0.0}, {0.7, 0.6, 0.0}, {0.7, 0.6, 0.9}})), 0.0);
  EXPECT_LT(forgetting(AccuracyMatrix::from_rows({{0.5, 0.0}, {0.8, 0.9}})), 0.0);
  EXPECT_THROW(forgetting(AccuracyMatrix::from_rows({{0.5}})), StateError);
}

TEST(Forgetting, InvariantUnderTaskRelabelling) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 2 + rng.uniform_index(4);
    std::vector<std::vector<double>> rows(t, std::vector<double>(t));
    for (auto& r : rows) {
      for (auto& v : r) v = rng.uniform01();
    }
    std::vector<std::size_t> perm(t - 1);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    rng.shuffle(perm.begin(), perm.end());
    // permute the first T-1 tasks, keeping diagonal/final-row correspondence
    auto p = rows;
    for (std::size_t i = 0; i + 1 < t; ++i) {
      p[perm[i]][perm[i]] = rows[i][i];
      p[t - 1][perm[i]] = rows[t - 1][i];
    }
    const auto a = AccuracyMatrix::from_rows(rows), b = AccuracyMatrix::from_rows(p);
    EXPECT_NEAR(forgetting(a), forgetting(b), 1e-12);
    EXPECT_NEAR(avg_accuracy(a), avg_accuracy(b), 1e-12);
  }
}

TEST(AccuracyMatrix, RangeAndCsv) {
  AccuracyMatrix m(2);
  EXPECT_THROW(m.set(1, 1, 1.5), RangeError);
  EXPECT_THROW(m.set(3, 1, 0.5), RangeError);
  m.set(1, 1, 0.25);
  EXPECT_EQ(m.to_csv(), "after_task,task_1,task_2\n1,0.25,\n2,,\n");
  EXPECT_THROW(m.at(2, 2), StateError);
}

TEST(FwScore, Examples) {
  const double a[] = {0.2, 0.3, 0.4};
  EXPECT_NEAR(fw_score(a, 4), 0.3, 1e-15);
  const double b[] = {0.5};
  EXPECT_EQ(fw_score(b, 2), 0.5);
  EXPECT_THROW(fw_score(b, 3), StateError);
}

LabeledData two_clusters(std::size_t n, std::uint64_t seed, ClassId a = 0, ClassId b = 1) {
  Rng rng(seed);
  LabeledData d;
  d.inputs = Tensor({2 * n, 4});
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const bool second = i >= n;
    d.labels.push_back(second ? b : a);
    for (std::size_t j = 0; j < 4; ++j) {
      d.inputs(i, j) = static_cast<float>((j == 0 ? (second ? 2.0 : -2.0) : 0.0) + 0.3 * rng.normal());
    }
  }
  return d;
}

FeatureNet identity4() {
  std::vector<float> w(16, 0.0f);
  for (std::size_t i = 0; i < 4; ++i) w[i * 4 + i] = 1.0f;
  return FeatureNet({{LayerKind::affine, 4, 4, w, std::vector<float>(4, 0.0f)}});
}

TEST(LinearProbe, SeparableClustersUnderIdentity) {
  const double acc = linear_probe(identity4(), two_clusters(100, 1), two_clusters(50, 2), {100, 0.05, 32, 3});
  EXPECT_GE(acc, 0.95);
}

TEST(LinearProbe, ConstantNetIsChance) {
  FeatureNet constant({{LayerKind::affine, 4, 4, std::vector<float>(16, 0.0f), {1, 2, 3, 4}}});
  // four classes, unbalanced enough that a constant predictor lands near 1/K
  LabeledData train, test;
  for (ClassId c = 0; c < 4; ++c) {
    auto d = two_clusters(50, 10 + c, c, c);
    train.inputs = concat_rows(train.inputs, d.inputs);
    train.labels.insert(train.labels.end(), d.labels.begin(), d.labels.end());
    auto e = two_clusters(50, 20 + c, c, c);
    test.inputs = concat_rows(test.inputs, e.inputs);
    test.labels.insert(test.labels.end(), e.labels.begin(), e.labels.end());
  }
  const double acc = linear_probe(constant, train, test, {50, 0.05, 32, 1});
  const double sigma = std::sqrt(0.25 * 0.75 / 400);
  EXPECT_NEAR(acc, 0.25, 5 * sigma);
}

TEST(LinearProbe, DoesNotMutateNetAndIsSeeded) {
  auto net = test::random_net(4, {6}, 3, LayerKind::relu, true, 2);
  const auto before = net;
  const auto tr = two_clusters(40, 1), te = two_clusters(20, 2);
  const double a = linear_probe(net, tr, te, {20, 0.05, 32, 9});
  EXPECT_EQ(net, before);
  EXPECT_EQ(a, linear_probe(net, tr, te, {20, 0.05, 32, 9}));
  EXPECT_THROW(linear_probe(net, LabeledData{}, te, {}), StateError);
}

TEST(ZeroShot, IdentityNetOnAlignedData) {
  const auto anchors = test::axis_anchors(6, 6);
  Rng rng(4);
  LabeledData test;
  test.inputs = Tensor({400, 6});
  const std::vector<ClassId> unseen{2, 3, 4, 5};
  for (std::size_t i = 0; i < 400; ++i) {
    const ClassId c = unseen[i % 4];
    test.labels.push_back(c);
    for (std::size_t j = 0; j < 6; ++j) test.inputs(i, j) = static_cast<float>((j == c ? 1.0 : 0.0) + 0.2 * rng.normal());
  }
  std::vector<float> w(36, 0.0f);
  for (std::size_t i = 0; i < 6; ++i) w[i * 6 + i] = 1.0f;
  FeatureNet ident({{LayerKind::affine, 6, 6, w, std::vector<float>(6, 0.0f)}, {LayerKind::l2norm, 6, 6, {}, {}}});
  const std::vector<ClassId> seen{0, 1};
  const auto r = zero_shot_eval(ident, anchors, unseen, test, seen);
  EXPECT_EQ(r.chance, 0.25);
  EXPECT_GE(r.accuracy, r.chance + 0.15);
  EXPECT_EQ(r.samples, 400u);
  // pure function
  EXPECT_EQ(zero_shot_eval(ident, anchors, unseen, test, seen).accuracy, r.accuracy);
}

TEST(ZeroShot, UninformativeNetIsNearChance) {
  const auto anchors = test::random_anchors(8, 8, 3);
  const std::vector<ClassId> unseen{4, 5, 6, 7};
  Rng rng(5);
  LabeledData test;
  test.inputs = test::random_tensor(2000, 5, 6);
  for (std::size_t i = 0; i < 2000; ++i) test.labels.push_back(unseen[rng.uniform_index(4)]);
  // labels are independent of the inputs, so any net is at chance
  const auto net = test::random_net(5, {8}, 8, LayerKind::relu, true, 7);
  const auto r = zero_shot_eval(net, anchors, unseen, test);
  EXPECT_NEAR(r.accuracy, 0.25, 5 * std::sqrt(0.25 * 0.75 / 2000));
}

TEST(ZeroShot, Errors) {
  const auto anchors = test::axis_anchors(4, 4);
  const auto net = test::random_net(4, {}, 4, LayerKind::relu, true, 1);
  LabeledData test;
  test.inputs = test::random_tensor(3, 4, 1);
  test.labels = {2, 3, 2};
  EXPECT_THROW(zero_shot_eval(net, anchors, {}, test), StateError);
  const std::vector<ClassId> unseen{2, 3};
  const std::vector<ClassId> seen{2};
  EXPECT_THROW(zero_shot_eval(net, anchors, unseen, test, seen), StateError);
}

}  // namespace
}  // namespace cvm
