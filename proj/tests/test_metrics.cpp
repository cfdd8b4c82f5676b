#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "evd/metrics.hpp"

namespace {

// Brute-force per-class IoU from pixel sets, absent classes skipped.
double brute_miou(const std::vector<int>& pred, const std::vector<int>& gt, int k, int ignore) {
  double sum = 0;
  int n = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t inter = 0;
    std::uint64_t uni = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i] == ignore) continue;
      const bool a = pred[i] == c;
      const bool b = gt[i] == c;
      inter += a && b;
      uni += a || b;
    }
    if (uni == 0) continue;
    sum += static_cast<double>(inter) / static_cast<double>(uni);
    ++n;
  }
  return n ? sum / n : 0.0;
}

TEST(Metrics, HandCountedTwoByTwo) {
  const std::vector<int> gt{0, 0, 1, 1};
  const std::vector<int> pred{0, 1, 1, 1};
  const auto r = evd::miou(evd::confusion(pred, gt, 2));
  // class 0: TP 1, FN 1 -> 1/2; class 1: TP 2, FP 1 -> 2/3.
  EXPECT_DOUBLE_EQ(r.iou[0], 0.5);
  EXPECT_DOUBLE_EQ(r.iou[1], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.mean, 7.0 / 12.0);
}

TEST(Metrics, PerfectPredictionIsOne) {
  const std::vector<int> gt{0, 1, 2, 2, 1};
  EXPECT_DOUBLE_EQ(evd::miou(evd::confusion(gt, gt, 3)).mean, 1.0);
}

TEST(Metrics, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng() % 6);
    const std::size_t n = 1 + rng() % 300;
    std::vector<int> gt(n);
    std::vector<int> pred(n);
    for (std::size_t i = 0; i < n; ++i) {
      gt[i] = (rng() % 10 == 0) ? -1 : static_cast<int>(rng() % k);
      pred[i] = static_cast<int>(rng() % k);
    }
    const auto cm = evd::confusion(pred, gt, k, -1);
    ASSERT_EQ(evd::miou(cm).mean, brute_miou(pred, gt, k, -1)) << "trial " << trial;
    std::uint64_t ignored = 0;
    for (int g : gt) ignored += g == -1;
    EXPECT_EQ(cm.ignored, ignored);
    EXPECT_EQ(cm.total() + ignored, n);
  }
}

TEST(Metrics, ConfusionIsAdditiveOverSplits) {
  std::mt19937_64 rng(6);
  std::vector<int> gt(500);
  std::vector<int> pred(500);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = static_cast<int>(rng() % 4);
    pred[i] = static_cast<int>(rng() % 4);
  }
  const auto whole = evd::confusion(pred, gt, 4);
  const std::span<const int> p(pred), g(gt);
  const auto a = evd::confusion(p.first(137), g.first(137), 4);
  const auto b = evd::confusion(p.subspan(137), g.subspan(137), 4);
  EXPECT_EQ(whole, a + b);
}

TEST(Metrics, PermutingClassIdsKeepsMean) {
  std::mt19937_64 rng(8);
  std::vector<int> gt(400);
  std::vector<int> pred(400);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt[i] = static_cast<int>(rng() % 3);
    pred[i] = static_cast<int>(rng() % 3);
  }
  const int perm[3] = {2, 0, 1};
  std::vector<int> gt2(gt.size());
  std::vector<int> pred2(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) {
    gt2[i] = perm[gt[i]];
    pred2[i] = perm[pred[i]];
  }
  const auto a = evd::miou(evd::confusion(pred, gt, 3));
  const auto b = evd::miou(evd::confusion(pred2, gt2, 3));
  EXPECT_NEAR(a.mean, b.mean, 1e-15);
  for (int c = 0; c < 3; ++c) EXPECT_DOUBLE_EQ(a.iou[c], b.iou[perm[c]]);
}

TEST(Metrics, AbsentClassPolicies) {
  const std::vector<int> gt{0, 0, 1};
  const std::vector<int> pred{0, 0, 1};
  const auto cm = evd::confusion(pred, gt, 3);
  const auto ex = evd::miou(cm, evd::AbsentClassPolicy::exclude);
  EXPECT_TRUE(std::isnan(ex.iou[2]));
  EXPECT_FALSE(ex.present[2]);
  EXPECT_DOUBLE_EQ(ex.mean, 1.0);
  EXPECT_DOUBLE_EQ(evd::miou(cm, evd::AbsentClassPolicy::count_as_one).mean, 1.0);
  const std::vector<int> wrong{1, 1, 1};
  EXPECT_DOUBLE_EQ(evd::miou(evd::confusion(wrong, gt, 3), evd::AbsentClassPolicy::count_as_one).mean,
                   (0.0 + 1.0 / 3.0 + 1.0) / 3.0);
}

TEST(Metrics, RejectsOutOfRangeLabels) {
  const std::vector<int> gt{0, 3};
  const std::vector<int> pred{0, 1};
  EXPECT_THROW(evd::confusion(pred, gt, 3), std::invalid_argument);
  const std::vector<int> short_pred{0};
  EXPECT_THROW(evd::confusion(short_pred, pred, 3), std::invalid_argument);
}

TEST(Metrics, AccuracyCountsMatches) {
  const std::vector<int> gt{0, 1, 2, 3};
  const std::vector<int> pred{0, 1, 0, 0};
  EXPECT_DOUBLE_EQ(evd::accuracy(pred, gt), 0.5);
}

}  // namespace
