#pragma once

// Confusion matrices, per-class IoU / MIoU and top-1 accuracy.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace evd {

/// K x K counts, rows = ground truth, columns = prediction.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t ignored = 0;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k)
      : classes(k), counts(static_cast<std::size_t>(k) * static_cast<std::size_t>(k), 0) {}

  [[nodiscard]] std::uint64_t at(int gt, int pred) const {
    return counts[static_cast<std::size_t>(gt) * classes + pred];
  }
  std::uint64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * classes + pred]; }

  [[nodiscard]] std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw std::invalid_argument("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    ignored += o.ignored;
    return *this;
  }
  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  bool operator==(const ConfusionMatrix&) const = default;
};

/// Accumulates pred/gt pairs into `cm`. Pixels whose ground truth equals
/// ignore_index are counted in `ignored` only.
inline void accumulate(ConfusionMatrix& cm, std::span<const int> pred, std::span<const int> gt,
                       int ignore_index = -1) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("confusion: prediction has " + std::to_string(pred.size()) +
                                " entries, ground truth " + std::to_string(gt.size()));
  }
  const int k = cm.classes;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const int g = gt[i];
    if (g == ignore_index) {
      ++cm.ignored;
      continue;
    }
    const int p = pred[i];
    if (g < 0 || g >= k) throw std::invalid_argument("ground-truth label out of range: " + std::to_string(g));
    if (p < 0 || p >= k) throw std::invalid_argument("predicted label out of range: " + std::to_string(p));
    ++cm.at(g, p);
  }
}

inline ConfusionMatrix confusion(std::span<const int> pred, std::span<const int> gt, int classes,
                                 int ignore_index = -1) {
  if (classes < 1) throw std::invalid_argument("confusion: class count must be >= 1");
  ConfusionMatrix cm(classes);
  accumulate(cm, pred, gt, ignore_index);
  return cm;
}

enum class AbsentClassPolicy {
  exclude,     // classes with zero union are left out of the mean
  count_as_one,
};

struct IouReport {
  std::vector<double> iou;       // NaN where the union is empty
  std::vector<bool> present;     // union > 0
  double mean = 0.0;
};

/// IoU_k = TP / (TP + FP + FN).
inline IouReport miou(const ConfusionMatrix& cm,
                      AbsentClassPolicy policy = AbsentClassPolicy::exclude) {
  const int k = cm.classes;
  IouReport r;
  r.iou.assign(k, std::numeric_limits<double>::quiet_NaN());
  r.present.assign(k, false);
  double sum = 0.0;
  int n = 0;
  for (int c = 0; c < k; ++c) {
    std::uint64_t tp = cm.at(c, c);
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    for (int o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    const std::uint64_t uni = tp + fp + fn;
    if (uni == 0) {
      if (policy == AbsentClassPolicy::count_as_one) {
        sum += 1.0;
        ++n;
      }
      continue;
    }
    r.present[c] = true;
    r.iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
    sum += r.iou[c];
    ++n;
  }
  r.mean = n > 0 ? sum / n : 0.0;
  return r;
}

/// Fraction of positions where pred == gt.
inline double accuracy(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("accuracy: size mismatch");
  if (gt.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hit += pred[i] == gt[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

}  // namespace evd
