#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dtm/schema.hpp"
#include "dtm/tensor.hpp"

namespace dtm {

struct Keypoint {
  double x = 0.0;
  double y = 0.0;
  bool visible = false;
};

/// 17 joints in input-image pixel coordinates, COCO ordering.
struct KeypointSet {
  std::array<Keypoint, kNumJoints> joints;

  bool operator==(const KeypointSet& o) const {
    for (int i = 0; i < kNumJoints; ++i) {
      const auto& a = joints[static_cast<std::size_t>(i)];
      const auto& b = o.joints[static_cast<std::size_t>(i)];
      if (a.visible != b.visible) return false;
      if (a.visible && (a.x != b.x || a.y != b.y)) return false;
    }
    return true;
  }
};

/// Binary label matrix, one row per sample, one column per attribute.
struct LabelMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> values;  // row-major, rows * cols

  static LabelMatrix make(int rows, int cols) {
    return {rows, cols, std::vector<std::uint8_t>(static_cast<std::size_t>(rows) * cols, 0)};
  }

  std::uint8_t at(int i, int j) const { return values[static_cast<std::size_t>(i) * cols + j]; }
  std::uint8_t& at(int i, int j) { return values[static_cast<std::size_t>(i) * cols + j]; }
};

inline constexpr double kRatioClampLo = 1e-4;
inline constexpr double kRatioClampHi = 1.0 - 1e-4;

/// Loss configuration: combined-objective weights, the cross-entropy tuning
/// parameter, and the per-attribute positive ratios (clamped away from 0/1).
template <typename T>
struct LossWeights {
  T alpha = T(1);
  T beta = T(1);
  T lambda = T(1);
  std::vector<T> positive_ratios;
};

/// Per-attribute fraction of positive samples, clamped to [1e-4, 1 - 1e-4].
template <typename T>
std::vector<T> positive_ratios(const LabelMatrix& labels) {
  if (labels.rows == 0) throw NumericError("positive_ratios: empty label set");
  std::vector<T> p(static_cast<std::size_t>(labels.cols));
  for (int j = 0; j < labels.cols; ++j) {
    long count = 0;
    for (int i = 0; i < labels.rows; ++i) count += labels.at(i, j) ? 1 : 0;
    double r = static_cast<double>(count) / labels.rows;
    r = std::clamp(r, kRatioClampLo, kRatioClampHi);
    p[static_cast<std::size_t>(j)] = static_cast<T>(r);
  }
  return p;
}

/// Imbalance weight for one (label, attribute) pair:
///   exp((1 - p_j) / lambda^2) for positives, exp(p_j / lambda^2) for negatives.
template <typename T>
T wce_weight(bool positive, T p_j, T lambda) {
  const T l2 = lambda * lambda;
  return positive ? std::exp((T(1) - p_j) / l2) : std::exp(p_j / l2);
}

/// Sigmoid weighted cross-entropy over pre-sigmoid logits:
///   L = -(1/N) sum_ij w_j [ y log sig(z) + (1-y) log(1 - sig(z)) ]
/// evaluated in softplus form, so it stays finite for any logit magnitude.
template <typename T>
TensorPtr<T> wce_loss(const TensorPtr<T>& logits, const LabelMatrix& labels, const LossWeights<T>& weights) {
  if (logits->rank() != 2)
    throw ShapeError("wce_loss: logits must be rank 2, got " + detail::shape_str(logits->shape));
  const int N = logits->dim(0), J = logits->dim(1);
  if (labels.rows != N || labels.cols != J)
    throw ShapeError("wce_loss: labels are " + std::to_string(labels.rows) + "x" + std::to_string(labels.cols) +
                     " but logits are " + std::to_string(N) + "x" + std::to_string(J));
  if (static_cast<int>(weights.positive_ratios.size()) != J)
    throw ShapeError("wce_loss: " + std::to_string(weights.positive_ratios.size()) + " positive ratios for " +
                     std::to_string(J) + " attributes");
  if (!(weights.lambda > T(0))) throw NumericError("wce_loss: lambda must be positive");
  if (!all_finite(logits->data)) throw NumericError("wce_loss: non-finite logits");

  auto out = detail::make_op_output<T>({1}, {logits});
  T total = T(0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < J; ++j) {
      const T z = logits->data[static_cast<std::size_t>(i) * J + j];
      const bool y = labels.at(i, j) != 0;
      const T w = wce_weight(y, weights.positive_ratios[static_cast<std::size_t>(j)], weights.lambda);
      // -[y log sig(z) + (1-y) log(1-sig(z))] = y softplus(-z) + (1-y) softplus(z)
      total += w * (y ? softplus(-z) : softplus(z));
    }
  out->data[0] = total / static_cast<T>(N);

  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    auto lab = labels;
    auto w = weights;
    out->backward_fn = [o, logits, lab, w, N, J]() {
      const T g = o->grad[0] / static_cast<T>(N);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < J; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * J + j;
          const bool y = lab.at(i, j) != 0;
          const T wj = wce_weight(y, w.positive_ratios[static_cast<std::size_t>(j)], w.lambda);
          logits->grad[idx] += g * wj * (stable_sigmoid(logits->data[idx]) - (y ? T(1) : T(0)));
        }
    };
  }
  return out;
}

/// Heatmap cell of an image-space keypoint under down stride r: (floor(x/r), floor(y/r)).
inline std::pair<int, int> map_keypoint(double x, double y, int r) {
  return {static_cast<int>(std::floor(x / r)), static_cast<int>(std::floor(y / r))};
}

/// Flat heatmap cell indices per local attribute for one sample: assigned
/// visible joints mapped by the down stride, deduplicated, sorted. Joints
/// mapping outside the heatmap are dropped.
inline std::vector<std::vector<int>> awk_targets(const AttributeSchema& schema, const KeypointSet& keypoints,
                                                 int r, int heatmap_h, int heatmap_w) {
  std::vector<std::vector<int>> targets;
  for (const auto& attr : schema.attributes) {
    if (attr.is_global) continue;
    std::vector<int> cells;
    for (int k : attr.keypoint_ids) {
      const auto& joint = keypoints.joints[static_cast<std::size_t>(k)];
      if (!joint.visible) continue;
      const auto [col, row] = map_keypoint(joint.x, joint.y, r);
      if (col < 0 || col >= heatmap_w || row < 0 || row >= heatmap_h) continue;
      cells.push_back(row * heatmap_w + col);
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    targets.push_back(std::move(cells));
  }
  return targets;
}

/// AWK heatmap loss over pre-sigmoid local-attribute heatmaps (N, J_l, H, W).
/// Positive samples average log sig over their target cells only; negatives
/// average log(1 - sig) over the whole heatmap. Positives with no target
/// cells contribute nothing.
template <typename T>
TensorPtr<T> awk_loss(const TensorPtr<T>& heatmaps, const LabelMatrix& local_labels,
                      const std::vector<std::vector<std::vector<int>>>& targets) {
  if (heatmaps->rank() != 4)
    throw ShapeError("awk_loss: heatmaps must be rank 4, got " + detail::shape_str(heatmaps->shape));
  const int N = heatmaps->dim(0), Jl = heatmaps->dim(1);
  const int S = heatmaps->dim(2) * heatmaps->dim(3);
  if (local_labels.rows != N || local_labels.cols != Jl)
    throw ShapeError("awk_loss: labels are " + std::to_string(local_labels.rows) + "x" +
                     std::to_string(local_labels.cols) + " but heatmaps are for " + std::to_string(N) + "x" +
                     std::to_string(Jl) + " (sample, attribute) pairs");
  if (static_cast<int>(targets.size()) != N)
    throw ShapeError("awk_loss: targets given for " + std::to_string(targets.size()) + " samples, expected " +
                     std::to_string(N));
  for (int i = 0; i < N; ++i)
    if (static_cast<int>(targets[static_cast<std::size_t>(i)].size()) != Jl)
      throw ShapeError("awk_loss: sample " + std::to_string(i) + " has targets for " +
                       std::to_string(targets[static_cast<std::size_t>(i)].size()) + " attributes, expected " +
                       std::to_string(Jl));

  auto out = detail::make_op_output<T>({1}, {heatmaps});
  T total = T(0);
  for (int i = 0; i < N; ++i)
    for (int j = 0; j < Jl; ++j) {
      const T* h = heatmaps->data.data() + (static_cast<std::size_t>(i) * Jl + j) * S;
      if (local_labels.at(i, j)) {
        const auto& cells = targets[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (cells.empty()) continue;
        T acc = T(0);
        for (int s : cells) acc += softplus(-h[s]);  // -log sig
        total += acc / static_cast<T>(cells.size());
      } else {
        T acc = T(0);
        for (int s = 0; s < S; ++s) acc += softplus(h[s]);  // -log(1 - sig)
        total += acc / static_cast<T>(S);
      }
    }
  out->data[0] = total / static_cast<T>(N);

  if (out->requires_grad) {
    TensorT<T>* o = out.get();
    auto lab = local_labels;
    auto tgt = targets;
    out->backward_fn = [o, heatmaps, lab, tgt, N, Jl, S]() {
      const T g = o->grad[0] / static_cast<T>(N);
      for (int i = 0; i < N; ++i)
        for (int j = 0; j < Jl; ++j) {
          const std::size_t base = (static_cast<std::size_t>(i) * Jl + j) * S;
          if (lab.at(i, j)) {
            const auto& cells = tgt[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            if (cells.empty()) continue;
            const T scale = g / static_cast<T>(cells.size());
            for (int s : cells)
              heatmaps->grad[base + s] += scale * (stable_sigmoid(heatmaps->data[base + s]) - T(1));
          } else {
            const T scale = g / static_cast<T>(S);
            for (int s = 0; s < S; ++s)
              heatmaps->grad[base + s] += scale * stable_sigmoid(heatmaps->data[base + s]);
          }
        }
    };
  }
  return out;
}

/// Combined objective: alpha * L_awk + beta * L_wce.
template <typename T>
TensorPtr<T> total_loss(const TensorPtr<T>& l_awk, const TensorPtr<T>& l_wce, T alpha, T beta) {
  if (alpha < T(0) || beta < T(0)) throw NumericError("total_loss: weights must be non-negative");
  return add(scale(l_awk, alpha), scale(l_wce, beta));
}

}  // namespace dtm
