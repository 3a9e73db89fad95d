#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "dtm/errors.hpp"
#include "dtm/supervision.hpp"

namespace dtm {

/// Label-based and instance-based evaluation results.
///
/// Conventions (the benchmark protocols leave these to code):
///  - A sample with empty ground-truth and empty prediction sets counts
///    accuracy = precision = recall = 1; if exactly one side is empty the
///    affected ratio is 0.
///  - An attribute with no positives (or no negatives) in the split uses the
///    defined rate alone for its mA and is flagged one_sided.
///  - F1 is computed from mean precision and mean recall, not per-sample.
struct MetricsReport {
  double mA = 0.0;
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::vector<double> per_attribute_mA;
  double threshold = 0.5;

  struct AttrCounts {
    long tp = 0, tn = 0, fp = 0, fn = 0;
    bool one_sided = false;
  };
  std::vector<AttrCounts> counts;
};

/// prediction = 1 iff probability >= threshold.
inline LabelMatrix binarize(const std::vector<double>& probabilities, int rows, int cols, double threshold = 0.5) {
  if (static_cast<std::size_t>(rows) * cols != probabilities.size())
    throw ShapeError("binarize: " + std::to_string(probabilities.size()) + " probabilities for " +
                     std::to_string(rows) + "x" + std::to_string(cols));
  LabelMatrix out = LabelMatrix::make(rows, cols);
  for (std::size_t i = 0; i < probabilities.size(); ++i) out.values[i] = probabilities[i] >= threshold ? 1 : 0;
  return out;
}

/// Mean accuracy: per attribute, the average of the positive-example and
/// negative-example accuracies, then the mean over attributes.
inline std::pair<double, std::vector<double>> label_based_mA(const LabelMatrix& preds, const LabelMatrix& labels) {
  if (preds.rows != labels.rows || preds.cols != labels.cols)
    throw ShapeError("label_based_mA: predictions are " + std::to_string(preds.rows) + "x" +
                     std::to_string(preds.cols) + " but labels are " + std::to_string(labels.rows) + "x" +
                     std::to_string(labels.cols));
  if (preds.rows == 0 || preds.cols == 0) throw NumericError("label_based_mA: empty prediction set");
  std::vector<double> per_attr(static_cast<std::size_t>(preds.cols), 0.0);
  for (int j = 0; j < preds.cols; ++j) {
    long tp = 0, tn = 0, pos = 0, neg = 0;
    for (int i = 0; i < preds.rows; ++i) {
      if (labels.at(i, j)) {
        ++pos;
        tp += preds.at(i, j) ? 1 : 0;
      } else {
        ++neg;
        tn += preds.at(i, j) ? 0 : 1;
      }
    }
    double v;
    if (pos > 0 && neg > 0)
      v = 0.5 * (static_cast<double>(tp) / pos + static_cast<double>(tn) / neg);
    else if (pos > 0)
      v = static_cast<double>(tp) / pos;
    else
      v = static_cast<double>(tn) / neg;
    per_attr[static_cast<std::size_t>(j)] = v;
  }
  double mA = 0.0;
  for (double v : per_attr) mA += v;
  mA /= preds.cols;
  return {mA, per_attr};
}

struct InstanceMetrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};

/// Example-based accuracy (Jaccard), precision, recall over predicted vs
/// ground-truth attribute sets, averaged over samples; F1 from the means.
inline InstanceMetrics instance_metrics(const LabelMatrix& preds, const LabelMatrix& labels) {
  if (preds.rows != labels.rows || preds.cols != labels.cols)
    throw ShapeError("instance_metrics: predictions are " + std::to_string(preds.rows) + "x" +
                     std::to_string(preds.cols) + " but labels are " + std::to_string(labels.rows) + "x" +
                     std::to_string(labels.cols));
  InstanceMetrics m;
  if (preds.rows == 0) return m;
  double acc = 0.0, prec = 0.0, rec = 0.0;
  for (int i = 0; i < preds.rows; ++i) {
    long inter = 0, uni = 0, np = 0, ny = 0;
    for (int j = 0; j < preds.cols; ++j) {
      const bool p = preds.at(i, j) != 0;
      const bool y = labels.at(i, j) != 0;
      inter += (p && y) ? 1 : 0;
      uni += (p || y) ? 1 : 0;
      np += p ? 1 : 0;
      ny += y ? 1 : 0;
    }
    acc += uni > 0 ? static_cast<double>(inter) / uni : 1.0;
    prec += np > 0 ? static_cast<double>(inter) / np : (ny == 0 ? 1.0 : 0.0);
    rec += ny > 0 ? static_cast<double>(inter) / ny : (np == 0 ? 1.0 : 0.0);
  }
  m.accuracy = acc / preds.rows;
  m.precision = prec / preds.rows;
  m.recall = rec / preds.rows;
  m.f1 = (m.precision + m.recall) > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

inline MetricsReport compute_metrics(const LabelMatrix& preds, const LabelMatrix& labels, double threshold) {
  MetricsReport report;
  report.threshold = threshold;
  auto [mA, per_attr] = label_based_mA(preds, labels);
  report.mA = mA;
  report.per_attribute_mA = std::move(per_attr);
  const auto inst = instance_metrics(preds, labels);
  report.accuracy = inst.accuracy;
  report.precision = inst.precision;
  report.recall = inst.recall;
  report.f1 = inst.f1;
  report.counts.resize(static_cast<std::size_t>(preds.cols));
  for (int j = 0; j < preds.cols; ++j) {
    auto& c = report.counts[static_cast<std::size_t>(j)];
    for (int i = 0; i < preds.rows; ++i) {
      const bool p = preds.at(i, j) != 0;
      const bool y = labels.at(i, j) != 0;
      c.tp += (p && y) ? 1 : 0;
      c.tn += (!p && !y) ? 1 : 0;
      c.fp += (p && !y) ? 1 : 0;
      c.fn += (!p && y) ? 1 : 0;
    }
    c.one_sided = (c.tp + c.fn == 0) || (c.tn + c.fp == 0);
  }
  return report;
}

inline void write_report(const MetricsReport& report, std::ostream& os) {
  os.precision(12);
  os << "mA: " << report.mA << "\n"
     << "accuracy: " << report.accuracy << "\n"
     << "precision: " << report.precision << "\n"
     << "recall: " << report.recall << "\n"
     << "f1: " << report.f1 << "\n"
     << "threshold: " << report.threshold << "\n";
}

/// Per-attribute CSV: name, mA, counts, one-sided flag.
inline void write_attribute_table(const MetricsReport& report, const AttributeSchema& schema, std::ostream& os) {
  os.precision(12);
  os << "attribute,mA,tp,tn,fp,fn,one_sided\n";
  for (std::size_t j = 0; j < report.per_attribute_mA.size(); ++j) {
    const auto& c = report.counts[j];
    os << schema.attributes[j].name << "," << report.per_attribute_mA[j] << "," << c.tp << "," << c.tn << ","
       << c.fp << "," << c.fn << "," << (c.one_sided ? 1 : 0) << "\n";
  }
}

}  // namespace dtm
