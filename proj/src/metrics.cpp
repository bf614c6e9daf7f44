#include "tempo/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace tempo::metrics {

F1Report f1_scores(std::span<const int> preds, std::span<const int> golds,
                   std::span<const std::string> labels) {
  if (preds.size() != golds.size()) {
    throw std::invalid_argument("f1_scores: " + std::to_string(preds.size()) + " predictions for " +
                                std::to_string(golds.size()) + " gold labels");
  }
  if (labels.empty()) throw std::invalid_argument("f1_scores: empty label set");
  const std::size_t c = labels.size();
  std::vector<std::size_t> tp(c, 0), pred_n(c, 0), gold_n(c, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int p = preds[i], g = golds[i];
    if (p < 0 || static_cast<std::size_t>(p) >= c || g < 0 || static_cast<std::size_t>(g) >= c) {
      throw std::invalid_argument("f1_scores: label id out of range at index " + std::to_string(i));
    }
    ++pred_n[p];
    ++gold_n[g];
    if (p == g) ++tp[p];
  }
  F1Report r;
  double total = 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    ClassScore s;
    s.label = labels[k];
    s.support = gold_n[k];
    s.precision = pred_n[k] ? static_cast<double>(tp[k]) / static_cast<double>(pred_n[k]) : 0.0;
    s.recall = gold_n[k] ? static_cast<double>(tp[k]) / static_cast<double>(gold_n[k]) : 0.0;
    const double pr = s.precision + s.recall;
    s.f1 = pr > 0.0 ? 2.0 * s.precision * s.recall / pr : 0.0;
    total += s.f1;
    r.classes.push_back(std::move(s));
  }
  r.macro_f1 = total / static_cast<double>(c);
  return r;
}

Summary summarize(std::span<const double> values) {
  Summary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace tempo::metrics
