#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace tempo::metrics {

struct ClassScore {
  std::string label;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;  // gold count
};

struct F1Report {
  std::vector<ClassScore> classes;
  double macro_f1 = 0.0;
};

// Class ids index `labels`. F1 is 0 when precision + recall is 0, and every
// class enters the macro mean, including ones absent from both sequences.
F1Report f1_scores(std::span<const int> preds, std::span<const int> golds,
                   std::span<const std::string> labels);

// Mean and sample standard deviation (0 for fewer than two values).
struct Summary {
  double mean = 0.0;
  double stddev = 0.0;
};
Summary summarize(std::span<const double> values);

}  // namespace tempo::metrics
