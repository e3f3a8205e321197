#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protsi/error.hpp"

namespace protsi {

// Two aligned label sequences over the same class set.
struct RaterPair {
  std::vector<int> truth;
  std::vector<int> predicted;
  int num_classes = 0;

  void validate() const;
};

using CountMatrix = std::vector<std::vector<std::int64_t>>;

double accuracy(const RaterPair& pair);

struct QwkResult {
  double value = 0.0;
  // Set when both raters are constant: the quadratic-weight denominator is
  // zero (equal constants, value 1.0) or the statistic is vacuous (different
  // constants, value 0.0).
  bool degenerate = false;
};

// Quadratic weighted kappa with weights (i-j)^2/(num_classes-1)^2 and the
// expected matrix as the outer product of the marginals scaled to n.
QwkResult qwk(const RaterPair& pair);

CountMatrix confusion_matrix(const RaterPair& pair);

struct ScoreDistribution {
  std::vector<std::int64_t> truth_histogram;
  std::vector<std::int64_t> predicted_histogram;
};

ScoreDistribution score_distribution(const RaterPair& pair);

struct MetricsBundle {
  double accuracy = 0.0;
  double qwk = 0.0;
  bool qwk_degenerate = false;
  CountMatrix confusion;
  ScoreDistribution distribution;
  std::int64_t count = 0;
};

MetricsBundle compute_metrics(const RaterPair& pair);

// Deterministic JSON document {accuracy, qwk, confusion_matrix, ...}.
std::string metrics_to_json(const MetricsBundle& m);

}  // namespace protsi
