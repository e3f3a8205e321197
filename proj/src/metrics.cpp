#include "protsi/metrics.hpp"

#include <algorithm>

#include <json.hpp>

namespace protsi {

void RaterPair::validate() const {
  if (truth.empty() || truth.size() != predicted.size())
    throw UsageError("RaterPair: truth/predicted must be equal non-empty lengths");
  if (num_classes < 1) throw UsageError("RaterPair: num_classes must be >= 1");
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
      throw UsageError("RaterPair: label out of [0," + std::to_string(num_classes) + ") at index " +
                       std::to_string(i));
  }
}

double accuracy(const RaterPair& pair) {
  pair.validate();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pair.truth.size(); ++i)
    if (pair.truth[i] == pair.predicted[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pair.truth.size());
}

CountMatrix confusion_matrix(const RaterPair& pair) {
  pair.validate();
  CountMatrix m(static_cast<std::size_t>(pair.num_classes),
                std::vector<std::int64_t>(static_cast<std::size_t>(pair.num_classes), 0));
  for (std::size_t i = 0; i < pair.truth.size(); ++i)
    ++m[static_cast<std::size_t>(pair.truth[i])][static_cast<std::size_t>(pair.predicted[i])];
  return m;
}

QwkResult qwk(const RaterPair& pair) {
  pair.validate();
  const bool truth_constant =
      std::all_of(pair.truth.begin(), pair.truth.end(), [&](int v) { return v == pair.truth[0]; });
  const bool pred_constant = std::all_of(pair.predicted.begin(), pair.predicted.end(),
                                         [&](int v) { return v == pair.predicted[0]; });
  if (truth_constant && pred_constant)
    return QwkResult{pair.truth[0] == pair.predicted[0] ? 1.0 : 0.0, true};

  const int c = pair.num_classes;
  const double n = static_cast<double>(pair.truth.size());
  const double norm = c > 1 ? static_cast<double>((c - 1) * (c - 1)) : 1.0;
  CountMatrix observed = confusion_matrix(pair);
  std::vector<double> truth_marginal(static_cast<std::size_t>(c), 0.0);
  std::vector<double> pred_marginal(static_cast<std::size_t>(c), 0.0);
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      const double o = static_cast<double>(observed[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
      truth_marginal[static_cast<std::size_t>(i)] += o;
      pred_marginal[static_cast<std::size_t>(j)] += o;
    }

  double weighted_observed = 0.0;
  double weighted_expected = 0.0;
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j) {
      const double w = static_cast<double>((i - j) * (i - j)) / norm;
      weighted_observed += w * static_cast<double>(observed[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
      weighted_expected +=
          w * truth_marginal[static_cast<std::size_t>(i)] * pred_marginal[static_cast<std::size_t>(j)] / n;
    }
  return QwkResult{1.0 - weighted_observed / weighted_expected, false};
}

ScoreDistribution score_distribution(const RaterPair& pair) {
  pair.validate();
  ScoreDistribution d;
  d.truth_histogram.assign(static_cast<std::size_t>(pair.num_classes), 0);
  d.predicted_histogram.assign(static_cast<std::size_t>(pair.num_classes), 0);
  for (std::size_t i = 0; i < pair.truth.size(); ++i) {
    ++d.truth_histogram[static_cast<std::size_t>(pair.truth[i])];
    ++d.predicted_histogram[static_cast<std::size_t>(pair.predicted[i])];
  }
  return d;
}

MetricsBundle compute_metrics(const RaterPair& pair) {
  MetricsBundle m;
  m.accuracy = accuracy(pair);
  QwkResult k = qwk(pair);
  m.qwk = k.value;
  m.qwk_degenerate = k.degenerate;
  m.confusion = confusion_matrix(pair);
  m.distribution = score_distribution(pair);
  m.count = static_cast<std::int64_t>(pair.truth.size());
  return m;
}

std::string metrics_to_json(const MetricsBundle& m) {
  nlohmann::ordered_json j;
  j["accuracy"] = m.accuracy;
  j["qwk"] = m.qwk;
  j["count"] = m.count;
  j["confusion_matrix"] = m.confusion;
  j["truth_histogram"] = m.distribution.truth_histogram;
  j["predicted_histogram"] = m.distribution.predicted_histogram;
  j["degenerate_flags"] = nlohmann::ordered_json{{"qwk", m.qwk_degenerate}};
  return j.dump(2) + "\n";
}

}  // namespace protsi
