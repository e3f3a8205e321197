#include "protsi/finite_diff.hpp"

#include <cmath>
#include <cstring>

namespace protsi {

namespace {

double evaluate(const LossBuilder& loss_fn, const ParameterSet& params) {
  Tape tape(/*recording=*/false);
  Var out = loss_fn(tape, params);
  return tape.value(out).scalar_value();
}

}  // namespace

GradCheckReport finite_difference_check(const LossBuilder& loss_fn, const ParameterSet& params,
                                        double step, double rel_tolerance,
                                        const std::string& corrupt_group) {
  if (step <= 0.0) throw UsageError("finite_difference_check: step must be positive");

  const double probe1 = evaluate(loss_fn, params);
  const double probe2 = evaluate(loss_fn, params);
  if (std::memcmp(&probe1, &probe2, sizeof(double)) != 0)
    throw UsageError("finite_difference_check: loss function is not deterministic");

  GradientMap reverse;
  {
    Tape tape;
    Var out = loss_fn(tape, params);
    reverse = tape.gradients(out);
  }

  ParameterSet work;
  for (const Parameter& p : params.items()) work.add(p.id, p.tensor, p.trainable);

  GradCheckReport report;
  report.rel_tolerance = rel_tolerance;
  for (Parameter& p : work.items()) {
    if (!p.trainable) continue;
    Tensor& grad = reverse.at(p.id);
    if (!grad.same_shape(p.tensor))
      throw UsageError("finite_difference_check: gradient shape " + grad.shape_str() +
                       " != parameter shape " + p.tensor.shape_str() + " for '" + p.id + "'");
    if (!corrupt_group.empty() && p.id.rfind(corrupt_group, 0) == 0) grad.arr() += 0.5;

    GradCheckEntry entry{p.id, 0.0};
    for (Eigen::Index i = 0; i < p.tensor.size(); ++i) {
      const double saved = p.tensor[i];
      p.tensor[i] = saved + step;
      const double up = evaluate(loss_fn, work);
      p.tensor[i] = saved - step;
      const double down = evaluate(loss_fn, work);
      p.tensor[i] = saved;
      const double central = (up - down) / (2.0 * step);
      const double denom = std::max(std::max(std::abs(grad[i]), std::abs(central)), 1e-8);
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(grad[i] - central) / denom);
    }
    if (entry.max_rel_error >= report.max_rel_error) {
      if (entry.max_rel_error > report.max_rel_error || report.worst_param.empty()) {
        report.max_rel_error = entry.max_rel_error;
        report.worst_param = entry.param_id;
      }
    }
    report.per_parameter.push_back(std::move(entry));
  }
  report.pass = report.max_rel_error <= rel_tolerance;
  return report;
}

}  // namespace protsi
