#include "milscene/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace milscene {

double grad_check(const ScalarFn& fn, const std::vector<TensorPtr>& inputs, double step) {
  TensorPtr root = fn(inputs);
  if (!std::isfinite(scalar_value(root)))
    throw std::runtime_error("grad_check: function value is not finite");
  backward(root);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (const auto& in : inputs) {
    if (!in->requires_grad) {
      analytic.emplace_back();
      continue;
    }
    in->ensure_grad();
    analytic.push_back(in->grad);
    in->grad.clear();
  }

  double worst = 0.0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    if (!inputs[t]->requires_grad) continue;
    auto& x = inputs[t]->data;
    for (size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      double fp, fm;
      {
        GradPause off;
        x[i] = saved + step;
        fp = scalar_value(fn(inputs));
        x[i] = saved - step;
        fm = scalar_value(fn(inputs));
        x[i] = saved;
      }
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite value during finite differencing");
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = analytic[t][i];
      const double rel = std::fabs(a - numeric) /
                         (std::max(std::fabs(a), std::fabs(numeric)) + 1e-8);
      if (rel > worst) worst = rel;
    }
  }
  return worst;
}

}  // namespace milscene
