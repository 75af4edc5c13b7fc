#include "barl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "barl/rng.hpp"

namespace barl {

namespace {

Real eval_scalar(const ScalarBuilder& build, const std::vector<Tensor>& inputs) {
  ad::Tape t(/*grad_enabled=*/false);
  std::vector<ad::Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& x : inputs) vars.push_back(t.constant(x));
  return build(t, vars).item();
}

}  // namespace

GradCheckReport check_gradients(const ScalarBuilder& build, std::vector<Tensor> inputs,
                                const GradCheckOptions& opt) {
  // Analytic gradients.
  std::vector<Tensor> analytic;
  {
    ad::Tape t;
    std::vector<ad::Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& x : inputs) vars.push_back(t.leaf(x));
    ad::Var loss = build(t, vars);
    t.backward(loss);
    for (ad::Var v : vars) {
      const Tensor& g = v.grad();
      analytic.push_back(g.size() ? g : Tensor::zeros(v.value().shape()));
    }
  }

  GradCheckReport report;
  Rng pick(opt.pick_seed ^ 0x5bd1e995u);
  for (size_t i = 0; i < inputs.size(); ++i) {
    std::vector<Index> coords;
    const Index n = inputs[i].size();
    if (opt.max_coords < 0 || n <= opt.max_coords) {
      coords.resize(static_cast<size_t>(n));
      for (Index j = 0; j < n; ++j) coords[static_cast<size_t>(j)] = j;
    } else {
      for (int j = 0; j < opt.max_coords; ++j) coords.push_back(pick.unif_int(0, n - 1));
    }
    for (Index j : coords) {
      const Real keep = inputs[i][j];
      inputs[i][j] = keep + opt.h;
      const Real fp = eval_scalar(build, inputs);
      inputs[i][j] = keep - opt.h;
      const Real fm = eval_scalar(build, inputs);
      inputs[i][j] = keep;
      const Real numeric = (fp - fm) / (2.0 * opt.h);
      const Real rel = std::fabs(analytic[i][j] - numeric) / std::max(1.0, std::fabs(numeric));
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
    }
  }
  return report;
}

}  // namespace barl
