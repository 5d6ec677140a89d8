#pragma once

// Central finite-difference oracle for autodiff checks. Kept independent of
// the library's backward pass: it only calls forward evaluations.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "duet/tensor.hpp"

namespace gradcheck {

struct Report {
  double max_rel_err = 0.0;
  std::string worst;  // "param[idx]: analytic=... numeric=..."
  int64_t checked = 0;
};

inline double rel_err(double analytic, double numeric, double floor) {
  const double denom =
      std::max(std::max(std::abs(analytic), std::abs(numeric)), floor);
  return std::abs(analytic - numeric) / denom;
}

// Perturbs every element of every listed leaf tensor by +/-h and compares
// the resulting central difference of `loss_fn` against the accumulated
// analytic grad. `loss_fn` must be a pure function of the leaves' data.
inline Report check(const std::vector<std::pair<std::string, duet::Tensor>>& leaves,
                    const std::function<double()>& loss_fn,
                    const std::function<duet::Tensor()>& loss_graph_fn,
                    double h = 1e-5, double floor = 1e-6) {
  // Analytic pass.
  for (auto& [name, t] : leaves) {
    (void)name;
    const_cast<duet::Tensor&>(t).zero_grad();
  }
  duet::Tensor loss = loss_graph_fn();
  duet::backward(loss);

  Report rep;
  for (auto& [name, t] : leaves) {
    auto& tt = const_cast<duet::Tensor&>(t);
    auto& data = tt.data();
    const std::vector<double>* grad = tt.has_grad() ? &tt.grad() : nullptr;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      double fp, fm;
      {
        duet::NoGradGuard ng;
        data[i] = saved + h;
        fp = loss_fn();
        data[i] = saved - h;
        fm = loss_fn();
        data[i] = saved;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = grad ? (*grad)[i] : 0.0;
      const double e = rel_err(analytic, numeric, floor);
      ++rep.checked;
      if (e > rep.max_rel_err) {
        rep.max_rel_err = e;
        rep.worst = name + "[" + std::to_string(i) +
                    "]: analytic=" + std::to_string(analytic) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  return rep;
}

}  // namespace gradcheck
