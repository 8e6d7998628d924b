#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dport/lm.hpp"

namespace dport::testing {

struct GradMismatch {
  std::string tensor;
  double rel_error = 0.0;
};

// Central differences over every entry of every tensor; returns tensors whose
// relative L2 error exceeds `tol`.
template <typename Model>
std::vector<GradMismatch> check_gradient(Model& model, const std::vector<ConstParamRef>& analytic,
                                         const std::function<double(const Model&)>& loss, double tol,
                                         double h = 1e-5) {
  std::vector<GradMismatch> bad;
  auto params = model.tensors();
  for (std::size_t k = 0; k < params.size(); ++k) {
    double diff = 0.0, norm_a = 0.0, norm_n = 0.0;
    for (std::size_t i = 0; i < params[k].values.size(); ++i) {
      double& x = params[k].values[i];
      const double saved = x;
      x = saved + h;
      const double up = loss(model);
      x = saved - h;
      const double down = loss(model);
      x = saved;
      const double num = (up - down) / (2 * h);
      const double ana = analytic[k].values[i];
      diff += (num - ana) * (num - ana);
      norm_a += ana * ana;
      norm_n += num * num;
    }
    const double denom = std::max(std::sqrt(norm_a) + std::sqrt(norm_n), 1e-10);
    const double rel = std::sqrt(diff) / denom;
    if (rel > tol) bad.push_back({params[k].name, rel});
  }
  return bad;
}

inline LMConfig tiny_lm_config(std::size_t vocab = 12) {
  LMConfig c;
  c.vocab_size = vocab;
  c.embed_dim = 4;
  c.hidden_dim = 5;
  c.n_layers = 2;
  c.bptt_len = 4;
  c.batch_size = 2;
  c.dropconnect_p = 0.0;
  c.variational_input_p = 0.0;
  c.variational_hidden_p = 0.0;
  c.embedding_dropout_p = 0.0;
  c.init_range = 0.5;
  c.seed = 11;
  return c;
}

}  // namespace dport::testing
