#include "dudotrans/train/adam.hpp"

#include <cmath>
#include <stdexcept>

#include "dudotrans/common/json_util.hpp"

namespace dudotrans::train {

void AdamState::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw std::invalid_argument("adam: lr must be finite and >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("adam: betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("adam: eps must be positive");
}

void AdamState::reset(const nn::ParamList& params) {
  t = 0;
  m.clear();
  v.clear();
  for (const nn::NamedParam& p : params) {
    m.emplace_back(p.tensor.numel(), Real(0));
    v.emplace_back(p.tensor.numel(), Real(0));
  }
}

void to_json(nlohmann::json& j, const AdamState& s) {
  j = nlohmann::json{{"lr", s.lr}, {"beta1", s.beta1}, {"beta2", s.beta2}, {"eps", s.eps}, {"t", s.t}};
}

void from_json(const nlohmann::json& j, AdamState& s) {
  check_keys(j, {"lr", "beta1", "beta2", "eps", "t"}, "adam");
  AdamState out;
  out.lr = j.value("lr", out.lr);
  out.beta1 = j.value("beta1", out.beta1);
  out.beta2 = j.value("beta2", out.beta2);
  out.eps = j.value("eps", out.eps);
  out.t = j.value("t", out.t);
  out.validate();
  s = std::move(out);
}

void adam_step(const nn::ParamList& params, AdamState& state) {
  state.validate();
  if (state.m.empty() && state.v.empty() && state.t == 0) state.reset(params);
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state holds " + std::to_string(state.m.size()) +
                                " tensors but there are " + std::to_string(params.size()) + " parameters");
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Tensor theta = params[k].tensor;
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != theta.numel() || v.size() != theta.numel()) {
      throw std::invalid_argument("adam_step: moment size mismatch for " + params[k].name);
    }
    const auto g = theta.grad();
    auto data = theta.data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      const double mi = state.beta1 * m[i] + (1.0 - state.beta1) * gi;
      const double vi = state.beta2 * v[i] + (1.0 - state.beta2) * gi * gi;
      m[i] = static_cast<Real>(mi);
      v[i] = static_cast<Real>(vi);
      const double step = state.lr * (mi / c1) / (std::sqrt(vi / c2) + state.eps);
      data[i] = static_cast<Real>(static_cast<double>(data[i]) - step);
    }
  }
}

void zero_grads(const nn::ParamList& params) {
  for (const nn::NamedParam& p : params) {
    nn::Tensor t = p.tensor;
    t.zero_grad();
  }
}

}  // namespace dudotrans::train
