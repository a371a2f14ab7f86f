#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cktgen/nn.hpp"

namespace cktgen {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Moments are kept per parameter in the
// order of the ParamList given at construction.
class AdamW {
 public:
  AdamW(nn::ParamList params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, v] : params_) {
      m_.push_back(Matrix::Zero(v.rows(), v.cols()));
      v_.push_back(Matrix::Zero(v.rows(), v.cols()));
    }
  }

  void zero_grad() {
    for (auto& [name, v] : params_) v.zero_grad();
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Var& p = params_[k].second;
      const Matrix g = p.grad();
      m_[k] = cfg_.beta1 * m_[k] + (1.0 - cfg_.beta1) * g;
      v_[k] = cfg_.beta2 * v_[k] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      Matrix& w = p.mutable_value();
      w *= 1.0 - cfg_.lr * cfg_.weight_decay;
      w.array() -= cfg_.lr * (m_[k].array() / bc1) / ((v_[k].array() / bc2).sqrt() + cfg_.eps);
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  AdamWConfig& config() { return cfg_; }
  const nn::ParamList& params() const { return params_; }
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  const std::vector<Matrix>& first_moments() const { return m_; }
  const std::vector<Matrix>& second_moments() const { return v_; }

 private:
  nn::ParamList params_;
  AdamWConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

}  // namespace cktgen
