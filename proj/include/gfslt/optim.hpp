#pragma once

// AdamW with decoupled weight decay and global gradient-norm clipping.
// Works over a fixed list of Params; non-trainable buffers are skipped.

#include <cmath>
#include <vector>

#include "gfslt/ad.hpp"
#include "gfslt/errors.hpp"

namespace gfslt {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.001;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

class AdamW {
 public:
  AdamW() = default;
  AdamW(std::vector<ad::Param*> params, const AdamWConfig& cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (ad::Param* p : params_) {
      m_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
      v_.push_back(ad::Mat::Zero(p->value.rows(), p->value.cols()));
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long steps() const { return t_; }
  const std::vector<ad::Param*>& params() const { return params_; }

  double grad_norm() const {
    double sq = 0.0;
    for (ad::Param* p : params_)
      if (p->trainable) sq += p->grad.squaredNorm();
    return std::sqrt(sq);
  }

  // One update over the accumulated gradients; zeroes them afterwards.
  void step() {
    t_++;
    double scale = 1.0;
    if (cfg_.clip_norm > 0.0) {
      double norm = grad_norm();
      if (!std::isfinite(norm))
        throw DivergenceError("optimizer: non-finite gradient norm");
      if (norm > cfg_.clip_norm) scale = cfg_.clip_norm / norm;
    }
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
      ad::Param* p = params_[i];
      if (!p->trainable) {
        p->zero_grad();
        continue;
      }
      ad::Mat g = p->grad * scale;
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] +
              (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      ad::Mat mhat = m_[i] / bc1;
      ad::Mat vhat = v_[i] / bc2;
      p->value -= cfg_.lr * (mhat.array() / (vhat.array().sqrt() + cfg_.eps))
                      .matrix();
      if (cfg_.weight_decay > 0.0)
        p->value -= cfg_.lr * cfg_.weight_decay * p->value;
      p->zero_grad();
    }
  }

  // Flat state access for checkpointing (m then v per parameter, in the
  // registration order).
  std::vector<ad::Mat>& first_moments() { return m_; }
  std::vector<ad::Mat>& second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

 private:
  std::vector<ad::Param*> params_;
  AdamWConfig cfg_;
  std::vector<ad::Mat> m_, v_;
  long t_ = 0;
};

}  // namespace gfslt
