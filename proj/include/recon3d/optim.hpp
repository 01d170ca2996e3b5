#pragma once

#include "recon3d/nn.hpp"

#include <cmath>
#include <unordered_map>

namespace recon3d {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip = 1.0;  // global norm; <= 0 disables
};

// Decoupled weight decay; decay is skipped for row vectors (biases, norms,
// single tokens) as usual.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opts = {}) : opts_(opts) {}

  // Returns the pre-clip global gradient norm.
  double step(ParamSet<T>& params, double lr) {
    ++t_;
    double sq = 0;
    for (auto& p : params.all()) {
      if (p.trainable && p.grad.size() != 0) sq += static_cast<double>(p.grad.squaredNorm());
    }
    const double norm = std::sqrt(sq);
    const double clip = (opts_.grad_clip > 0 && norm > opts_.grad_clip) ? opts_.grad_clip / norm : 1.0;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (auto& p : params.all()) {
      if (!p.trainable || p.grad.size() == 0) continue;
      auto& st = state_[&p];
      if (st.m.size() == 0) {
        st.m = Mat<T>::Zero(p.value.rows(), p.value.cols());
        st.v = Mat<T>::Zero(p.value.rows(), p.value.cols());
      }
      const T b1 = static_cast<T>(opts_.beta1);
      const T b2 = static_cast<T>(opts_.beta2);
      Mat<T> g = p.grad * static_cast<T>(clip);
      st.m = b1 * st.m + (T(1) - b1) * g;
      st.v = b2 * st.v + (T(1) - b2) * g.cwiseProduct(g);
      if (opts_.weight_decay > 0 && p.value.rows() > 1) p.value *= static_cast<T>(1.0 - lr * opts_.weight_decay);
      const T step = static_cast<T>(lr / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      p.value.array() -= step * st.m.array() / (st.v.array().sqrt() * denom_scale + static_cast<T>(opts_.eps));
    }
    return norm;
  }

  long steps() const { return t_; }

 private:
  struct State {
    Mat<T> m, v;
  };
  AdamWOptions opts_;
  long t_ = 0;
  std::unordered_map<const Parameter<T>*, State> state_;
};

// Linear warmup to `peak`, then cosine decay to `floor_ratio * peak`.
inline double warmup_cosine_lr(long step, long total_steps, long warmup_steps, double peak, double floor_ratio = 0.1) {
  if (total_steps <= 0) return peak;
  if (warmup_steps > 0 && step < warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double span = std::max<long>(1, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(M_PI * progress));
  return peak * (floor_ratio + (1.0 - floor_ratio) * cosine);
}

}  // namespace recon3d
