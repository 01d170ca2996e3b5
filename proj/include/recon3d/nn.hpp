#pragma once

// Parameter registry and the handful of layers shared by every model.

#include "recon3d/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

namespace recon3d {

using Rng = std::mt19937_64;

template <class T>
Mat<T> randn(Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Mat<T> m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = static_cast<T>(dist(rng));
  return m;
}

// Owns parameters in registration order. Addresses are stable.
template <class T>
class ParamSet {
 public:
  Parameter<T>& add(std::string name, Mat<T> value, bool trainable = true) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::invalid_argument("duplicate parameter name: " + name);
    }
    params_.push_back(Parameter<T>{std::move(name), std::move(value), Mat<T>(), trainable});
    return params_.back();
  }

  Parameter<T>& normal(std::string name, Eigen::Index rows, Eigen::Index cols, double stddev, Rng& rng) {
    return add(std::move(name), randn<T>(rows, cols, stddev, rng));
  }
  Parameter<T>& zeros(std::string name, Eigen::Index rows, Eigen::Index cols) {
    return add(std::move(name), Mat<T>::Zero(rows, cols));
  }
  Parameter<T>& constant(std::string name, Eigen::Index rows, Eigen::Index cols, T v) {
    return add(std::move(name), Mat<T>::Constant(rows, cols, v));
  }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }

  // Copies values from a set with the same names and shapes, possibly of
  // another scalar type.
  template <class U>
  void assign_from(const ParamSet<U>& other) {
    for (auto& p : params_) {
      bool found = false;
      for (const auto& q : other.all()) {
        if (q.name != p.name) continue;
        if (q.value.rows() != p.value.rows() || q.value.cols() != p.value.cols()) {
          throw std::invalid_argument("assign_from: shape mismatch for " + p.name);
        }
        p.value = q.value.template cast<T>();
        found = true;
        break;
      }
      if (!found) throw std::invalid_argument("assign_from: missing parameter " + p.name);
    }
  }

 private:
  std::deque<Parameter<T>> params_;
};

template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;  // in x out
  Parameter<T>* bias = nullptr;    // 1 x out

  Linear() = default;
  Linear(ParamSet<T>& ps, const std::string& name, Eigen::Index in, Eigen::Index out, Rng& rng, double gain = 1.0,
         bool with_bias = true) {
    weight = &ps.normal(name + ".weight", in, out, gain / std::sqrt(static_cast<double>(in)), rng);
    if (with_bias) bias = &ps.zeros(name + ".bias", 1, out);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> y = matmul(x, tape.param(*weight));
    return bias != nullptr ? add_row(y, tape.param(*bias)) : y;
  }
};

template <class T>
struct LayerNorm {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  LayerNorm() = default;
  LayerNorm(ParamSet<T>& ps, const std::string& name, Eigen::Index dim) {
    gamma = &ps.constant(name + ".gamma", 1, dim, T(1));
    beta = &ps.zeros(name + ".beta", 1, dim);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    return add_row(mul_row(layernorm_rows(x), tape.param(*gamma)), tape.param(*beta));
  }
};

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamSet<T>& ps, const std::string& name, Eigen::Index dim, Eigen::Index hidden, Rng& rng) {
    fc1 = Linear<T>(ps, name + ".fc1", dim, hidden, rng);
    fc2 = Linear<T>(ps, name + ".fc2", hidden, dim, rng);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const { return fc2(tape, gelu(fc1(tape, x))); }
};

// Multi-head attention. Queries come from `xq`, keys and values from `xkv`.
template <class T>
struct Attention {
  Linear<T> q, k, v, o;
  int heads = 1;
  Eigen::Index dim = 0;

  Attention() = default;
  Attention(ParamSet<T>& ps, const std::string& name, Eigen::Index dim_q, Eigen::Index dim_kv, Eigen::Index width,
            int num_heads, Rng& rng, double out_gain = 1.0)
      : heads(num_heads), dim(width) {
    if (width % num_heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
    q = Linear<T>(ps, name + ".q", dim_q, width, rng);
    k = Linear<T>(ps, name + ".k", dim_kv, width, rng);
    v = Linear<T>(ps, name + ".v", dim_kv, width, rng);
    o = Linear<T>(ps, name + ".o", width, dim_q, rng, out_gain);
  }

  Var<T> operator()(Tape<T>& tape, Var<T> xq, Var<T> xkv, bool causal) const {
    Var<T> qq = q(tape, xq);
    Var<T> kk = k(tape, xkv);
    Var<T> vv = v(tape, xkv);
    const Eigen::Index dh = dim / heads;
    const T s = T(1) / std::sqrt(static_cast<T>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var<T> qh = heads == 1 ? qq : slice_cols(qq, h * dh, dh);
      Var<T> kh = heads == 1 ? kk : slice_cols(kk, h * dh, dh);
      Var<T> vh = heads == 1 ? vv : slice_cols(vv, h * dh, dh);
      Var<T> p = softmax_rows(scale(matmul_nt(qh, kh), s), causal);
      outs.push_back(matmul(p, vh));
    }
    Var<T> cat = heads == 1 ? outs.front() : concat_cols(outs);
    return o(tape, cat);
  }
};

// Sinusoidal embedding of a scalar (diffusion timestep), 1 x dim.
template <class T>
Mat<T> timestep_embedding(double t, Eigen::Index dim, double max_period = 10000.0) {
  Mat<T> e(1, dim);
  const Eigen::Index half = dim / 2;
  for (Eigen::Index k = 0; k < half; ++k) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(k) / static_cast<double>(half));
    e(0, k) = static_cast<T>(std::sin(t * freq));
    e(0, k + half) = static_cast<T>(std::cos(t * freq));
  }
  if (dim % 2 == 1) e(0, dim - 1) = 0;
  return e;
}

}  // namespace recon3d
