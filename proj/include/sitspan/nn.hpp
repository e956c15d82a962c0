#pragma once

#include <functional>
#include <string>

#include "sitspan/ops.hpp"

namespace sitspan::nn {

// Named access to a model's parameters and buffers (running statistics).
// Layers implement visit(prefix, v); optimizers and checkpoints consume it.
template <typename T>
struct Visitor {
  std::function<void(const std::string&, ag::Var<T>&)> param;
  std::function<void(const std::string&, Tensor<T>&)> buffer;
};

template <typename T>
struct Linear {
  ag::Var<T> w, b;

  void init(int64_t in, int64_t out, Rng& rng, bool bias = true);
  ag::Var<T> forward(const ag::Var<T>& x) const { return ag::linear(x, w, b); }
  void visit(const std::string& p, Visitor<T>& v) {
    v.param(p + ".w", w);
    if (b.defined()) v.param(p + ".b", b);
  }
};

template <typename T>
struct Conv2d {
  ag::Var<T> w, b;  // w: [Cout,Cin,k,k]
  int stride = 1, pad = 0;

  void init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng,
            bool bias = true);
  ag::Var<T> forward(const ag::Var<T>& x) const {
    return ag::conv2d(x, w, b, stride, pad);
  }
  void visit(const std::string& p, Visitor<T>& v) {
    v.param(p + ".w", w);
    if (b.defined()) v.param(p + ".b", b);
  }
};

template <typename T>
struct ConvTranspose2d {
  ag::Var<T> w, b;  // w: [Cin,Cout,k,k]
  int stride = 1, pad = 0;

  void init(int64_t cin, int64_t cout, int k, int stride, int pad, Rng& rng,
            bool bias = true);
  ag::Var<T> forward(const ag::Var<T>& x) const {
    return ag::conv_transpose2d(x, w, b, stride, pad);
  }
  void visit(const std::string& p, Visitor<T>& v) {
    v.param(p + ".w", w);
    if (b.defined()) v.param(p + ".b", b);
  }
};

enum class NormKind { group, batch, instance };

// 2d feature-map normalization with per-channel affine. Batch mode keeps
// running statistics for evaluation; frame_mask (when given in training)
// restricts batch statistics to real frames so padded frames cannot leak
// into them.
template <typename T>
struct Norm2d {
  NormKind kind = NormKind::group;
  int groups = 4;
  ag::Var<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);

  void init(NormKind kind, int64_t channels, int groups);
  ag::Var<T> forward(const ag::Var<T>& x, bool training,
                     const Tensor<T>* frame_mask = nullptr);
  void visit(const std::string& p, Visitor<T>& v) {
    v.param(p + ".gamma", gamma);
    v.param(p + ".beta", beta);
    if (kind == NormKind::batch) {
      v.buffer(p + ".running_mean", running_mean);
      v.buffer(p + ".running_var", running_var);
    }
  }
};

// Adam with decoupled scheduling (lr set per step by the caller).
template <typename T>
struct Adam {
  T lr = T(1e-3);
  T beta1 = T(0.9), beta2 = T(0.999), eps = T(1e-8);
  int64_t t = 0;
  std::vector<ag::Var<T>> params;
  std::vector<std::string> names;
  std::vector<Tensor<T>> m, v;

  void add_param(const std::string& name, ag::Var<T>& p) {
    names.push_back(name);
    params.push_back(p);
    m.push_back(Tensor<T>::zeros(p.val().shape()));
    v.push_back(Tensor<T>::zeros(p.val().shape()));
  }

  void zero_grad() {
    for (auto& p : params) p.zero_grad();
  }

  void step();
};

template <typename T>
int64_t param_count(const std::vector<ag::Var<T>>& params) {
  int64_t n = 0;
  for (auto& p : params) n += p.val().numel();
  return n;
}

// Collects (name, var) pairs from any model exposing visit().
template <typename T, typename Model>
std::vector<std::pair<std::string, ag::Var<T>>> named_params(Model& model,
                                                             const std::string& prefix) {
  std::vector<std::pair<std::string, ag::Var<T>>> out;
  Visitor<T> v;
  v.param = [&](const std::string& n, ag::Var<T>& p) { out.emplace_back(n, p); };
  v.buffer = [](const std::string&, Tensor<T>&) {};
  model.visit(prefix, v);
  return out;
}

template <typename T, typename Model>
std::vector<std::pair<std::string, Tensor<T>*>> named_buffers(Model& model,
                                                              const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor<T>*>> out;
  Visitor<T> v;
  v.param = [](const std::string&, ag::Var<T>&) {};
  v.buffer = [&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); };
  model.visit(prefix, v);
  return out;
}

// Sinusoidal positional encoding of day offsets (base period in days).
template <typename T>
Tensor<T> sinusoid_position_encoding(const Tensor<int64_t>& days, int64_t dim,
                                     double period);

}  // namespace sitspan::nn
