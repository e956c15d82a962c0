#include "sitspan/nn.hpp"

#include <cmath>

namespace sitspan::nn {

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  Tensor<T> t{std::move(shape)};
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = T(rng.uniform(-bound, bound));
  return t;
}

}  // namespace

template <typename T>
void Linear<T>::init(int64_t in, int64_t out, Rng& rng, bool bias) {
  double bound = 1.0 / std::sqrt(double(in));
  w = ag::Var<T>::leaf(uniform_tensor<T>({out, in}, bound, rng));
  if (bias) b = ag::Var<T>::leaf(uniform_tensor<T>({out}, bound, rng));
}

template <typename T>
void Conv2d<T>::init(int64_t cin, int64_t cout, int k, int stride_, int pad_,
                     Rng& rng, bool bias) {
  stride = stride_;
  pad = pad_;
  double bound = 1.0 / std::sqrt(double(cin) * k * k);
  w = ag::Var<T>::leaf(uniform_tensor<T>({cout, cin, k, k}, bound, rng));
  if (bias) b = ag::Var<T>::leaf(uniform_tensor<T>({cout}, bound, rng));
}

template <typename T>
void ConvTranspose2d<T>::init(int64_t cin, int64_t cout, int k, int stride_,
                              int pad_, Rng& rng, bool bias) {
  stride = stride_;
  pad = pad_;
  double bound = 1.0 / std::sqrt(double(cout) * k * k);
  w = ag::Var<T>::leaf(uniform_tensor<T>({cin, cout, k, k}, bound, rng));
  if (bias) b = ag::Var<T>::leaf(uniform_tensor<T>({cout}, bound, rng));
}

template <typename T>
void Norm2d<T>::init(NormKind kind_, int64_t channels, int groups_) {
  kind = kind_;
  groups = groups_;
  gamma = ag::Var<T>::leaf(Tensor<T>::full({channels}, T(1)));
  beta = ag::Var<T>::leaf(Tensor<T>::zeros({channels}));
  if (kind == NormKind::batch) {
    running_mean = Tensor<T>::zeros({channels});
    running_var = Tensor<T>::full({channels}, T(1));
  }
}

template <typename T>
ag::Var<T> Norm2d<T>::forward(const ag::Var<T>& x, bool training,
                              const Tensor<T>* frame_mask) {
  switch (kind) {
    case NormKind::group:
      return ag::group_norm(x, groups, gamma, beta, eps);
    case NormKind::instance:
      return ag::instance_norm(x, gamma, beta, eps);
    case NormKind::batch: {
      if (!training)
        return ag::batch_norm_eval(x, gamma, beta, running_mean, running_var, eps);
      Tensor<T> bm, bv;
      ag::Var<T> y = ag::batch_norm_train(x, gamma, beta, eps, &bm, &bv, frame_mask);
      // unbiased variance for the running estimate
      int64_t n = x.val().numel() / x.val().dim(1);
      if (frame_mask) {
        int64_t rows = 0;
        for (int64_t i = 0; i < frame_mask->numel(); ++i)
          if ((*frame_mask)[i] != T(0)) ++rows;
        n = rows * (x.val().numel() / (x.val().dim(0) * x.val().dim(1)));
      }
      T corr = n > 1 ? T(n) / T(n - 1) : T(1);
      for (int64_t c = 0; c < running_mean.numel(); ++c) {
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * bm[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * bv[c] * corr;
      }
      return y;
    }
  }
  fail(ErrorCode::Internal, "bad norm kind");
}

template <typename T>
void Adam<T>::step() {
  ++t;
  double b1t = 1.0 - std::pow(double(beta1), double(t));
  double b2t = 1.0 - std::pow(double(beta2), double(t));
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.has_grad()) continue;
    const T* g = p.grad().data();
    T* w = p.val().data();
    T* mi = m[i].data();
    T* vi = v[i].data();
    int64_t n = p.val().numel();
    for (int64_t k = 0; k < n; ++k) {
      mi[k] = beta1 * mi[k] + (T(1) - beta1) * g[k];
      vi[k] = beta2 * vi[k] + (T(1) - beta2) * g[k] * g[k];
      T mhat = mi[k] / T(b1t);
      T vhat = vi[k] / T(b2t);
      w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <typename T>
Tensor<T> sinusoid_position_encoding(const Tensor<int64_t>& days, int64_t dim,
                                     double period) {
  Shape shape = days.shape();
  shape.push_back(dim);
  Tensor<T> pe{shape};
  for (int64_t i = 0; i < days.numel(); ++i) {
    T* row = pe.data() + i * dim;
    double d = double(days[i]);
    for (int64_t k = 0; k < dim; ++k) {
      double freq = std::pow(period, double(2 * (k / 2)) / double(dim));
      double a = d / freq;
      row[k] = T((k % 2 == 0) ? std::sin(a) : std::cos(a));
    }
  }
  return pe;
}

#define SITSPAN_INSTANTIATE_NN(T)                                         \
  template struct Linear<T>;                                              \
  template struct Conv2d<T>;                                              \
  template struct ConvTranspose2d<T>;                                     \
  template struct Norm2d<T>;                                              \
  template struct Adam<T>;                                                \
  template Tensor<T> sinusoid_position_encoding<T>(const Tensor<int64_t>&, \
                                                   int64_t, double);

SITSPAN_INSTANTIATE_NN(float)
SITSPAN_INSTANTIATE_NN(double)

#undef SITSPAN_INSTANTIATE_NN

}  // namespace sitspan::nn
