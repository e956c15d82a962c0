#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"
#include "sitspan/nn.hpp"

using namespace sitspan;

TEST_CASE("layer init shapes and bounds") {
  Rng rng(1);
  nn::Linear<float> lin;
  lin.init(8, 4, rng);
  CHECK(lin.w.val().shape() == Shape({4, 8}));
  CHECK(lin.b.val().shape() == Shape({4}));
  double bound = 1.0 / std::sqrt(8.0);
  for (int64_t i = 0; i < lin.w.val().numel(); ++i)
    CHECK(std::abs(lin.w.val()[i]) <= bound);

  nn::Conv2d<float> conv;
  conv.init(3, 6, 3, 1, 1, rng);
  CHECK(conv.w.val().shape() == Shape({6, 3, 3, 3}));

  nn::ConvTranspose2d<float> up;
  up.init(6, 3, 4, 2, 1, rng);
  CHECK(up.w.val().shape() == Shape({6, 3, 4, 4}));
}

TEST_CASE("Norm2d batch mode keeps running statistics for eval") {
  Rng rng(2);
  nn::Norm2d<float> bn;
  bn.init(nn::NormKind::batch, 3, 1);
  Tensor<float> xv{Shape{4, 3, 2, 2}};
  for (int64_t i = 0; i < xv.numel(); ++i) xv[i] = float(rng.normal(2.0, 1.5));
  auto x = ag::Var<float>::constant(xv);
  for (int step = 0; step < 300; ++step) bn.forward(x, true);
  // after many identical batches the running stats converge to batch stats
  double mean0 = 0;
  for (int64_t n = 0; n < 4; ++n)
    for (int64_t k = 0; k < 4; ++k) mean0 += xv.at(n, 0, k / 2, k % 2);
  mean0 /= 16.0;
  CHECK(double(bn.running_mean[0]) == doctest::Approx(mean0).epsilon(1e-3));

  auto y = bn.forward(x, false);  // eval path uses running stats
  CHECK(y.val().numel() == xv.numel());
}

TEST_CASE("adam converges on a quadratic") {
  nn::Adam<float> opt;
  opt.lr = 0.1f;
  auto p = ag::Var<float>::leaf(Tensor<float>::from({2}, {5.f, -3.f}));
  opt.add_param("p", p);
  for (int it = 0; it < 300; ++it) {
    opt.zero_grad();
    auto loss = ag::sum(ag::mul(p, p));
    loss.backward();
    opt.step();
  }
  CHECK(std::abs(p.val()[0]) < 1e-2);
  CHECK(std::abs(p.val()[1]) < 1e-2);
}

TEST_CASE("sinusoidal day encoding") {
  Tensor<int64_t> days = Tensor<int64_t>::from({2}, {0, 100});
  Tensor<double> pe = nn::sinusoid_position_encoding<double>(days, 6, 1000.0);
  CHECK(pe.shape() == Shape({2, 6}));
  // day 0: sin terms 0, cos terms 1
  CHECK(pe.at(0, 0) == doctest::Approx(0.0));
  CHECK(pe.at(0, 1) == doctest::Approx(1.0));
  // day 100, dim 0: sin(100)
  CHECK(pe.at(1, 0) == doctest::Approx(std::sin(100.0)));
  // higher dims use longer periods
  CHECK(pe.at(1, 4) == doctest::Approx(std::sin(100.0 / std::pow(1000.0, 4.0 / 6.0))));
}

TEST_CASE("deterministic rng streams") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng f1 = a.fork(7), f2 = b.fork(7);
  CHECK(f1.next_u64() == f2.next_u64());
  Rng r(3);
  double acc = 0;
  for (int i = 0; i < 4000; ++i) acc += r.poisson(4.0);
  CHECK(acc / 4000.0 == doctest::Approx(4.0).epsilon(0.05));
}
