#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck.hpp"

using namespace sitspan;
using namespace sitspan::ag;
using VarD = Var<double>;

namespace {

VarD leafD(Tensor<double> t) { return VarD::leaf(std::move(t)); }

}  // namespace

TEST_CASE("tensor basics") {
  Tensor<float> t = Tensor<float>::zeros({2, 3});
  CHECK(t.numel() == 6);
  t.at(1, 2) = 5.f;
  CHECK(t[5] == 5.f);
  Tensor<float> r = t.reshaped({3, -1});
  CHECK(r.shape() == Shape({3, 2}));
  r[0] = 7.f;
  CHECK(t[0] == 7.f);  // shared storage
  Tensor<float> c = t.clone();
  c[0] = 9.f;
  CHECK(t[0] == 7.f);
}

TEST_CASE("elementwise ops and gradients") {
  Rng rng(7);
  VarD a = leafD(randn_tensor({3, 4}, rng));
  VarD b = leafD(randn_tensor({3, 4}, rng, 0.5));

  double err = max_grad_rel_error({a, b}, [&] {
    VarD y = add(mul(a, b), sub(a, divide(b, adds(abs_(a), 1.0))));
    y = add(y, muls(sigmoid(a), 2.0));
    y = add(y, softplus(b));
    y = add(y, exp_(muls(a, 0.3)));
    y = add(y, log_(adds(abs_(b), 1.0)));
    return sum(mul(y, y));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("relu and clamp subgradients away from kinks") {
  Rng rng(3);
  Tensor<double> av = randn_tensor({50}, rng);
  for (int64_t i = 0; i < av.numel(); ++i)
    if (std::abs(av[i]) < 1e-3) av[i] = 0.1;  // keep away from the kink
  VarD a = leafD(av);
  double err = max_grad_rel_error(
      {a}, [&] { return sum(add(relu(a), clamp(a, -0.5, 0.5))); }, 1e-7);
  CHECK(err < 1e-4);
}

TEST_CASE("reductions") {
  Rng rng(11);
  VarD a = leafD(randn_tensor({4, 5}, rng));
  CHECK(mean(a).val()[0] == doctest::Approx(sum(a).val()[0] / 20.0));
  double err = max_grad_rel_error({a}, [&] { return mean(mul(a, a)); });
  CHECK(err < 1e-7);
}

TEST_CASE("reshape/permute/concat/take_row/crop_map") {
  Rng rng(13);
  VarD a = leafD(randn_tensor({2, 3, 4}, rng));
  VarD b = leafD(randn_tensor({2, 1, 4}, rng));

  // permute forward correctness
  VarD p = permute(a, {2, 0, 1});
  CHECK(p.val().shape() == Shape({4, 2, 3}));
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t j = 0; j < 3; ++j)
      for (int64_t k = 0; k < 4; ++k)
        CHECK(p.val().at(k, i, j) == a.val().at(i, j, k));

  double err = max_grad_rel_error({a, b}, [&] {
    VarD c = concat<double>({a, b}, 1);  // [2,4,4]
    c = permute(c, {1, 0, 2});           // [4,2,4]
    c = reshape(c, {8, 4});
    VarD row = take_row(c, 3);
    VarD cm = crop_map(reshape(c, {2, 4, 4}), 1, 1, 2, 0, 3);
    return add(sum(mul(row, row)), sum(mul(cm, cm)));
  });
  CHECK(err < 1e-7);
}

TEST_CASE("linear matches manual matmul and gradients") {
  Rng rng(17);
  VarD x = leafD(randn_tensor({5, 3}, rng));
  VarD w = leafD(randn_tensor({4, 3}, rng));
  VarD b = leafD(randn_tensor({4}, rng));
  VarD y = linear(x, w, b);
  for (int64_t i = 0; i < 5; ++i)
    for (int64_t o = 0; o < 4; ++o) {
      double acc = b.val()[o];
      for (int64_t k = 0; k < 3; ++k) acc += x.val().at(i, k) * w.val().at(o, k);
      CHECK(y.val().at(i, o) == doctest::Approx(acc));
    }
  double err = max_grad_rel_error({x, w, b}, [&] {
    return sum(mul(linear(x, w, b), linear(x, w, b)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d against naive loop") {
  Rng rng(19);
  VarD x = leafD(randn_tensor({2, 3, 5, 6}, rng));
  VarD w = leafD(randn_tensor({4, 3, 3, 3}, rng));
  VarD b = leafD(randn_tensor({4}, rng));

  for (int stride : {1, 2}) {
    VarD y = conv2d(x, w, b, stride, 1);
    int64_t ho = (5 + 2 - 3) / stride + 1, wo = (6 + 2 - 3) / stride + 1;
    REQUIRE(y.val().shape() == Shape({2, 4, ho, wo}));
    for (int64_t n = 0; n < 2; ++n)
      for (int64_t co = 0; co < 4; ++co)
        for (int64_t oi = 0; oi < ho; ++oi)
          for (int64_t oj = 0; oj < wo; ++oj) {
            double acc = b.val()[co];
            for (int64_t ci = 0; ci < 3; ++ci)
              for (int64_t ki = 0; ki < 3; ++ki)
                for (int64_t kj = 0; kj < 3; ++kj) {
                  int64_t ii = oi * stride - 1 + ki, jj = oj * stride - 1 + kj;
                  if (ii < 0 || ii >= 5 || jj < 0 || jj >= 6) continue;
                  acc += x.val().at(n, ci, ii, jj) * w.val().at(co, ci, ki, kj);
                }
            CHECK(y.val().at(n, co, oi, oj) == doctest::Approx(acc));
          }
  }
  double err = max_grad_rel_error(
      {x, w, b}, [&] { return sum(mul(conv2d(x, w, b, 2, 1), conv2d(x, w, b, 2, 1))); });
  CHECK(err < 1e-6);
}

TEST_CASE("conv_transpose2d inverts conv geometry and gradients") {
  Rng rng(23);
  VarD x = leafD(randn_tensor({2, 3, 4, 5}, rng));
  VarD w = leafD(randn_tensor({3, 2, 4, 4}, rng));
  VarD b = leafD(randn_tensor({2}, rng));
  VarD y = conv_transpose2d(x, w, b, 2, 1);
  REQUIRE(y.val().shape() == Shape({2, 2, 8, 10}));

  // adjoint identity: <conv(u), v> == <u, conv_transpose(v)> with shared w
  Rng rng2(29);
  Tensor<double> uv = randn_tensor({2, 2, 8, 10}, rng2);
  VarD u = leafD(uv);
  VarD cu = conv2d(u, reshape(w, {3, 2, 4, 4}), VarD{}, 2, 1);
  // conv2d w layout is [Cout,Cin,k,k]; conv_transpose w is [Cin,Cout,k,k].
  // Using the same raw tensor both ways checks the adjoint relation.
  double lhs = 0, rhs = 0;
  for (int64_t i = 0; i < cu.val().numel(); ++i) lhs += cu.val()[i] * x.val()[i];
  VarD tv = conv_transpose2d(x, w, VarD{}, 2, 1);
  for (int64_t i = 0; i < tv.val().numel(); ++i) rhs += tv.val()[i] * uv[i];
  CHECK(lhs == doctest::Approx(rhs));

  double err = max_grad_rel_error(
      {x, w, b}, [&] { return sum(mul(conv_transpose2d(x, w, b, 2, 1),
                                      conv_transpose2d(x, w, b, 2, 1))); });
  CHECK(err < 1e-6);
}

TEST_CASE("group/instance/batch/masked norms: values and gradients") {
  Rng rng(31);
  VarD x = leafD(randn_tensor({3, 4, 2, 2}, rng));
  VarD gamma = leafD(randn_tensor({4}, rng, 0.3));
  VarD beta = leafD(randn_tensor({4}, rng, 0.3));

  SUBCASE("group_norm statistics") {
    VarD y = group_norm(x, 2, gamma, beta, 1e-5);
    // per (n, group): normalized values have ~zero mean
    for (int64_t n = 0; n < 3; ++n)
      for (int64_t g = 0; g < 2; ++g) {
        double acc = 0;
        for (int64_t c = g * 2; c < (g + 1) * 2; ++c)
          for (int64_t k = 0; k < 4; ++k) {
            double v = (y.val().at(n, c, k / 2, k % 2) - beta.val()[c]) /
                       gamma.val()[c];
            acc += v;
          }
        CHECK(std::abs(acc) < 1e-9);
      }
  }
  SUBCASE("group_norm gradients") {
    double err = max_grad_rel_error(
        {x, gamma, beta},
        [&] { return sum(mul(group_norm(x, 2, gamma, beta, 1e-5),
                             group_norm(x, 2, gamma, beta, 1e-5))); });
    CHECK(err < 1e-5);
  }
  SUBCASE("instance_norm gradients") {
    double err = max_grad_rel_error(
        {x, gamma, beta},
        [&] { return mean(mul(instance_norm(x, gamma, beta, 1e-4),
                              instance_norm(x, gamma, beta, 1e-4))); });
    CHECK(err < 1e-5);
  }
  SUBCASE("batch_norm train gradients") {
    double err = max_grad_rel_error({x, gamma, beta}, [&] {
      return mean(mul(batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr),
                      batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr)));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("masked batch_norm ignores masked rows") {
    Tensor<double> fm = Tensor<double>::from({3}, {1, 1, 0});
    Tensor<double> bm1, bv1;
    batch_norm_train(x, gamma, beta, 1e-5, &bm1, &bv1, &fm);
    // statistics equal those of the first two rows alone
    VarD x2 = leafD(Tensor<double>::from(
        {2, 4, 2, 2}, std::vector<double>(x.val().data(), x.val().data() + 32)));
    Tensor<double> bm2, bv2;
    batch_norm_train(x2, gamma, beta, 1e-5, &bm2, &bv2);
    for (int64_t c = 0; c < 4; ++c) {
      CHECK(bm1[c] == doctest::Approx(bm2[c]));
      CHECK(bv1[c] == doctest::Approx(bv2[c]));
    }
    double err = max_grad_rel_error({x, gamma, beta}, [&] {
      return mean(mul(batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr, &fm),
                      batch_norm_train<double>(x, gamma, beta, 1e-5, nullptr, nullptr, &fm)));
    });
    CHECK(err < 1e-5);
  }
  SUBCASE("batch_norm eval gradients") {
    Tensor<double> rm = randn_tensor({4}, rng, 0.2);
    Tensor<double> rv = Tensor<double>::full({4}, 1.3);
    double err = max_grad_rel_error({x, gamma, beta}, [&] {
      return mean(mul(batch_norm_eval(x, gamma, beta, rm, rv, 1e-5),
                      batch_norm_eval(x, gamma, beta, rm, rv, 1e-5)));
    });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("masked_group_norm_tc restricts statistics to real timesteps") {
  Rng rng(37);
  VarD x = leafD(randn_tensor({2, 4, 6}, rng));  // [N,T,C]
  VarD gamma = leafD(randn_tensor({6}, rng, 0.3));
  VarD beta = leafD(randn_tensor({6}, rng, 0.3));
  Tensor<double> mask = Tensor<double>::from({2, 4}, {1, 1, 1, 0, 1, 1, 0, 0});

  VarD y = masked_group_norm_tc(x, 2, gamma, beta, mask, 1e-6);
  // per (n, group): mean over real rows of normalized values ~ 0
  for (int64_t n = 0; n < 2; ++n)
    for (int64_t g = 0; g < 2; ++g) {
      double acc = 0;
      int64_t cnt = 0;
      for (int64_t t = 0; t < 4; ++t) {
        if (mask.at(n, t) == 0) continue;
        for (int64_t c = g * 3; c < (g + 1) * 3; ++c) {
          acc += (y.val().at(n, t, c) - beta.val()[c]) / gamma.val()[c];
          ++cnt;
        }
      }
      CHECK(std::abs(acc / double(cnt)) < 1e-9);
    }
  double err = max_grad_rel_error({x, gamma, beta}, [&] {
    return mean(mul(masked_group_norm_tc(x, 2, gamma, beta, mask, 1e-6),
                    masked_group_norm_tc(x, 2, gamma, beta, mask, 1e-6)));
  });
  CHECK(err < 1e-5);
}

TEST_CASE("attention scores + masked softmax") {
  Rng rng(41);
  VarD k = leafD(randn_tensor({3, 5, 2, 4}, rng));  // [N,T,G,dk]
  VarD q = leafD(randn_tensor({2, 4}, rng));
  Tensor<double> mask{Shape{3, 5}};
  for (int64_t n = 0; n < 3; ++n)
    for (int64_t t = 0; t < 5; ++t) mask.at(n, t) = t < 3 + n ? 1.0 : 0.0;

  VarD s = attention_scores(k, q);
  CHECK(s.val().shape() == Shape({3, 2, 5}));
  double manual = 0;
  for (int64_t d = 0; d < 4; ++d)
    manual += k.val().at(1, 2, 0, d) * q.val().at(0, d);
  CHECK(s.val().at(1, 0, 2) == doctest::Approx(manual / 2.0));

  VarD a = masked_softmax_time(s, mask);
  for (int64_t n = 0; n < 3; ++n)
    for (int64_t g = 0; g < 2; ++g) {
      double acc = 0;
      for (int64_t t = 0; t < 5; ++t) {
        if (mask.at(n, t) == 0) CHECK(a.val().at(n, g, t) == 0.0);
        acc += a.val().at(n, g, t);
      }
      CHECK(acc == doctest::Approx(1.0));
    }
  double err = max_grad_rel_error({k, q}, [&] {
    VarD att = masked_softmax_time(attention_scores(k, q), mask);
    return sum(mul(att, att));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("temporal_group_collapse equals explicit loop") {
  Rng rng(43);
  VarD e = leafD(randn_tensor({2, 3, 4, 2, 2}, rng));  // [B,T,C,H,W]
  VarD a = leafD(randn_tensor({2, 2, 3, 2, 2}, rng));  // [B,G,T,H,W]
  VarD f = temporal_group_collapse(e, a);
  REQUIRE(f.val().shape() == Shape({2, 4, 2, 2}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t c = 0; c < 4; ++c)
      for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
          double acc = 0;
          for (int64_t t = 0; t < 3; ++t)
            acc += a.val().at(b, c / 2, t, i, j) * e.val().at(b, t, c, i, j);
          CHECK(f.val().at(b, c, i, j) == doctest::Approx(acc));
        }
  double err = max_grad_rel_error({e, a}, [&] {
    VarD y = temporal_group_collapse(e, a);
    return sum(mul(y, y));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("bilinear_resize: constants, affine sums, gradients") {
  Rng rng(47);
  SUBCASE("constant preserved") {
    VarD x = leafD(Tensor<double>::full({1, 1, 4, 4}, 0.37));
    VarD y = bilinear_resize(x, 9, 7);
    for (int64_t i = 0; i < y.val().numel(); ++i)
      CHECK(y.val()[i] == doctest::Approx(0.37));
  }
  SUBCASE("gradients") {
    VarD x = leafD(randn_tensor({2, 3, 4, 5}, rng));
    double err = max_grad_rel_error({x}, [&] {
      VarD y = bilinear_resize(x, 7, 9);
      return sum(mul(y, y));
    });
    CHECK(err < 1e-6);
  }
  SUBCASE("downscale gradients") {
    VarD x = leafD(randn_tensor({1, 2, 8, 8}, rng));
    double err = max_grad_rel_error({x}, [&] {
      VarD y = bilinear_resize(x, 3, 5);
      return sum(mul(y, y));
    });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("gather_pixels") {
  Rng rng(53);
  VarD d = leafD(randn_tensor({2, 3, 4, 4}, rng));
  std::vector<std::array<int64_t, 3>> coords{{0, 1, 2}, {1, 3, 0}, {0, 1, 2}};
  VarD g = gather_pixels(d, coords);
  REQUIRE(g.val().shape() == Shape({3, 3}));
  for (int64_t c = 0; c < 3; ++c) {
    CHECK(g.val().at(0, c) == d.val().at(0, c, 1, 2));
    CHECK(g.val().at(1, c) == d.val().at(1, c, 3, 0));
  }
  double err = max_grad_rel_error({d}, [&] {
    VarD y = gather_pixels(d, coords);
    return sum(mul(y, y));
  });
  CHECK(err < 1e-7);
}

TEST_CASE("cross entropy: uniform logits give ln K") {
  int64_t k = 20;
  VarD logits = leafD(Tensor<double>::zeros({1, k, 2, 2}));
  Tensor<int32_t> target = Tensor<int32_t>::zeros({1, 2, 2});
  target.at(0, 1, 1) = 19;
  VarD l = cross_entropy_mean(logits, target, /*ignore=*/19);
  CHECK(l.val()[0] == doctest::Approx(std::log(20.0)).epsilon(1e-9));

  SUBCASE("all-ignored input gives zero loss and gradient") {
    Tensor<int32_t> tv = Tensor<int32_t>::full({1, 2, 2}, 19);
    VarD l2 = cross_entropy_mean(logits, tv, 19);
    CHECK(l2.val()[0] == 0.0);
    l2.backward();
    CHECK_FALSE(logits.has_grad());
  }
  SUBCASE("gradients") {
    Rng rng(59);
    VarD lg = leafD(randn_tensor({2, 4, 3, 3}, rng));
    Tensor<int32_t> tv{Shape{2, 3, 3}};
    for (int64_t i = 0; i < tv.numel(); ++i)
      tv[i] = int32_t(rng.uniform_int(5));  // label 4 = ignored
    double err = max_grad_rel_error({lg}, [&] {
      return cross_entropy_mean(lg, tv, 4);
    });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("cross_entropy_rows_sum and bce") {
  Rng rng(61);
  VarD logits = leafD(randn_tensor({5, 4}, rng));
  Tensor<int32_t> t{Shape{5}};
  for (int64_t i = 0; i < 5; ++i) t[i] = int32_t(rng.uniform_int(4));
  double err = max_grad_rel_error({logits}, [&] {
    return cross_entropy_rows_sum(logits, t);
  });
  CHECK(err < 1e-6);

  VarD p = leafD(Tensor<double>::from({2, 2}, {0.3, 0.7, 0.5, 0.9}));
  Tensor<double> tgt = Tensor<double>::from({2, 2}, {0.0, 1.0, 1.0, 1.0});
  VarD l = bce_mean(p, tgt, 1e-7);
  double expect = -(std::log(0.7) + std::log(0.7) + std::log(0.5) + std::log(0.9)) / 4;
  CHECK(l.val()[0] == doctest::Approx(expect));
  double err2 = max_grad_rel_error({p}, [&] { return bce_mean(p, tgt, 1e-7); });
  CHECK(err2 < 1e-6);
}

TEST_CASE("center focal loss: hand value and gradients") {
  // single pixel, target 0.5, prediction 0.5: -(0.5)^4 * ln(0.5)
  VarD m = leafD(Tensor<double>::from({1, 1, 1}, {0.5}));
  Tensor<double> tgt = Tensor<double>::from({1, 1, 1}, {0.5});
  VarD l = center_focal_loss(m, tgt, {1}, 4.0, 1e-7);
  CHECK(l.val()[0] == doctest::Approx(-std::pow(0.5, 4) * std::log(0.5)).epsilon(1e-10));

  SUBCASE("zero parcels give zero loss and zero gradient") {
    VarD l0 = center_focal_loss(m, tgt, {0}, 4.0, 1e-7);
    CHECK(l0.val()[0] == 0.0);
    l0.backward();
    CHECK(m.grad()[0] == 0.0);
  }
  SUBCASE("gradients") {
    Rng rng(67);
    Tensor<double> mv{Shape{2, 3, 3}};
    for (int64_t i = 0; i < mv.numel(); ++i) mv[i] = rng.uniform(0.05, 0.95);
    Tensor<double> tv{Shape{2, 3, 3}};
    for (int64_t i = 0; i < tv.numel(); ++i) tv[i] = rng.uniform(0.0, 0.9);
    tv[0] = 1.0;
    tv[9] = 1.0;
    VarD mm = leafD(mv);
    double err = max_grad_rel_error({mm}, [&] {
      return center_focal_loss(mm, tv, {2, 1}, 4.0, 1e-7);
    });
    CHECK(err < 1e-6);
  }
}

TEST_CASE("backward accumulates over shared subexpressions") {
  VarD a = leafD(Tensor<double>::from({1}, {3.0}));
  VarD y = mul(a, a);  // a^2, da = 2a
  y = add(y, a);       // a^2 + a, da = 2a + 1
  sum(y).backward();
  CHECK(a.grad()[0] == doctest::Approx(7.0));
}
