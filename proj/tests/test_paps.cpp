#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "sitspan/paps.hpp"

using namespace sitspan;
using paps::Box;
using paps::PapsConfig;
using paps::PapsHeads;

namespace {

core::ParcelRecord parcel_with_rect(int32_t id, int64_t r0, int64_t c0, int64_t bh,
                                     int64_t bw, int64_t h, int64_t w, int32_t cls) {
  core::ParcelRecord p;
  p.id = id;
  p.mask = Tensor<uint8_t>::zeros({h, w});
  for (int64_t i = r0; i < r0 + bh; ++i)
    for (int64_t j = c0; j < c0 + bw; ++j) p.mask.at(i, j) = 1;
  p.bbox_h = double(bh);
  p.bbox_w = double(bw);
  p.center_i = r0 + bh / 2;
  p.center_j = c0 + bw / 2;
  p.crop_class = cls;
  return p;
}

core::SITSSample one_parcel_sample(int64_t h, int64_t w) {
  core::SITSSample s;
  s.sample_id = "toy";
  s.images = Tensor<float>::zeros({1, 1, h, w});
  s.dates = Tensor<int64_t>::zeros({1});
  s.semantic = Tensor<int32_t>::zeros({h, w});
  s.instances = Tensor<int32_t>::zeros({h, w});
  auto p = parcel_with_rect(1, 4, 5, 7, 6, h, w, 2);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      if (p.mask.at(i, j)) {
        s.instances.at(i, j) = 1;
        s.semantic.at(i, j) = 2;
      }
  s.parcels.push_back(std::move(p));
  return s;
}

PapsConfig toy_paps(int levels) {
  PapsConfig cfg;
  cfg.feature_widths.assign(size_t(levels), 0);
  cfg.feature_widths[0] = 6;
  for (int l = 1; l < levels; ++l) cfg.feature_widths[size_t(l)] = 8;
  cfg.num_classes = 3;
  cfg.shape_size = 4;
  cfg.head_width = 8;
  cfg.mlp_hidden = 10;
  cfg.class_hidden = 6;
  cfg.mask_cnn_width = 4;
  return cfg;
}

}  // namespace

TEST_CASE("heatmap target values") {
  SUBCASE("single parcel: exactly 1 at its center") {
    core::ParcelRecord p = parcel_with_rect(1, 2, 3, 10, 8, 24, 24, 1);
    auto m = paps::build_heatmap_target<double>({p}, 24, 24);
    CHECK(m.at(p.center_i, p.center_j) == 1.0);
    for (int64_t k = 0; k < m.numel(); ++k) {
      CHECK(m[k] >= 0.0);
      CHECK(m[k] <= 1.0);
    }
  }
  SUBCASE("bbox 20x40: sigma (1,2), value exp(-0.5) one pixel below center") {
    core::ParcelRecord p;
    p.id = 1;
    p.center_i = 24;
    p.center_j = 30;
    p.bbox_h = 20;
    p.bbox_w = 40;
    p.crop_class = 1;
    auto m = paps::build_heatmap_target<double>({p}, 64, 64);
    CHECK(m.at(25, 30) == doctest::Approx(std::exp(-0.5)).epsilon(1e-9));
    CHECK(m.at(24, 32) == doctest::Approx(std::exp(-0.5)).epsilon(1e-9));
    CHECK(m.at(24, 30) == 1.0);
  }
  SUBCASE("two parcels: pointwise max of both kernels") {
    core::ParcelRecord a = parcel_with_rect(1, 2, 2, 12, 10, 32, 32, 1);
    core::ParcelRecord b = parcel_with_rect(2, 18, 20, 10, 10, 32, 32, 2);
    auto m = paps::build_heatmap_target<double>({a, b}, 32, 32);
    for (int64_t i = 0; i < 32; ++i)
      for (int64_t j = 0; j < 32; ++j) {
        auto kern = [&](const core::ParcelRecord& p) {
          double sv = std::max(0.5, p.bbox_h / 20.0);
          double sh = std::max(0.5, p.bbox_w / 20.0);
          double di = double(i - p.center_i), dj = double(j - p.center_j);
          return std::exp(-(di * di / (2 * sv * sv) + dj * dj / (2 * sh * sh)));
        };
        CHECK(m.at(i, j) == doctest::Approx(std::max(kern(a), kern(b))).epsilon(1e-12));
      }
    // parcel order does not matter
    auto m2 = paps::build_heatmap_target<double>({b, a}, 32, 32);
    for (int64_t k = 0; k < m.numel(); ++k) CHECK(m[k] == m2[k]);
  }
  SUBCASE("void parcels are skipped; empty set gives zeros") {
    core::ParcelRecord p = parcel_with_rect(1, 2, 2, 8, 8, 16, 16, 1);
    p.is_void = true;
    auto m = paps::build_heatmap_target<double>({p}, 16, 16);
    for (int64_t k = 0; k < m.numel(); ++k) CHECK(m[k] == 0.0);
  }
}

TEST_CASE("center loss: duplicated disjoint scene inside one image") {
  Rng rng(5);
  int64_t h = 8, w = 8;
  Tensor<double> m1{Shape{1, h, w}}, t1{Shape{1, h, w}};
  for (int64_t k = 0; k < h * w; ++k) {
    m1[k] = rng.uniform(0.05, 0.95);
    t1[k] = rng.uniform(0.0, 0.9);
  }
  t1[12] = 1.0;
  // duplicate side by side: twice the pixels, twice the parcels
  Tensor<double> m2{Shape{1, h, 2 * w}}, t2{Shape{1, h, 2 * w}};
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      m2.at(0, i, j) = m1.at(0, i, j);
      m2.at(0, i, j + w) = m1.at(0, i, j);
      t2.at(0, i, j) = t1.at(0, i, j);
      t2.at(0, i, j + w) = t1.at(0, i, j);
    }
  auto l1 = ag::center_focal_loss(ag::Var<double>::constant(m1), t1, {1}, 4.0, 1e-7);
  auto l2 = ag::center_focal_loss(ag::Var<double>::constant(m2), t2, {2}, 4.0, 1e-7);
  CHECK(l1.val()[0] == doctest::Approx(l2.val()[0]).epsilon(1e-12));
}

TEST_CASE("detect_centers") {
  SUBCASE("single bump yields exactly its peak") {
    // kernel wide enough that no pixel underflows: the map has no 0-plateaus
    core::ParcelRecord p = parcel_with_rect(1, 4, 3, 24, 26, 32, 32, 1);
    auto m = paps::build_heatmap_target<double>({p}, 32, 32);
    auto centers = paps::detect_centers(m);
    REQUIRE(centers.size() == 1);
    CHECK(centers[0].i == p.center_i);
    CHECK(centers[0].j == p.center_j);
    CHECK(centers[0].q == doctest::Approx(1.0));
  }
  SUBCASE("constant map: every pixel is a maximum") {
    auto m = Tensor<float>::full({5, 7}, 0.3f);
    CHECK(paps::detect_centers(m).size() == 35);
  }
  SUBCASE("random map matches the brute-force 8-neighbor scan") {
    Rng rng(9);
    Tensor<float> m{Shape{64, 64}};
    for (int64_t k = 0; k < m.numel(); ++k) m[k] = float(rng.uniform());
    auto centers = paps::detect_centers(m);
    std::set<std::pair<int64_t, int64_t>> got;
    for (const auto& c : centers) got.insert({c.i, c.j});
    std::set<std::pair<int64_t, int64_t>> want;
    for (int64_t i = 0; i < 64; ++i)
      for (int64_t j = 0; j < 64; ++j) {
        bool is_max = true;
        for (int64_t di = -1; di <= 1; ++di)
          for (int64_t dj = -1; dj <= 1; ++dj) {
            int64_t ni = std::clamp<int64_t>(i + di, 0, 63);
            int64_t nj = std::clamp<int64_t>(j + dj, 0, 63);
            if (m.at(ni, nj) > m.at(i, j)) is_max = false;
          }
        if (is_max) want.insert({i, j});
      }
    CHECK(got == want);
    // sorted by q descending
    for (size_t k = 1; k < centers.size(); ++k)
      CHECK(centers[k - 1].q >= centers[k].q);
  }
}

TEST_CASE("assign_centers") {
  core::ParcelRecord a = parcel_with_rect(1, 2, 2, 10, 10, 32, 32, 1);
  core::ParcelRecord b = parcel_with_rect(2, 18, 18, 10, 10, 32, 32, 2);
  auto pix = core::pixel_to_parcel_map({a, b}, 32, 32);

  SUBCASE("one center inside one parcel") {
    std::vector<paps::Center> centers{{a.center_i, a.center_j, 0.8}};
    auto got = paps::assign_centers({a, b}, centers, pix);
    CHECK(got[0] == 0);
    CHECK(got[1] == -1);  // parcel b is not detected
  }
  SUBCASE("highest centerness wins within a parcel") {
    std::vector<paps::Center> centers{{a.center_i, a.center_j, 0.9},
                                      {a.center_i + 1, a.center_j, 0.4},
                                      {b.center_i, b.center_j, 0.5}};
    auto got = paps::assign_centers({a, b}, centers, pix);
    CHECK(got[0] == 0);  // q=0.9 beats q=0.4
    CHECK(got[1] == 2);
  }
}

TEST_CASE("multiscale feature extraction") {
  Rng rng(11);
  std::vector<ag::Var<double>> d;
  std::vector<int> widths{32, 32, 64, 128};
  for (int l = 0; l < 4; ++l) {
    int64_t hl = 128 >> l;
    d.push_back(ag::Var<double>::leaf(randn_tensor({1, widths[size_t(l)], hl, hl}, rng)));
  }
  SUBCASE("vector length is 256 = 32+32+64+128") {
    auto f = paps::extract_multiscale_features(d, {{0, 10, 20}});
    CHECK(f.val().shape() == Shape({1, 256}));
  }
  SUBCASE("corner reads (0,0) everywhere; (127,127) reads (15,15) at level 4") {
    auto f = paps::extract_multiscale_features(d, {{0, 0, 0}, {0, 127, 127}});
    CHECK(f.val().at(0, 0) == d[0].val().at(0, 0, 0, 0));
    CHECK(f.val().at(0, 32) == d[1].val().at(0, 0, 0, 0));
    // level 4 contribution of the second center starts at offset 32+32+64
    CHECK(f.val().at(1, 128) == d[3].val().at(0, 0, 15, 15));
  }
}

TEST_CASE("prediction heads: positivity, simplex, shape size") {
  PapsConfig cfg = toy_paps(2);
  cfg.shape_size = 16;
  Rng rng(13);
  PapsHeads<double> heads;
  heads.init(cfg, rng);
  auto feats = ag::Var<double>::leaf(randn_tensor({5, cfg.stack_dim()}, rng, 2.0));
  auto out = heads.predict_heads(feats, true);
  CHECK(out.sizes.val().shape() == Shape({5, 2}));
  for (int64_t k = 0; k < out.sizes.val().numel(); ++k)
    CHECK(out.sizes.val()[k] > 0.0);  // softplus output
  CHECK(out.shapes.val().shape() == Shape({5, 256}));  // S=16 -> 256 entries
  // softmax of the class logits sums to one
  for (int64_t m = 0; m < 5; ++m) {
    double mx = -1e30;
    for (int64_t c = 0; c < 3; ++c)
      mx = std::max(mx, out.class_logits.val().at(m, c));
    double z = 0;
    for (int64_t c = 0; c < 3; ++c)
      z += std::exp(out.class_logits.val().at(m, c) - mx);
    (void)z;
    CHECK(std::isfinite(z));
  }
}

TEST_CASE("size loss hand value: 0.2") {
  auto sizes = ag::Var<double>::leaf(Tensor<double>::from({1, 2}, {12.0, 20.0}));
  Tensor<double> target = Tensor<double>::from({1, 2}, {10.0, 20.0});
  auto l = paps::size_loss_sum(sizes, target);
  CHECK(l.val()[0] == doctest::Approx(0.2).epsilon(1e-9));
  auto exact = ag::Var<double>::leaf(Tensor<double>::from({1, 2}, {10.0, 20.0}));
  CHECK(paps::size_loss_sum(exact, target).val()[0] == doctest::Approx(0.0));
}

TEST_CASE("centered_box geometry") {
  SUBCASE("interior box") {
    Box b = paps::centered_box(8, 8, 5, 4, 16, 16);
    CHECK(b.r0 == 6);
    CHECK(b.c0 == 6);
    CHECK(b.nr == 5);
    CHECK(b.nc == 4);
    CHECK(b.pr0 == 0);
  }
  SUBCASE("corner box is clipped, never padded") {
    Box b = paps::centered_box(0, 1, 6, 6, 8, 8);
    CHECK(b.r0 == 0);
    CHECK(b.nr == 3);   // rows -3..2 clip to 0..2
    CHECK(b.pr0 == 3);  // the clipped rows came off the top of the patch
    CHECK(b.c0 == 0);
    CHECK(b.nc == 4);
    CHECK(b.pc0 == 2);
  }
  SUBCASE("degenerate size is rejected") {
    CHECK_THROWS_AS(paps::centered_box(4, 4, 0, 3, 8, 8), Error);
  }
}

TEST_CASE("assemble_shape") {
  PapsConfig cfg = toy_paps(2);
  cfg.shape_size = 4;
  Rng rng(17);
  PapsHeads<double> heads;
  heads.init(cfg, rng);
  // zero the residual CNN: l_c must reduce to sigmoid(resize + crop)
  for (auto* conv : {&heads.mask_c1, &heads.mask_c2, &heads.mask_c3}) {
    conv->w.val().fill(0.0);
    conv->b.val().fill(0.0);
  }
  auto z = ag::Var<double>::leaf(randn_tensor({1, 8, 8}, rng));
  auto patch = ag::Var<double>::leaf(randn_tensor({4, 4}, rng));

  SUBCASE("SxS box: the resize step is the identity") {
    Box box = paps::centered_box(4, 4, 4, 4, 8, 8);
    auto lc = heads.assemble_shape(patch, z, 0, box);
    REQUIRE(lc.val().shape() == Shape({4, 4}));
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 4; ++c) {
        double lt = patch.val().at(r, c) + z.val().at(0, box.r0 + r, box.c0 + c);
        CHECK(lc.val().at(r, c) == doctest::Approx(1.0 / (1.0 + std::exp(-lt))));
      }
  }
  SUBCASE("corner crop: output matches the clipped box") {
    Box box = paps::centered_box(0, 0, 4, 4, 8, 8);
    auto lc = heads.assemble_shape(patch, z, 0, box);
    CHECK(lc.val().shape() == Shape({box.nr, box.nc}));
    CHECK(box.nr == 2);
    CHECK(box.nc == 2);
    for (int64_t r = 0; r < box.nr; ++r)
      for (int64_t c = 0; c < box.nc; ++c) {
        double lt = patch.val().at(box.pr0 + r, box.pc0 + c) + z.val().at(0, r, c);
        CHECK(lc.val().at(r, c) == doctest::Approx(1.0 / (1.0 + std::exp(-lt))));
      }
  }
  SUBCASE("multiplicative saliency variant") {
    PapsConfig cfg2 = toy_paps(2);
    cfg2.shape_size = 4;
    cfg2.multiplicative_saliency = true;
    Rng rng2(19);
    PapsHeads<double> mheads;
    mheads.init(cfg2, rng2);
    Box box = paps::centered_box(4, 4, 4, 4, 8, 8);
    auto lc = mheads.assemble_shape(patch, z, 0, box);
    for (int64_t r = 0; r < 4; ++r)
      for (int64_t c = 0; c < 4; ++c) {
        double sp = 1.0 / (1.0 + std::exp(-patch.val().at(r, c)));
        double sz = 1.0 / (1.0 + std::exp(-z.val().at(0, box.r0 + r, box.c0 + c)));
        CHECK(lc.val().at(r, c) == doctest::Approx(sp * sz));
      }
    // and it carries fewer parameters (no residual CNN)
    CHECK(mheads.num_params() < mheads.num_params() + 1);
    PapsHeads<double> full;
    Rng rng3(19);
    full.init(cfg, rng3);
    CHECK(mheads.num_params() < full.num_params());
  }
}

TEST_CASE("default PaPs parameter count") {
  PapsConfig cfg;  // defaults: widths per decoder, S=16, K=18
  Rng rng(23);
  PapsHeads<float> heads;
  heads.init(cfg, rng);
  double target = 190000.0;
  CHECK(std::abs(double(heads.num_params()) - target) / target < 0.05);
}

TEST_CASE("training loss wiring on a one-parcel scene") {
  int64_t h = 16, w = 16;
  core::SITSSample sample = one_parcel_sample(h, w);
  PapsConfig cfg = toy_paps(2);
  Rng rng(29);
  PapsHeads<double> heads;
  heads.init(cfg, rng);

  utae::FeaturePyramid<double> pyr;
  Rng drng(31);
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 6, h, w}, drng, 0.5)));
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 8, h / 2, w / 2}, drng, 0.5)));

  auto breakdown = paps::training_loss(heads, pyr, {&sample}, true);
  CHECK(breakdown.n_parcels == 1);
  CHECK(breakdown.n_detected == 1);  // every pixel maps to the only parcel
  double composed = breakdown.center.val()[0] +
                    (breakdown.cls.val()[0] + breakdown.size.val()[0] +
                     breakdown.shape.val()[0]) /
                        double(breakdown.n_detected);
  CHECK(breakdown.total.val()[0] == doctest::Approx(composed).epsilon(1e-9));

  SUBCASE("saliency receives gradient from the shape loss") {
    breakdown.total.backward();
    bool nonzero = false;
    nn::Visitor<double> v;
    v.param = [&](const std::string& n, ag::Var<double>& p) {
      if (n.find("sal_") != std::string::npos && p.has_grad())
        for (int64_t k = 0; k < p.grad().numel(); ++k)
          if (p.grad()[k] != 0.0) nonzero = true;
    };
    v.buffer = [](const std::string&, Tensor<double>&) {};
    heads.visit("paps", v);
    CHECK(nonzero);
  }
}

TEST_CASE("scene without parcels reduces to the center loss") {
  int64_t h = 16, w = 16;
  core::SITSSample sample;
  sample.sample_id = "empty";
  sample.images = Tensor<float>::zeros({1, 1, h, w});
  sample.dates = Tensor<int64_t>::zeros({1});
  sample.semantic = Tensor<int32_t>::zeros({h, w});
  sample.instances = Tensor<int32_t>::zeros({h, w});

  PapsConfig cfg = toy_paps(2);
  Rng rng(37);
  PapsHeads<double> heads;
  heads.init(cfg, rng);
  utae::FeaturePyramid<double> pyr;
  Rng drng(41);
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 6, h, w}, drng)));
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 8, h / 2, w / 2}, drng)));
  auto breakdown = paps::training_loss(heads, pyr, {&sample}, true);
  CHECK(breakdown.n_detected == 0);
  CHECK(breakdown.total.val()[0] == breakdown.center.val()[0]);
  CHECK(breakdown.center.val()[0] == 0.0);  // |P| = 0
}

TEST_CASE("class head loss decreases under gradient descent") {
  PapsConfig cfg = toy_paps(2);
  Rng rng(43);
  PapsHeads<float> heads;
  heads.init(cfg, rng);
  Rng frng(47);
  Tensor<float> feats{Shape{6, cfg.stack_dim()}};
  for (int64_t k = 0; k < feats.numel(); ++k) feats[k] = float(frng.normal(0, 1));
  Tensor<int32_t> targets = Tensor<int32_t>::from({6}, {0, 1, 2, 0, 1, 2});

  nn::Adam<float> opt;
  opt.lr = 1e-2f;
  for (auto* lin : {&heads.class_1, &heads.class_2, &heads.class_3}) {
    opt.add_param("w", lin->w);
    opt.add_param("b", lin->b);
  }
  opt.add_param("g1", heads.class_bn1.gamma);
  opt.add_param("b1", heads.class_bn1.beta);
  opt.add_param("g2", heads.class_bn2.gamma);
  opt.add_param("b2", heads.class_bn2.beta);

  double prev = 1e30;
  for (int step = 0; step < 10; ++step) {
    auto out = heads.predict_heads(ag::Var<float>::constant(feats), true);
    auto loss = ag::cross_entropy_rows_sum(out.class_logits, targets);
    double lv = loss.val()[0];
    CHECK(lv < prev);  // strictly monotonic on the frozen toy
    prev = lv;
    opt.zero_grad();
    loss.backward();
    opt.step();
  }
}

TEST_CASE("full PaPs gradient check on a one-parcel 16x16 toy") {
  int64_t h = 16, w = 16;
  core::SITSSample sample = one_parcel_sample(h, w);
  PapsConfig cfg = toy_paps(2);
  Rng rng(53);
  PapsHeads<double> heads;
  heads.init(cfg, rng);
  utae::FeaturePyramid<double> pyr;
  Rng drng(59);
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 6, h, w}, drng, 0.4)));
  pyr.d.push_back(ag::Var<double>::leaf(randn_tensor({1, 8, h / 2, w / 2}, drng, 0.4)));

  std::vector<ag::Var<double>> params;
  nn::Visitor<double> v;
  v.param = [&](const std::string&, ag::Var<double>& p) { params.push_back(p); };
  v.buffer = [](const std::string&, Tensor<double>&) {};
  heads.visit("paps", v);
  params.push_back(pyr.d[0]);
  params.push_back(pyr.d[1]);

  // move off the relu kinks: with one proposal the batch norms output exactly
  // beta, and beta initializes to zero, which is not a differentiable point
  Rng nudge(61);
  for (auto& p : params)
    for (int64_t k = 0; k < p.val().numel(); ++k)
      p.val()[k] += nudge.uniform(-0.05, 0.05);
  heads.size_2.b.val()[0] += 2.0;  // a box larger than one pixel
  heads.size_2.b.val()[1] += 2.0;

  double err = max_grad_rel_error(params, [&] {
    return paps::training_loss(heads, pyr, {&sample}, true).total;
  });
  CHECK(err < 1e-4);
}
