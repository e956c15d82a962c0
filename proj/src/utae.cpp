#include "sitspan/utae.hpp"

#include <algorithm>
#include <cmath>

namespace sitspan::utae {

using namespace ag;

Ablation ablation_from_string(const std::string& s) {
  if (s == "full") return Ablation::full;
  if (s == "mean_attention") return Ablation::mean_attention;
  if (s == "skip_mean") return Ablation::skip_mean;
  if (s == "skip_mean_conv") return Ablation::skip_mean_conv;
  if (s == "batchnorm_encoder" || s == "batchnorm") return Ablation::batchnorm_encoder;
  if (s == "single_date") return Ablation::single_date;
  fail(ErrorCode::UnknownAblation, "unknown ablation '" + s + "'");
}

std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::full: return "full";
    case Ablation::mean_attention: return "mean_attention";
    case Ablation::skip_mean: return "skip_mean";
    case Ablation::skip_mean_conv: return "skip_mean_conv";
    case Ablation::batchnorm_encoder: return "batchnorm_encoder";
    case Ablation::single_date: return "single_date";
  }
  fail(ErrorCode::UnknownAblation, "bad ablation enum");
}

void UtaeConfig::validate() const {
  check(levels() >= 2, ErrorCode::ConfigError, "need at least 2 levels");
  check(decoder_widths.size() == encoder_widths.size(), ErrorCode::ConfigError,
        "encoder/decoder width lists must have equal length");
  check(encoder_widths.back() == decoder_widths.back(), ErrorCode::ConfigError,
        "innermost encoder and decoder widths must match (d^L = f^L)");
  for (int wdt : encoder_widths)
    check(wdt > 0 && wdt % encoder_groups == 0, ErrorCode::ConfigError,
          "encoder widths must be positive multiples of the norm group count");
  check(encoder_widths.back() % heads == 0, ErrorCode::ConfigError,
        "C_L must be divisible by the head count");
  check(d_k > 0 && d_model > 0 && heads > 0, ErrorCode::ConfigError,
        "attention dims must be positive");
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

template <typename T>
void ResidualConvBlock<T>::init(int64_t cin, int64_t cout, nn::NormKind kind,
                                int groups, Rng& rng) {
  conv_a.init(cin, cout, 3, 1, 1, rng);
  norm_a.init(kind, cout, groups);
  conv_b.init(cout, cout, 3, 1, 1, rng);
  norm_b.init(kind, cout, groups);
}

template <typename T>
Var<T> ResidualConvBlock<T>::forward(const Var<T>& x, bool training,
                                     const Tensor<T>* frame_mask) {
  Var<T> y = relu(norm_a.forward(conv_a.forward(x), training, frame_mask));
  return add(y, norm_b.forward(conv_b.forward(y), training, frame_mask));
}

template <typename T>
void ResidualConvBlock<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  conv_a.visit(p + ".conv_a", v);
  norm_a.visit(p + ".norm_a", v);
  conv_b.visit(p + ".conv_b", v);
  norm_b.visit(p + ".norm_b", v);
}

template <typename T>
void DownBlock<T>::init(int64_t cin, int64_t cout, nn::NormKind kind, int groups,
                        Rng& rng) {
  down.init(cin, cin, 4, 2, 1, rng);
  down_norm.init(kind, cin, groups);
  block.init(cin, cout, kind, groups, rng);
}

template <typename T>
Var<T> DownBlock<T>::forward(const Var<T>& x, bool training,
                             const Tensor<T>* frame_mask) {
  Var<T> y = relu(down_norm.forward(down.forward(x), training, frame_mask));
  return block.forward(y, training, frame_mask);
}

template <typename T>
void DownBlock<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  down.visit(p + ".down", v);
  down_norm.visit(p + ".down_norm", v);
  block.visit(p + ".block", v);
}

template <typename T>
void UpBlock<T>::init(int64_t cin, int64_t cout, int64_t skip, Rng& rng) {
  up.init(cin, cout, 4, 2, 1, rng);
  up_norm.init(nn::NormKind::batch, cout, 1);
  block.init(cout + skip, cout, nn::NormKind::batch, 1, rng);
}

template <typename T>
Var<T> UpBlock<T>::forward(const Var<T>& x, const Var<T>& skip, bool training) {
  Var<T> y = relu(up_norm.forward(up.forward(x), training));
  y = concat<T>({y, skip}, 1);
  return block.forward(y, training, nullptr);
}

template <typename T>
void UpBlock<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  up.visit(p + ".up", v);
  up_norm.visit(p + ".up_norm", v);
  block.visit(p + ".block", v);
}

template <typename T>
void Ltae<T>::init(int64_t channels, int heads_, int d_k_, int64_t d_model,
                   double pe_period_, Rng& rng) {
  heads = heads_;
  d_k = d_k_;
  pe_period = pe_period_;
  in_gamma = Var<T>::leaf(Tensor<T>::full({channels}, T(1)));
  in_beta = Var<T>::leaf(Tensor<T>::zeros({channels}));
  proj.init(channels, d_model, rng);
  keys.init(d_model, int64_t(heads) * d_k, rng);
  Tensor<T> q{Shape{int64_t(heads), int64_t(d_k)}};
  double std = std::sqrt(2.0 / double(d_k));
  for (int64_t i = 0; i < q.numel(); ++i) q[i] = T(rng.normal(0.0, std));
  query = Var<T>::leaf(q);
}

template <typename T>
Var<T> Ltae<T>::forward(const Var<T>& e_pix, const Tensor<T>& pix_mask,
                        const Tensor<T>& pe) {
  const Shape& s = e_pix.val().shape();  // [Npix,T,C]
  int64_t npix = s[0], t = s[1], c = s[2];
  Var<T> x = masked_group_norm_tc(e_pix, heads, in_gamma, in_beta, pix_mask,
                                  T(1e-5));
  int64_t d_model = proj.w.val().dim(0);
  x = reshape(proj.forward(reshape(x, {npix * t, c})), {npix, t, d_model});
  x = add(x, Var<T>::constant(pe));
  Var<T> k = reshape(keys.forward(reshape(x, {npix * t, d_model})),
                     {npix, t, int64_t(heads), int64_t(d_k)});
  Var<T> scores = attention_scores(k, query);
  return masked_softmax_time(scores, pix_mask);  // [Npix, G, T]
}

template <typename T>
void Ltae<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  v.param(p + ".in_gamma", in_gamma);
  v.param(p + ".in_beta", in_beta);
  proj.visit(p + ".proj", v);
  keys.visit(p + ".keys", v);
  v.param(p + ".query", query);
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

template <typename T>
void Utae<T>::init(const UtaeConfig& cfg_, Rng& rng) {
  cfg = cfg_;
  cfg.validate();
  int L = cfg.levels();
  nn::NormKind enc_norm = cfg.ablation == Ablation::batchnorm_encoder
                              ? nn::NormKind::batch
                              : nn::NormKind::group;

  in_block.init(cfg.in_channels, cfg.encoder_widths[0], enc_norm,
                cfg.encoder_groups, rng);
  down.resize(size_t(L - 1));
  for (int l = 1; l < L; ++l)
    down[size_t(l - 1)].init(cfg.encoder_widths[size_t(l - 1)],
                             cfg.encoder_widths[size_t(l)], enc_norm,
                             cfg.encoder_groups, rng);

  if (has_ltae()) {
    ltae.init(cfg.encoder_widths.back(), cfg.heads, cfg.d_k, cfg.d_model,
              cfg.pe_period, rng);
    out_gamma = Var<T>::leaf(Tensor<T>::full({int64_t(cfg.encoder_widths.back())}, T(1)));
    out_beta = Var<T>::leaf(Tensor<T>::zeros({int64_t(cfg.encoder_widths.back())}));
  }

  collapse_conv.resize(size_t(L));
  for (int l = 0; l < L; ++l)
    if (has_collapse_conv(l + 1))
      collapse_conv[size_t(l)].init(cfg.encoder_widths[size_t(l)],
                                    cfg.encoder_widths[size_t(l)], 1, 1, 0, rng);

  up.resize(size_t(L - 1));
  for (int l = L - 1; l >= 1; --l)
    up[size_t(l - 1)].init(cfg.decoder_widths[size_t(l)],
                           cfg.decoder_widths[size_t(l - 1)],
                           cfg.encoder_widths[size_t(l - 1)], rng);

  if (cfg.semantic_head) {
    int64_t d1 = cfg.decoder_widths[0];
    head_a.init(d1, d1, 3, 1, 1, rng);
    head_norm.init(nn::NormKind::batch, d1, 1);
    head_b.init(d1, cfg.out_classes, 3, 1, 1, rng);
  }
}

template <typename T>
FeaturePyramid<T> Utae<T>::forward(const Tensor<T>& images_in,
                                   const Tensor<int64_t>& dates_in,
                                   const Tensor<T>& pad_mask_in, bool training) {
  Tensor<T> images = images_in;
  Tensor<int64_t> dates = dates_in;
  Tensor<T> pad_mask = pad_mask_in;
  if (cfg.ablation == Ablation::single_date)
    slice_single_date(images_in, dates_in, pad_mask_in, cfg.single_date_day,
                      &images, &dates, &pad_mask);

  const Shape& s = images.shape();
  check(s.size() == 5, ErrorCode::ShapeError, "forward wants [B,T,C,H,W]");
  int64_t b = s[0], t = s[1], c = s[2], h = s[3], w = s[4];
  check(c == cfg.in_channels, ErrorCode::ShapeMismatch, "channel count");
  int L = cfg.levels();
  int64_t div = 1 << (L - 1);
  check(h % div == 0 && w % div == 0, ErrorCode::ShapeError,
        "H and W must be divisible by 2^(L-1)");

  // frame mask (real frames of the flattened [B*T] batch) for encoder BN stats
  Tensor<T> frame_mask = pad_mask.reshaped({b * t});
  const Tensor<T>* fm =
      cfg.ablation == Ablation::batchnorm_encoder ? &frame_mask : nullptr;

  FeaturePyramid<T> pyr;
  // (a) shared per-frame spatial encoder
  Var<T> x = Var<T>::constant(images.reshaped({b * t, c, h, w}));
  pyr.e.push_back(in_block.forward(x, training, fm));
  for (int l = 1; l < L; ++l)
    pyr.e.push_back(down[size_t(l - 1)].forward(pyr.e.back(), training, fm));

  // (b) temporal attention at the lowest resolution
  int64_t hl = h / div, wl = w / div;
  int64_t cl = cfg.encoder_widths.back();
  int64_t g = cfg.heads;
  Var<T> a_low;  // [B,G,T,HL,WL]
  if (cfg.ablation == Ablation::single_date) {
    a_low = Var<T>::constant(Tensor<T>::full({b, g, t, hl, wl}, T(1)));
  } else {
    Var<T> e_low = reshape(pyr.e.back(), {b, t, cl, hl, wl});
    Var<T> e_pix = reshape(permute(e_low, {0, 3, 4, 1, 2}), {b * hl * wl, t, cl});
    // per-pixel copies of the pad mask and the positional encoding
    Tensor<T> pix_mask{Shape{b * hl * wl, t}};
    Tensor<T> pe_bt = nn::sinusoid_position_encoding<T>(dates, cfg.d_model,
                                                        cfg.pe_period);
    Tensor<T> pe{Shape{b * hl * wl, t, int64_t(cfg.d_model)}};
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t px = 0; px < hl * wl; ++px) {
        int64_t n = bi * hl * wl + px;
        for (int64_t tt = 0; tt < t; ++tt) pix_mask.at(n, tt) = pad_mask.at(bi, tt);
        std::copy(pe_bt.data() + bi * t * cfg.d_model,
                  pe_bt.data() + (bi + 1) * t * cfg.d_model,
                  pe.data() + n * t * cfg.d_model);
      }
    Var<T> a_pix = ltae.forward(e_pix, pix_mask, pe);  // [Npix,G,T]
    a_low = permute(reshape(a_pix, {b, hl, wl, g, t}), {0, 3, 4, 1, 2});
    if (cfg.ablation == Ablation::mean_attention) {
      // replace every head's mask by the head-average
      Tensor<T> avg{Shape{b, g, t, hl, wl}};
      const T* av = a_low.val().data();
      int64_t inner = t * hl * wl;
      for (int64_t bi = 0; bi < b; ++bi)
        for (int64_t k = 0; k < inner; ++k) {
          T acc = 0;
          for (int64_t gg = 0; gg < g; ++gg) acc += av[(bi * g + gg) * inner + k];
          acc /= T(g);
          for (int64_t gg = 0; gg < g; ++gg) avg[(bi * g + gg) * inner + k] = acc;
        }
      a_low = make_op<T>("head_mean", avg, {a_low}, [b, g, inner](Node<T>& self) {
        auto& p = *self.parents[0];
        if (!p.requires_grad) return;
        p.ensure_grad();
        const T* gr = self.grad.data();
        T* d = p.grad.data();
        for (int64_t bi = 0; bi < b; ++bi)
          for (int64_t k = 0; k < inner; ++k) {
            T acc = 0;
            for (int64_t gg = 0; gg < g; ++gg) acc += gr[(bi * g + gg) * inner + k];
            acc /= T(g);
            for (int64_t gg = 0; gg < g; ++gg) d[(bi * g + gg) * inner + k] += acc;
          }
      });
    }
  }

  // (b') interpolated masks at all levels
  bool uniform_skips = cfg.ablation == Ablation::skip_mean ||
                       cfg.ablation == Ablation::skip_mean_conv;
  pyr.a.resize(size_t(L));
  pyr.a[size_t(L - 1)] = a_low;
  for (int l = L - 2; l >= 0; --l) {
    int64_t hi = h >> l, wi = w >> l;
    if (uniform_skips) {
      Tensor<T> u{Shape{b, g, t, hi, wi}};
      for (int64_t bi = 0; bi < b; ++bi) {
        T real = 0;
        for (int64_t tt = 0; tt < t; ++tt) real += pad_mask.at(bi, tt);
        for (int64_t gg = 0; gg < g; ++gg)
          for (int64_t tt = 0; tt < t; ++tt) {
            T v = pad_mask.at(bi, tt) / real;
            T* dst = u.data() + (((bi * g + gg) * t) + tt) * hi * wi;
            std::fill(dst, dst + hi * wi, v);
          }
      }
      pyr.a[size_t(l)] = Var<T>::constant(u);
    } else {
      Var<T> flat = reshape(a_low, {b * g * t, 1, hl, wl});
      pyr.a[size_t(l)] = clamp(
          reshape(bilinear_resize(flat, hi, wi), {b, g, t, hi, wi}), T(0), T(1));
    }
  }

  // (b'') group-weighted temporal collapse + per-level 1x1 conv
  pyr.f.resize(size_t(L));
  for (int l = 0; l < L; ++l) {
    int64_t hi = h >> l, wi = w >> l;
    int64_t ci = cfg.encoder_widths[size_t(l)];
    Var<T> e_l = reshape(pyr.e[size_t(l)], {b, t, ci, hi, wi});
    Var<T> f = temporal_group_collapse(e_l, pyr.a[size_t(l)]);
    if (l == L - 1 && has_ltae())
      f = group_norm(f, cfg.heads, out_gamma, out_beta, T(1e-5));
    if (has_collapse_conv(l + 1)) f = collapse_conv[size_t(l)].forward(f);
    pyr.f[size_t(l)] = f;
  }

  // (c) convolutional decoder
  pyr.d.resize(size_t(L));
  pyr.d[size_t(L - 1)] = pyr.f[size_t(L - 1)];
  for (int l = L - 2; l >= 0; --l)
    pyr.d[size_t(l)] = up[size_t(l)].forward(pyr.d[size_t(l + 1)],
                                             pyr.f[size_t(l)], training);

  if (cfg.semantic_head) {
    Var<T> y = relu(head_norm.forward(head_a.forward(pyr.d[0]), training));
    pyr.logits = head_b.forward(y);
  }
  return pyr;
}

template <typename T>
void Utae<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  in_block.visit(p + ".enc1", v);
  for (size_t l = 0; l < down.size(); ++l)
    down[l].visit(p + ".enc" + std::to_string(l + 2), v);
  if (has_ltae()) {
    ltae.visit(p + ".ltae", v);
    v.param(p + ".ltae.out_gamma", out_gamma);
    v.param(p + ".ltae.out_beta", out_beta);
  }
  for (size_t l = 0; l < collapse_conv.size(); ++l)
    if (has_collapse_conv(int(l) + 1))
      collapse_conv[l].visit(p + ".collapse" + std::to_string(l + 1), v);
  for (size_t l = 0; l < up.size(); ++l)
    up[l].visit(p + ".dec" + std::to_string(l + 1), v);
  if (cfg.semantic_head) {
    head_a.visit(p + ".head_a", v);
    head_norm.visit(p + ".head_norm", v);
    head_b.visit(p + ".head_b", v);
  }
}

template <typename T>
int64_t Utae<T>::num_params() {
  int64_t n = 0;
  nn::Visitor<T> v;
  v.param = [&](const std::string&, Var<T>& p) { n += p.val().numel(); };
  v.buffer = [](const std::string&, Tensor<T>&) {};
  visit("utae", v);
  return n;
}

template <typename T>
void slice_single_date(const Tensor<T>& images, const Tensor<int64_t>& dates,
                       const Tensor<T>& pad_mask, int64_t day, Tensor<T>* images1,
                       Tensor<int64_t>* dates1, Tensor<T>* mask1) {
  const Shape& s = images.shape();
  int64_t b = s[0], t = s[1];
  int64_t frame = s[2] * s[3] * s[4];
  *images1 = Tensor<T>::zeros({b, 1, s[2], s[3], s[4]});
  *dates1 = Tensor<int64_t>::zeros({b, 1});
  *mask1 = Tensor<T>::full({b, 1}, T(1));
  for (int64_t bi = 0; bi < b; ++bi) {
    int64_t best = -1;
    int64_t best_d = std::numeric_limits<int64_t>::max();
    for (int64_t tt = 0; tt < t; ++tt) {
      if (pad_mask.at(bi, tt) == T(0)) continue;
      int64_t d = std::abs(dates.at(bi, tt) - day);
      if (d < best_d) {
        best_d = d;
        best = tt;
      }
    }
    check(best >= 0, ErrorCode::DegenerateSequence,
          "sample with no real acquisitions");
    std::copy(images.data() + (bi * t + best) * frame,
              images.data() + (bi * t + best + 1) * frame,
              images1->data() + bi * frame);
    dates1->at(bi, 0) = dates.at(bi, best);
  }
}

template <typename T>
core::PaddedBatch to_batch_precision(const core::PaddedBatch& b) {
  return b;
}

template struct ResidualConvBlock<float>;
template struct ResidualConvBlock<double>;
template struct DownBlock<float>;
template struct DownBlock<double>;
template struct UpBlock<float>;
template struct UpBlock<double>;
template struct Ltae<float>;
template struct Ltae<double>;
template struct Utae<float>;
template struct Utae<double>;
template void slice_single_date<float>(const Tensor<float>&, const Tensor<int64_t>&,
                                       const Tensor<float>&, int64_t, Tensor<float>*,
                                       Tensor<int64_t>*, Tensor<float>*);
template void slice_single_date<double>(const Tensor<double>&, const Tensor<int64_t>&,
                                        const Tensor<double>&, int64_t, Tensor<double>*,
                                        Tensor<int64_t>*, Tensor<double>*);

}  // namespace sitspan::utae
