#pragma once

#include "sitspan/core.hpp"
#include "sitspan/nn.hpp"

namespace sitspan::utae {

enum class Ablation {
  full,
  mean_attention,
  skip_mean,
  skip_mean_conv,
  batchnorm_encoder,
  single_date,
};

Ablation ablation_from_string(const std::string& s);
std::string to_string(Ablation a);

struct UtaeConfig {
  int in_channels = 10;
  std::vector<int> encoder_widths{64, 64, 64, 128};
  std::vector<int> decoder_widths{32, 32, 64, 128};
  int out_classes = 20;  // semantic head channels (K_total)
  int heads = 16;        // G
  int d_k = 4;
  int d_model = 256;     // attention width
  int encoder_groups = 4;
  double pe_period = 1000.0;
  Ablation ablation = Ablation::full;
  int64_t single_date_day = 200;  // acquisition targeted by the single_date cut
  bool semantic_head = true;

  int levels() const { return int(encoder_widths.size()); }
  void validate() const;
};

// Per-level maps of one forward pass. e is stored frame-flat [B*T,C_l,H_l,W_l];
// a as [B,G,T,H_l,W_l]; f and d as [B,*,H_l,W_l].
template <typename T>
struct FeaturePyramid {
  std::vector<ag::Var<T>> e;
  std::vector<ag::Var<T>> a;
  std::vector<ag::Var<T>> f;
  std::vector<ag::Var<T>> d;
  ag::Var<T> logits;  // [B,K,H,W] when the semantic head is enabled
};

// conv3x3 (in->out) + norm + relu, then a residual conv3x3 (out->out) + norm
template <typename T>
struct ResidualConvBlock {
  nn::Conv2d<T> conv_a, conv_b;
  nn::Norm2d<T> norm_a, norm_b;

  void init(int64_t cin, int64_t cout, nn::NormKind kind, int groups, Rng& rng);
  ag::Var<T> forward(const ag::Var<T>& x, bool training,
                     const Tensor<T>* frame_mask);
  void visit(const std::string& p, nn::Visitor<T>& v);
};

template <typename T>
struct DownBlock {
  nn::Conv2d<T> down;  // k=4, s=2
  nn::Norm2d<T> down_norm;
  ResidualConvBlock<T> block;

  void init(int64_t cin, int64_t cout, nn::NormKind kind, int groups, Rng& rng);
  ag::Var<T> forward(const ag::Var<T>& x, bool training,
                     const Tensor<T>* frame_mask);
  void visit(const std::string& p, nn::Visitor<T>& v);
};

template <typename T>
struct UpBlock {
  nn::ConvTranspose2d<T> up;  // k=4, s=2
  nn::Norm2d<T> up_norm;
  ResidualConvBlock<T> block;

  void init(int64_t cin, int64_t cout, int64_t skip, Rng& rng);
  ag::Var<T> forward(const ag::Var<T>& x, const ag::Var<T>& skip, bool training);
  void visit(const std::string& p, nn::Visitor<T>& v);
};

// Pixel-wise lightweight temporal attention: masked group-norm on the input,
// linear projection plus sinusoidal date encoding, per-head keys against a
// learned master query, masked softmax over real timesteps.
template <typename T>
struct Ltae {
  ag::Var<T> in_gamma, in_beta;
  nn::Linear<T> proj;
  nn::Linear<T> keys;
  ag::Var<T> query;  // [G, d_k]
  int heads = 16, d_k = 4;
  double pe_period = 1000.0;

  void init(int64_t channels, int heads, int d_k, int64_t d_model,
            double pe_period, Rng& rng);
  // e_pix [Npix,T,C], pix_mask [Npix,T], pe table [Npix,T,d_model]
  ag::Var<T> forward(const ag::Var<T>& e_pix, const Tensor<T>& pix_mask,
                     const Tensor<T>& pe);
  void visit(const std::string& p, nn::Visitor<T>& v);
};

template <typename T>
struct Utae {
  UtaeConfig cfg;
  ResidualConvBlock<T> in_block;
  std::vector<DownBlock<T>> down;
  Ltae<T> ltae;
  ag::Var<T> out_gamma, out_beta;  // group norm on the collapsed lowest level
  std::vector<nn::Conv2d<T>> collapse_conv;  // 1x1, width C_l
  std::vector<UpBlock<T>> up;
  nn::Conv2d<T> head_a;
  nn::Norm2d<T> head_norm;
  nn::Conv2d<T> head_b;

  void init(const UtaeConfig& cfg, Rng& rng);
  FeaturePyramid<T> forward(const Tensor<T>& images, const Tensor<int64_t>& dates,
                            const Tensor<T>& pad_mask, bool training);
  void visit(const std::string& p, nn::Visitor<T>& v);
  int64_t num_params();

  bool has_ltae() const { return cfg.ablation != Ablation::single_date; }
  bool has_collapse_conv(int level) const {
    return !(cfg.ablation == Ablation::skip_mean && level < cfg.levels());
  }
};

// Selects, per sample, the real frame whose date is nearest to `day`.
template <typename T>
void slice_single_date(const Tensor<T>& images, const Tensor<int64_t>& dates,
                       const Tensor<T>& pad_mask, int64_t day, Tensor<T>* images1,
                       Tensor<int64_t>* dates1, Tensor<T>* mask1);

template <typename T>
core::PaddedBatch to_batch_precision(const core::PaddedBatch& b);

}  // namespace sitspan::utae
