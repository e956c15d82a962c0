#pragma once

#include "sitspan/core.hpp"
#include "sitspan/nn.hpp"
#include "sitspan/utae.hpp"

namespace sitspan::paps {

struct PapsConfig {
  std::vector<int> feature_widths{32, 32, 64, 128};  // D_l of the backbone
  int num_classes = 18;  // K crop classes
  int shape_size = 16;   // S
  int head_width = 64;   // hidden width of the heatmap/saliency conv blocks
  int mlp_hidden = 128;
  int class_hidden = 64;
  int mask_cnn_width = 16;
  bool multiplicative_saliency = false;
  double sigma_floor = 0.5;
  double focal_beta = 4.0;
  double heatmap_eps = 1e-7;

  int64_t stack_dim() const {
    int64_t n = 0;
    for (int v : feature_widths) n += v;
    return n;
  }
  void validate() const;
};

// Target centerness heatmap: pointwise max of the parcels' anisotropic
// Gaussian kernels, sigma = bbox/20 floored. Void parcels are skipped.
template <typename T>
Tensor<T> build_heatmap_target(const std::vector<core::ParcelRecord>& parcels,
                               int64_t h, int64_t w, double sigma_floor = 0.5);

struct Center {
  int64_t i = 0, j = 0;
  double q = 0;
};

// Local maxima of m (>= its 8 neighbors, replicate-padded borders), sorted by
// (q desc, i asc, j asc). Plateaus yield every plateau pixel.
template <typename T>
std::vector<Center> detect_centers(const Tensor<T>& m);

// center_of_parcel[k] = index into centers of the highest-q center whose
// pixel maps to parcels[k], or -1 when the parcel is not detected.
std::vector<int64_t> assign_centers(const std::vector<core::ParcelRecord>& parcels,
                                    const std::vector<Center>& centers,
                                    const Tensor<int32_t>& pixel_map);

// Crop geometry: a box of ceil sizes centered on (i,j), clipped to the image.
// (pr0,pc0) locate the clipped window inside the un-clipped patch.
struct Box {
  int64_t r0 = 0, c0 = 0, nr = 0, nc = 0;
  int64_t pr0 = 0, pc0 = 0;
  int64_t full_h = 0, full_w = 0;
};
Box centered_box(int64_t i, int64_t j, int64_t bh, int64_t bw, int64_t h, int64_t w);

template <typename T>
struct Proposal {
  int64_t b = 0;
  Center center;
  double size_h = 0, size_w = 0;
  std::vector<double> class_probs;  // K, sums to 1
  Box box;
  Tensor<T> mask;  // l_c in [0,1], [box.nr, box.nc]
};

template <typename T>
struct PapsHeads {
  PapsConfig cfg;
  nn::Conv2d<T> heat_a, heat_b;
  nn::Norm2d<T> heat_norm;
  nn::Conv2d<T> sal_a, sal_b;
  nn::Norm2d<T> sal_norm;
  nn::Linear<T> shape_1, shape_2;
  nn::Norm2d<T> shape_bn;
  nn::Linear<T> size_1, size_2;
  nn::Norm2d<T> size_bn;
  nn::Linear<T> class_1, class_2, class_3;
  nn::Norm2d<T> class_bn1, class_bn2;
  nn::Conv2d<T> mask_c1, mask_c2, mask_c3;
  nn::Norm2d<T> mask_in;

  void init(const PapsConfig& cfg, Rng& rng);
  void visit(const std::string& p, nn::Visitor<T>& v);
  int64_t num_params();

  ag::Var<T> heatmap(const ag::Var<T>& d1, bool training);   // [B,H,W] in (0,1)
  ag::Var<T> saliency(const ag::Var<T>& d1, bool training);  // [B,H,W] logits

  struct HeadOut {
    ag::Var<T> sizes;         // [M,2], softplus (strictly positive)
    ag::Var<T> class_logits;  // [M,K]
    ag::Var<T> shapes;        // [M,S*S] raw logits
  };
  HeadOut predict_heads(const ag::Var<T>& feats, bool training);

  // l_c for one proposal: bilinear patch resize + saliency crop, residual CNN,
  // sigmoid. The multiplicative ablation uses sigmoid(resize) * sigmoid(crop).
  ag::Var<T> assemble_shape(const ag::Var<T>& patch_logits, const ag::Var<T>& z,
                            int64_t b, const Box& box);
};

// Multi-scale feature vector for each (b,i,j): d^l read at the floor-divided
// coordinates, concatenated in level order.
template <typename T>
ag::Var<T> extract_multiscale_features(const std::vector<ag::Var<T>>& d,
                                       const std::vector<std::array<int64_t, 3>>& coords);

// Normalized L1 size loss, summed over proposals:
// sum_m |h_m - ĥ_m|/ĥ_m + |w_m - ŵ_m|/ŵ_m
template <typename T>
ag::Var<T> size_loss_sum(const ag::Var<T>& sizes, const Tensor<T>& target);

template <typename T>
struct LossBreakdown {
  ag::Var<T> total, center, cls, size, shape;
  int64_t n_detected = 0;
  int64_t n_parcels = 0;
};

// Full PaPs training loss on one batch: center focal loss plus per-detected-
// parcel class/size/shape terms normalized by |P'|.
template <typename T>
LossBreakdown<T> training_loss(PapsHeads<T>& heads, const utae::FeaturePyramid<T>& pyr,
                               const std::vector<const core::SITSSample*>& targets,
                               bool training);

// Inference: one proposal per local maximum with quality >= min_quality.
template <typename T>
std::vector<Proposal<T>> propose(PapsHeads<T>& heads,
                                 const utae::FeaturePyramid<T>& pyr,
                                 double min_quality);

// Debug dump: one JSON object per line (center, q, size, class argmax,
// run-length encoded binary mask).
template <typename T>
std::string proposals_to_jsonl(const std::vector<Proposal<T>>& proposals,
                               double binarize_threshold);

}  // namespace sitspan::paps
