#pragma once

#include <array>
#include <vector>

#include "sitspan/autograd.hpp"

namespace sitspan::ag {

// Elementwise (same shape unless noted).
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> divide(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> adds(const Var<T>& a, T s);
template <typename T> Var<T> muls(const Var<T>& a, T s);
template <typename T> Var<T> relu(const Var<T>& a);
template <typename T> Var<T> sigmoid(const Var<T>& a);
template <typename T> Var<T> softplus(const Var<T>& a);
template <typename T> Var<T> exp_(const Var<T>& a);
template <typename T> Var<T> log_(const Var<T>& a);
template <typename T> Var<T> abs_(const Var<T>& a);
template <typename T> Var<T> clamp(const Var<T>& a, T lo, T hi);

// Reductions to scalar.
template <typename T> Var<T> sum(const Var<T>& a);
template <typename T> Var<T> mean(const Var<T>& a);

// Shape ops.
template <typename T> Var<T> reshape(const Var<T>& a, Shape shape);
template <typename T> Var<T> permute(const Var<T>& a, const std::vector<int>& perm);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int dim);
template <typename T> Var<T> take_row(const Var<T>& a, int64_t row);  // [M,D] -> [D]
// [..,H,W] maps: crop sample b of a [B,H,W] map to [nr,nc]
template <typename T> Var<T> crop_map(const Var<T>& a, int64_t b, int64_t r0,
                                      int64_t nr, int64_t c0, int64_t nc);

// Dense layers.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b,
                                    int stride, int pad);
template <typename T> Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& w,
                                              const Var<T>& b, int stride, int pad);

// Normalizations. gamma/beta are per-channel affine parameters.
template <typename T> Var<T> group_norm(const Var<T>& x, int groups, const Var<T>& gamma,
                                        const Var<T>& beta, T eps);
template <typename T> Var<T> instance_norm(const Var<T>& x, const Var<T>& gamma,
                                           const Var<T>& beta, T eps);
// Training-mode batch norm over all dims but dim 1. Batch statistics are
// written to *out_mean / *out_var (biased variance). frame_mask, when given,
// restricts statistics to rows with mask[n] != 0.
template <typename T> Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma,
                                              const Var<T>& beta, T eps,
                                              Tensor<T>* out_mean, Tensor<T>* out_var,
                                              const Tensor<T>* frame_mask = nullptr);
template <typename T> Var<T> batch_norm_eval(const Var<T>& x, const Var<T>& gamma,
                                             const Var<T>& beta, const Tensor<T>& rmean,
                                             const Tensor<T>& rvar, T eps);
// Group norm on [N,T,C] rows where statistics run over (channels-of-group x
// real timesteps); mask is [N,T] with 1 for real acquisitions.
template <typename T> Var<T> masked_group_norm_tc(const Var<T>& x, int groups,
                                                  const Var<T>& gamma, const Var<T>& beta,
                                                  const Tensor<T>& mask, T eps);

// Attention pieces.
// keys [N,T,G,dk] x master query [G,dk] -> scores [N,G,T], scaled by 1/sqrt(dk)
template <typename T> Var<T> attention_scores(const Var<T>& keys, const Var<T>& query);
// softmax over the last (time) axis restricted to mask[n,t] != 0
template <typename T> Var<T> masked_softmax_time(const Var<T>& scores, const Tensor<T>& mask);
// e [B,T,C,H,W], a [B,G,T,H,W] -> f [B,C,H,W]; channels split into G groups
template <typename T> Var<T> temporal_group_collapse(const Var<T>& e, const Var<T>& a);

// Half-pixel-centered bilinear resize of the trailing two dims of [N,C,h,w].
template <typename T> Var<T> bilinear_resize(const Var<T>& x, int64_t H, int64_t W);
template <typename T> Var<T> bilinear_resize_hw(const Var<T>& x, int64_t H, int64_t W);

// d [B,C,H,W] gathered at (b,i,j) coords -> [M,C]
template <typename T> Var<T> gather_pixels(const Var<T>& d,
                                           const std::vector<std::array<int64_t, 3>>& coords);

// Losses.
template <typename T> Var<T> cross_entropy_mean(const Var<T>& logits,
                                                const Tensor<int32_t>& target,
                                                int ignore_label);
template <typename T> Var<T> cross_entropy_rows_sum(const Var<T>& logits,
                                                    const Tensor<int32_t>& target);
template <typename T> Var<T> bce_mean(const Var<T>& probs, const Tensor<T>& target, T eps);
// Penalty-reduced focal loss on centerness heatmaps; per-sample normalization
// by the parcel count, mean over the batch. Samples with zero parcels
// contribute zero loss and zero gradient.
template <typename T> Var<T> center_focal_loss(const Var<T>& m, const Tensor<T>& target,
                                               const std::vector<int64_t>& n_parcels,
                                               T beta, T eps);

// Raw GEMM wrapper (row-major): C = alpha * op(A) op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, T alpha,
          const T* a, int64_t lda, const T* b, int64_t ldb, T beta, T* c, int64_t ldc);

}  // namespace sitspan::ag
