#pragma once

#include <string>
#include <vector>

#include "sitspan/tensor.hpp"

namespace sitspan::core {

// Semantic label convention: 0 = background, 1..K = crop classes,
// K+1 = void. The void class is excluded from every loss and metric.
struct LabelSpec {
  int crop_classes = 18;  // K

  int background() const { return 0; }
  int void_label() const { return crop_classes + 1; }
  int num_semantic() const { return crop_classes + 2; }  // classes to predict
};

struct ParcelRecord {
  int32_t id = 0;
  int64_t center_i = 0, center_j = 0;  // inside the image
  double bbox_h = 1, bbox_w = 1;       // tight box of the mask, in pixels
  Tensor<uint8_t> mask;                // H x W
  int32_t crop_class = 1;              // in [1, K]
  bool is_void = false;
};

// One geo-referenced image sequence with panoptic annotations.
struct SITSSample {
  Tensor<float> images;       // [T,C,H,W] reflectance
  Tensor<int64_t> dates;      // [T] day offsets, strictly increasing
  Tensor<int32_t> semantic;   // [H,W]
  Tensor<int32_t> instances;  // [H,W], 0 = background
  std::vector<ParcelRecord> parcels;
  std::string sample_id;
  int fold = 1;

  int64_t t() const { return images.dim(0); }
  int64_t channels() const { return images.dim(1); }
  int64_t height() const { return images.dim(2); }
  int64_t width() const { return images.dim(3); }

  // Checks every documented invariant; throws on violation.
  void validate(const LabelSpec& labels) const;
};

struct PaddedBatch {
  Tensor<float> images;    // [B,Tmax,C,H,W]; padded frames are all-zero
  Tensor<float> pad_mask;  // [B,Tmax], 1 = real acquisition (prefix of ones)
  Tensor<int64_t> dates;   // [B,Tmax]
  std::vector<const SITSSample*> targets;

  int64_t batch() const { return images.dim(0); }
  int64_t t_max() const { return images.dim(1); }
};

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
};

// Stacks samples into a batch, appending all-zero frames to shorter
// sequences. Order is preserved.
PaddedBatch pad_and_batch(const std::vector<const SITSSample*>& samples);

// Recovers sample b's images from a batch (drops padded frames).
Tensor<float> unpad_images(const PaddedBatch& batch, int64_t b);

// Per-pixel argmax over the parcels' Gaussian kernels (sigma = bbox/20,
// floored). Ties go to the lowest parcel id; empty input gives all zeros.
Tensor<int32_t> pixel_to_parcel_map(const std::vector<ParcelRecord>& parcels,
                                    int64_t h, int64_t w,
                                    double sigma_floor = 0.5);

// (x - mean) / std on real frames; padded frames stay zero.
PaddedBatch normalize_channels(const PaddedBatch& batch, const ChannelStats& stats);

}  // namespace sitspan::core
