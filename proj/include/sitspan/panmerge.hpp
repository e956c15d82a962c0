#pragma once

#include <filesystem>

#include "sitspan/core.hpp"
#include "sitspan/paps.hpp"

namespace sitspan::panmerge {

// A binarized instance proposal placed in the image frame.
struct MaskProposal {
  double quality = 0;
  int64_t center_i = 0, center_j = 0;  // deterministic tie-breaks
  int64_t r0 = 0, c0 = 0;
  Tensor<uint8_t> mask;             // [nr,nc], already thresholded
  std::vector<double> class_probs;  // K entries for classes 1..K
};

struct InstanceRecord {
  int32_t id = 0;
  int32_t sem_class = 0;
  double quality = 0;
};

struct PanopticMap {
  Tensor<int32_t> semantic;  // [H,W]
  Tensor<int32_t> instance;  // [H,W], 0 = background, ids contiguous from 1
  std::vector<InstanceRecord> instances;

  void validate() const;
};

// l_c >= threshold (boundary included).
template <typename T>
Tensor<uint8_t> binarize(const Tensor<T>& lc, double threshold = 0.4);

template <typename T>
MaskProposal to_mask_proposal(const paps::Proposal<T>& p, double threshold = 0.4);

struct Resolved {
  Tensor<int32_t> owner;          // [H,W], -1 = unowned, else surviving index
  std::vector<size_t> surviving;  // indices into the input, quality-descending
};

// Pixel ownership by descending quality (ties: center row asc, col asc), then
// one removal pass: a mask that lost strictly more than half of its pixels is
// dropped and its pixels become background. Proposals under the quality
// threshold are dropped first; empty masks are discarded.
Resolved resolve_overlaps(const std::vector<MaskProposal>& proposals,
                          double quality_threshold, int64_t h, int64_t w);

PanopticMap to_panoptic(const std::vector<MaskProposal>& proposals,
                        const Resolved& resolved, int64_t h, int64_t w);

PanopticMap merge(const std::vector<MaskProposal>& proposals,
                  double quality_threshold, int64_t h, int64_t w);

// Grid search maximizing the class-agnostic parcel detection F-score
// (IoU > 0.5 match against non-void parcels; ties take the lowest value).
// Proposals/truth are given per validation image.
double tune_quality_threshold(
    const std::vector<std::vector<MaskProposal>>& proposals_per_image,
    const std::vector<const core::SITSSample*>& truth, int64_t h, int64_t w,
    double grid_start = 0.0, double grid_stop = 0.9, double grid_step = 0.05);

// Serialization: <base>_sem.png + <base>_inst.png (16-bit grayscale) and
// <base>_instances.json (id, class, quality per instance).
void save_panoptic(const std::filesystem::path& base, const PanopticMap& map);
PanopticMap load_panoptic(const std::filesystem::path& base);

}  // namespace sitspan::panmerge
