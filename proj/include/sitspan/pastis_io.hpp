#pragma once

#include <array>
#include <filesystem>

#include "sitspan/core.hpp"

namespace sitspan::pastis_io {

// On-disk layout:
//   <root>/DATA/<id>.npy        float32 [T,C,H,W]
//   <root>/ANNOT/<id>_sem.npy   int32   [H,W]
//   <root>/ANNOT/<id>_inst.npy  int32   [H,W]   (0 = background)
//   <root>/metadata.json        ids, folds, dates, parcel records, names
// Parcel masks are rebuilt from the instance map on load.

struct ParcelMeta {
  int32_t id = 0;
  int64_t center_i = 0, center_j = 0;
  double bbox_h = 1, bbox_w = 1;
  int32_t crop_class = 1;
  bool is_void = false;
};

struct PatchEntry {
  std::string sample_id;
  int fold = 1;
  int64_t t = 0;
  std::vector<int64_t> dates;
  std::vector<ParcelMeta> parcels;
  std::filesystem::path data_file, sem_file, inst_file;
};

struct DatasetIndex {
  std::filesystem::path root;
  core::LabelSpec labels;
  std::vector<std::string> class_names;  // background, crops..., void
  std::vector<PatchEntry> entries;       // sorted by sample_id
};

struct FoldScheme {
  std::array<int, 3> train;
  int val = 0, test = 0;
};

// Official cyclic 5-fold scheme: fold I trains on 1-2-3, validates on 4,
// tests on 5; subsequent folds rotate.
FoldScheme fold_scheme(int fold);

DatasetIndex load_index(const std::filesystem::path& root);

core::SITSSample load_sample(const DatasetIndex& index, const PatchEntry& entry);

// (train, val, test) entry lists for one fold; a partition of the index.
std::array<std::vector<const PatchEntry*>, 3> fold_split(const DatasetIndex& index,
                                                         int fold);

// Per-channel mean/std over the training folds (real frames only; Welford
// accumulation, std floored at 1e-6).
core::ChannelStats compute_norm_stats(const DatasetIndex& index, int fold);
core::ChannelStats compute_norm_stats(const std::vector<const core::SITSSample*>& samples);

void write_dataset(const std::filesystem::path& root,
                   const std::vector<core::SITSSample>& samples,
                   const core::LabelSpec& labels,
                   std::vector<std::string> class_names = {});

}  // namespace sitspan::pastis_io
