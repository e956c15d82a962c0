#pragma once

#include <filesystem>

#include "sitspan/config.hpp"
#include "sitspan/metrics.hpp"

namespace sitspan::harness {

struct Dataset {
  std::vector<core::SITSSample> storage;
  std::vector<const core::SITSSample*> train, val, test;
  core::ChannelStats stats;  // training folds only
  core::LabelSpec labels;

  const std::vector<const core::SITSSample*>& split(const std::string& name) const;
};

Dataset load_dataset(const RunConfig& cfg);

core::PaddedBatch make_batch(const std::vector<const core::SITSSample*>& samples,
                             const core::ChannelStats& stats);

struct Models {
  utae::Utae<float> backbone;
  paps::PapsHeads<float> heads;
  bool panoptic = false;

  void init(const RunConfig& cfg);
  void visit(nn::Visitor<float>& v);
  int64_t backbone_params();
  int64_t paps_params();
};

struct EpochLog {
  int epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double metric = -1;  // mIoU (semantic) or PQ (panoptic) on cfg.eval_split
  double seconds = 0;
};

struct TrainResult {
  std::vector<EpochLog> logs;
  double best_metric = -1;
  int best_epoch = -1;
  int epochs_run = 0;
  std::filesystem::path best_dir, last_dir;
};

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg,
                     Models& models, nn::Adam<float>* opt,
                     const nlohmann::json& extra);
nlohmann::json load_checkpoint(const std::filesystem::path& dir,
                               const RunConfig& cfg, Models& models,
                               nn::Adam<float>* opt);

// Deterministic training given (config, seed): fixed init order and a
// per-epoch permutation derived from (seed, epoch). Keeps the best-metric
// checkpoint in <out>/checkpoints/best and the latest in .../last; appends
// one JSON line per epoch to <out>/log.jsonl. Aborts with Divergence (after
// a diagnostic snapshot) if the loss stops being finite.
TrainResult train(const RunConfig& cfg, bool resume = false);

metrics::SemanticReport eval_semantic(Models& models, const Dataset& ds,
                                      const std::vector<const core::SITSSample*>& split,
                                      int batch_size);
metrics::PanopticQuality eval_panoptic(Models& models, const Dataset& ds,
                                       const std::vector<const core::SITSSample*>& split,
                                       int batch_size, double threshold,
                                       metrics::PanopticStats* stats_out = nullptr);

// Proposal sets for one split, one vector per image (used by threshold tuning).
std::vector<std::vector<panmerge::MaskProposal>> collect_proposals(
    Models& models, const Dataset& ds,
    const std::vector<const core::SITSSample*>& split, int batch_size);

nlohmann::json evaluate(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
                        const std::string& split_name,
                        const std::filesystem::path& out_dir);

void predict(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
             const std::string& sample_id, const std::filesystem::path& out_dir);

nlohmann::json ablate(const RunConfig& base, const std::vector<std::string>& variants,
                      const std::filesystem::path& out_dir);

}  // namespace sitspan::harness
