#pragma once

#include <string>

#include <json.hpp>

#include "sitspan/paps.hpp"
#include "sitspan/sitsgen.hpp"
#include "sitspan/utae.hpp"

namespace sitspan::harness {

enum class Task { semantic, panoptic };

struct SchedulePhase {
  int epochs = 0;
  double lr = 0;
};

struct RunConfig {
  Task task = Task::semantic;
  uint64_t seed = 0;
  std::string out_dir = "runs/run";

  // dataset
  std::string source = "synthetic";  // or "pastis"
  std::string root;                  // pastis root; env PASTIS_ROOT fallback
  int fold = 1;
  sitsgen::GenConfig gen;
  int gen_samples = 20;

  // model
  utae::UtaeConfig utae;
  paps::PapsConfig paps;
  double quality_threshold = -1;  // < 0 means "tune on the validation split"

  // training
  int batch_size = 4;
  std::vector<SchedulePhase> schedule;
  std::string eval_split = "val";  // split scored each epoch for model selection
  int eval_every = 1;
  double stop_metric = -1;  // early stop once the tracked metric reaches this
  bool augment = false;

  int total_epochs() const;
  double lr_at(int epoch) const;
  void validate() const;
};

// Parses a config JSON; unknown keys are rejected, missing keys take the
// paper-default values (semantic: 100 epochs at 1e-3; panoptic: 50 at 1e-2
// then 50 at 1e-3; batch size 4).
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config_file(const std::string& path);
nlohmann::json config_to_json(const RunConfig& cfg);
uint64_t config_hash(const RunConfig& cfg);

}  // namespace sitspan::harness
