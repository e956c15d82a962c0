#include "sitspan/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace sitspan::harness {

using nlohmann::json;

int RunConfig::total_epochs() const {
  int n = 0;
  for (const auto& p : schedule) n += p.epochs;
  return n;
}

double RunConfig::lr_at(int epoch) const {
  int e = epoch;
  for (const auto& p : schedule) {
    if (e < p.epochs) return p.lr;
    e -= p.epochs;
  }
  return schedule.empty() ? 1e-3 : schedule.back().lr;
}

void RunConfig::validate() const {
  check(batch_size >= 1, ErrorCode::ConfigError, "batch_size >= 1");
  check(!schedule.empty(), ErrorCode::ConfigError, "empty training schedule");
  for (const auto& p : schedule)
    check(p.epochs >= 0 && p.lr > 0, ErrorCode::ConfigError, "bad schedule phase");
  check(fold >= 1 && fold <= 5, ErrorCode::InvalidFold, "fold must be in 1..5");
  check(source == "synthetic" || source == "pastis", ErrorCode::ConfigError,
        "dataset source must be synthetic or pastis");
  check(eval_split == "val" || eval_split == "train" || eval_split == "test",
        ErrorCode::ConfigError, "eval split must be train/val/test");
  if (task == Task::semantic)
    check(quality_threshold < 0 && !paps.multiplicative_saliency,
          ErrorCode::ConfigError, "semantic task forbids PaPs flags");
  utae.validate();
  gen.validate();
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    check(known.count(it.key()) > 0, ErrorCode::ConfigError,
          "unknown config key '" + it.key() + "' in " + where);
}

}  // namespace

RunConfig parse_config(const json& j) {
  RunConfig cfg;
  try {
    reject_unknown(j, {"task", "seed", "out", "dataset", "model", "paps", "train"},
                   "top level");
    std::string task = j.value("task", "semantic");
    check(task == "semantic" || task == "panoptic", ErrorCode::ConfigError,
          "task must be semantic or panoptic");
    cfg.task = task == "semantic" ? Task::semantic : Task::panoptic;
    cfg.seed = j.value("seed", uint64_t(0));
    cfg.out_dir = j.value("out", std::string("runs/run"));

    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      reject_unknown(d, {"source", "root", "fold", "synthetic"}, "dataset");
      cfg.source = d.value("source", std::string("synthetic"));
      cfg.root = d.value("root", std::string());
      cfg.fold = d.value("fold", 1);
      if (d.contains("synthetic")) {
        const json& g = d.at("synthetic");
        reject_unknown(g,
                       {"seed", "height", "width", "t_min", "t_max", "n_classes",
                        "parcel_density", "cloud_prob", "noise_std", "channels",
                        "class_margin_days", "n_samples"},
                       "dataset.synthetic");
        cfg.gen.seed = g.value("seed", uint64_t(0));
        cfg.gen.height = g.value("height", int64_t(64));
        cfg.gen.width = g.value("width", int64_t(64));
        cfg.gen.t_min = g.value("t_min", 8);
        cfg.gen.t_max = g.value("t_max", 16);
        cfg.gen.n_classes = g.value("n_classes", 5);
        cfg.gen.parcel_density = g.value("parcel_density", 3.0);
        cfg.gen.cloud_prob = g.value("cloud_prob", 0.2);
        cfg.gen.noise_std = g.value("noise_std", 0.02);
        cfg.gen.channels = g.value("channels", 10);
        cfg.gen.class_margin_days = g.value("class_margin_days", 20.0);
        cfg.gen_samples = g.value("n_samples", 20);
      }
    }
    if (cfg.root.empty()) {
      const char* env = std::getenv("PASTIS_ROOT");
      if (env) cfg.root = env;
    }

    if (j.contains("model")) {
      const json& m = j.at("model");
      reject_unknown(m,
                     {"in_channels", "encoder_widths", "decoder_widths", "heads",
                      "d_k", "d_model", "encoder_groups", "pe_period", "ablation",
                      "single_date_day"},
                     "model");
      cfg.utae.in_channels = m.value("in_channels", 10);
      if (m.contains("encoder_widths"))
        cfg.utae.encoder_widths = m.at("encoder_widths").get<std::vector<int>>();
      if (m.contains("decoder_widths"))
        cfg.utae.decoder_widths = m.at("decoder_widths").get<std::vector<int>>();
      cfg.utae.heads = m.value("heads", 16);
      cfg.utae.d_k = m.value("d_k", 4);
      cfg.utae.d_model = m.value("d_model", 256);
      cfg.utae.encoder_groups = m.value("encoder_groups", 4);
      cfg.utae.pe_period = m.value("pe_period", 1000.0);
      cfg.utae.ablation =
          utae::ablation_from_string(m.value("ablation", std::string("full")));
      cfg.utae.single_date_day = m.value("single_date_day", int64_t(200));
    }

    if (j.contains("paps")) {
      const json& p = j.at("paps");
      reject_unknown(p,
                     {"shape_size", "head_width", "mlp_hidden", "class_hidden",
                      "mask_cnn_width", "multiplicative_saliency", "sigma_floor",
                      "focal_beta", "quality_threshold"},
                     "paps");
      check(cfg.task == Task::panoptic || p.empty(), ErrorCode::ConfigError,
            "semantic task forbids PaPs flags");
      cfg.paps.shape_size = p.value("shape_size", 16);
      cfg.paps.head_width = p.value("head_width", 64);
      cfg.paps.mlp_hidden = p.value("mlp_hidden", 128);
      cfg.paps.class_hidden = p.value("class_hidden", 64);
      cfg.paps.mask_cnn_width = p.value("mask_cnn_width", 16);
      cfg.paps.multiplicative_saliency = p.value("multiplicative_saliency", false);
      cfg.paps.sigma_floor = p.value("sigma_floor", 0.5);
      cfg.paps.focal_beta = p.value("focal_beta", 4.0);
      if (p.contains("quality_threshold") && p.at("quality_threshold").is_number())
        cfg.quality_threshold = p.at("quality_threshold").get<double>();
    }

    // paper defaults: semantic 100 epochs @1e-3; panoptic 50 @1e-2 + 50 @1e-3
    if (cfg.task == Task::semantic)
      cfg.schedule = {{100, 1e-3}};
    else
      cfg.schedule = {{50, 1e-2}, {50, 1e-3}};
    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t,
                     {"batch_size", "schedule", "epochs", "lr", "eval_split",
                      "eval_every", "stop_metric", "augment"},
                     "train");
      cfg.batch_size = t.value("batch_size", 4);
      if (t.contains("schedule")) {
        cfg.schedule.clear();
        for (const auto& ph : t.at("schedule"))
          cfg.schedule.push_back({ph.at(0).get<int>(), ph.at(1).get<double>()});
      } else if (t.contains("epochs") || t.contains("lr")) {
        int epochs = t.value("epochs", cfg.total_epochs());
        double lr = t.value("lr", cfg.schedule.front().lr);
        cfg.schedule = {{epochs, lr}};
      }
      cfg.eval_split = t.value("eval_split", std::string("val"));
      cfg.eval_every = t.value("eval_every", 1);
      cfg.stop_metric = t.value("stop_metric", -1.0);
      cfg.augment = t.value("augment", false);
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("config parse error: ") + e.what());
  }

  // model heads derived from the task
  if (cfg.task == Task::panoptic) {
    cfg.utae.semantic_head = false;
    cfg.paps.feature_widths = cfg.utae.decoder_widths;
    cfg.paps.num_classes = cfg.source == "synthetic" ? cfg.gen.n_classes : 18;
  } else {
    cfg.utae.semantic_head = true;
    int crops = cfg.source == "synthetic" ? cfg.gen.n_classes : 18;
    cfg.utae.out_classes = core::LabelSpec{crops}.num_semantic();
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config_file(const std::string& path) {
  std::ifstream f(path);
  check(bool(f), ErrorCode::ConfigError, "cannot open config file " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, "config is not valid JSON: " + std::string(e.what()));
  }
  return parse_config(j);
}

json config_to_json(const RunConfig& cfg) {
  json j;
  j["task"] = cfg.task == Task::semantic ? "semantic" : "panoptic";
  j["seed"] = cfg.seed;
  j["out"] = cfg.out_dir;
  j["dataset"] = {{"source", cfg.source},
                  {"root", cfg.root},
                  {"fold", cfg.fold},
                  {"synthetic",
                   {{"seed", cfg.gen.seed},
                    {"height", cfg.gen.height},
                    {"width", cfg.gen.width},
                    {"t_min", cfg.gen.t_min},
                    {"t_max", cfg.gen.t_max},
                    {"n_classes", cfg.gen.n_classes},
                    {"parcel_density", cfg.gen.parcel_density},
                    {"cloud_prob", cfg.gen.cloud_prob},
                    {"noise_std", cfg.gen.noise_std},
                    {"channels", cfg.gen.channels},
                    {"class_margin_days", cfg.gen.class_margin_days},
                    {"n_samples", cfg.gen_samples}}}};
  j["model"] = {{"in_channels", cfg.utae.in_channels},
                {"encoder_widths", cfg.utae.encoder_widths},
                {"decoder_widths", cfg.utae.decoder_widths},
                {"heads", cfg.utae.heads},
                {"d_k", cfg.utae.d_k},
                {"d_model", cfg.utae.d_model},
                {"encoder_groups", cfg.utae.encoder_groups},
                {"pe_period", cfg.utae.pe_period},
                {"ablation", utae::to_string(cfg.utae.ablation)},
                {"single_date_day", cfg.utae.single_date_day}};
  if (cfg.task == Task::panoptic) {
    j["paps"] = {{"shape_size", cfg.paps.shape_size},
                 {"head_width", cfg.paps.head_width},
                 {"mlp_hidden", cfg.paps.mlp_hidden},
                 {"class_hidden", cfg.paps.class_hidden},
                 {"mask_cnn_width", cfg.paps.mask_cnn_width},
                 {"multiplicative_saliency", cfg.paps.multiplicative_saliency},
                 {"sigma_floor", cfg.paps.sigma_floor},
                 {"focal_beta", cfg.paps.focal_beta}};
    if (cfg.quality_threshold >= 0)
      j["paps"]["quality_threshold"] = cfg.quality_threshold;
  }
  json sched = json::array();
  for (const auto& p : cfg.schedule) sched.push_back({p.epochs, p.lr});
  j["train"] = {{"batch_size", cfg.batch_size},
                {"schedule", sched},
                {"eval_split", cfg.eval_split},
                {"eval_every", cfg.eval_every},
                {"stop_metric", cfg.stop_metric},
                {"augment", cfg.augment}};
  return j;
}

uint64_t config_hash(const RunConfig& cfg) {
  // the output directory does not change what the model computes
  json j = config_to_json(cfg);
  j.erase("out");
  return fnv1a64(j.dump());
}

}  // namespace sitspan::harness
