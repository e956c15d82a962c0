#include "sitspan/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sitspan/npy.hpp"
#include "sitspan/pastis_io.hpp"
#include "sitspan/viz.hpp"

namespace sitspan::harness {

using nlohmann::json;

const std::vector<const core::SITSSample*>& Dataset::split(
    const std::string& name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  fail(ErrorCode::ConfigError, "unknown split '" + name + "'");
}

Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds;
  if (cfg.source == "synthetic") {
    ds.storage = sitsgen::generate_dataset(cfg.gen, cfg.gen_samples);
    ds.labels = cfg.gen.labels();
  } else {
    check(!cfg.root.empty(), ErrorCode::IndexError,
          "no dataset root given (set dataset.root or PASTIS_ROOT)");
    pastis_io::DatasetIndex idx = pastis_io::load_index(cfg.root);
    ds.labels = idx.labels;
    ds.storage.reserve(idx.entries.size());
    for (const auto& e : idx.entries)
      ds.storage.push_back(pastis_io::load_sample(idx, e));
  }
  pastis_io::FoldScheme scheme = pastis_io::fold_scheme(cfg.fold);
  for (const auto& s : ds.storage) {
    if (s.fold == scheme.val)
      ds.val.push_back(&s);
    else if (s.fold == scheme.test)
      ds.test.push_back(&s);
    else
      ds.train.push_back(&s);
  }
  check(!ds.train.empty(), ErrorCode::EmptyTrainingSet, "training split is empty");
  ds.stats = pastis_io::compute_norm_stats(ds.train);
  return ds;
}

core::PaddedBatch make_batch(const std::vector<const core::SITSSample*>& samples,
                             const core::ChannelStats& stats) {
  return core::normalize_channels(core::pad_and_batch(samples), stats);
}

void Models::init(const RunConfig& cfg) {
  Rng rng(cfg.seed * 0x9e3779b97f4a7c15ull + 17);
  panoptic = cfg.task == Task::panoptic;
  backbone.init(cfg.utae, rng);
  if (panoptic) heads.init(cfg.paps, rng);
}

void Models::visit(nn::Visitor<float>& v) {
  backbone.visit("utae", v);
  if (panoptic) heads.visit("paps", v);
}

int64_t Models::backbone_params() { return backbone.num_params(); }

int64_t Models::paps_params() { return panoptic ? heads.num_params() : 0; }

// ---------------------------------------------------------------------------
// checkpointing: manifest.json + data.bin (raw little-endian float32)
// ---------------------------------------------------------------------------

namespace {

struct NamedRefs {
  std::vector<std::pair<std::string, ag::Var<float>>> params;
  std::vector<std::pair<std::string, Tensor<float>*>> buffers;
};

NamedRefs collect(Models& models) {
  NamedRefs out;
  nn::Visitor<float> v;
  v.param = [&](const std::string& n, ag::Var<float>& p) {
    out.params.emplace_back(n, p);
  };
  v.buffer = [&](const std::string& n, Tensor<float>& t) {
    out.buffers.emplace_back(n, &t);
  };
  models.visit(v);
  return out;
}

json shape_json(const Shape& s) {
  json a = json::array();
  for (int64_t d : s) a.push_back(d);
  return a;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg,
                     Models& models, nn::Adam<float>* opt, const json& extra) {
  std::filesystem::create_directories(dir);
  NamedRefs refs = collect(models);

  json manifest;
  manifest["format"] = "sitspan-ckpt-v1";
  manifest["config_hash"] = hex64(config_hash(cfg));
  manifest["extra"] = extra;
  json tensors = json::array();
  std::ofstream bin(dir / "data.bin", std::ios::binary);
  check(bool(bin), ErrorCode::IndexError, "cannot write checkpoint to " + dir.string());
  int64_t offset = 0;
  auto dump = [&](const std::string& name, const Tensor<float>& t) {
    tensors.push_back({{"name", name}, {"shape", shape_json(t.shape())},
                       {"offset", offset}});
    bin.write(reinterpret_cast<const char*>(t.data()),
              std::streamsize(t.numel() * sizeof(float)));
    offset += t.numel() * int64_t(sizeof(float));
  };
  for (auto& [name, p] : refs.params) dump(name, p.val());
  for (auto& [name, t] : refs.buffers) dump(name, *t);
  if (opt) {
    manifest["adam_step"] = opt->t;
    for (size_t i = 0; i < opt->params.size(); ++i) {
      dump("adam.m:" + opt->names[i], opt->m[i]);
      dump("adam.v:" + opt->names[i], opt->v[i]);
    }
  }
  manifest["tensors"] = tensors;
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << "\n";
}

json load_checkpoint(const std::filesystem::path& dir, const RunConfig& cfg,
                     Models& models, nn::Adam<float>* opt) {
  std::ifstream mf(dir / "manifest.json");
  check(bool(mf), ErrorCode::IndexError,
        "missing checkpoint manifest in " + dir.string());
  json manifest;
  mf >> manifest;
  check(manifest.value("format", "") == "sitspan-ckpt-v1", ErrorCode::FormatError,
        "unknown checkpoint format");
  check(manifest.value("config_hash", "") == hex64(config_hash(cfg)),
        ErrorCode::IncompatibleCheckpoint,
        "checkpoint was produced by a different configuration");

  std::ifstream bin(dir / "data.bin", std::ios::binary);
  check(bool(bin), ErrorCode::IndexError, "missing checkpoint data in " + dir.string());
  std::unordered_map<std::string, std::pair<int64_t, Shape>> entries;
  for (const auto& t : manifest.at("tensors")) {
    Shape shape;
    for (const auto& d : t.at("shape")) shape.push_back(d.get<int64_t>());
    entries[t.at("name").get<std::string>()] = {t.at("offset").get<int64_t>(),
                                                shape};
  }
  auto read_into = [&](const std::string& name, Tensor<float>& dst) {
    auto it = entries.find(name);
    check(it != entries.end(), ErrorCode::IncompatibleCheckpoint,
          "checkpoint is missing tensor '" + name + "'");
    check(it->second.second == dst.shape(), ErrorCode::IncompatibleCheckpoint,
          "shape mismatch for tensor '" + name + "'");
    bin.seekg(it->second.first);
    bin.read(reinterpret_cast<char*>(dst.data()),
             std::streamsize(dst.numel() * sizeof(float)));
    check(bool(bin), ErrorCode::FormatError, "truncated checkpoint data");
  };
  NamedRefs refs = collect(models);
  for (auto& [name, p] : refs.params) read_into(name, p.val());
  for (auto& [name, t] : refs.buffers) read_into(name, *t);
  if (opt) {
    opt->t = manifest.value("adam_step", int64_t(0));
    for (size_t i = 0; i < opt->params.size(); ++i) {
      read_into("adam.m:" + opt->names[i], opt->m[i]);
      read_into("adam.v:" + opt->names[i], opt->v[i]);
    }
  }
  return manifest.value("extra", json::object());
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

namespace {

Tensor<int32_t> semantic_targets(const std::vector<const core::SITSSample*>& samples) {
  int64_t b = int64_t(samples.size());
  int64_t h = samples[0]->height(), w = samples[0]->width();
  Tensor<int32_t> t{Shape{b, h, w}};
  for (int64_t i = 0; i < b; ++i)
    std::memcpy(t.data() + i * h * w, samples[size_t(i)]->semantic.data(),
                size_t(h * w) * sizeof(int32_t));
  return t;
}

// lateral flip of one sample (images, annotations, parcel geometry)
core::SITSSample flip_lr(const core::SITSSample& s) {
  core::SITSSample out = s;
  out.images = s.images.clone();
  out.semantic = s.semantic.clone();
  out.instances = s.instances.clone();
  int64_t w = s.width(), h = s.height();
  for (int64_t t = 0; t < s.t(); ++t)
    for (int64_t c = 0; c < s.channels(); ++c)
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w / 2; ++j)
          std::swap(out.images.at(t, c, i, j), out.images.at(t, c, i, w - 1 - j));
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w / 2; ++j) {
      std::swap(out.semantic.at(i, j), out.semantic.at(i, w - 1 - j));
      std::swap(out.instances.at(i, j), out.instances.at(i, w - 1 - j));
    }
  for (auto& p : out.parcels) {
    p.mask = p.mask.clone();
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w / 2; ++j)
        std::swap(p.mask.at(i, j), p.mask.at(i, w - 1 - j));
    p.center_j = w - 1 - p.center_j;
  }
  return out;
}

double eval_metric(Models& models, const Dataset& ds, const RunConfig& cfg,
                   const std::vector<const core::SITSSample*>& split) {
  if (split.empty()) return -1;
  if (!models.panoptic)
    return eval_semantic(models, ds, split, cfg.batch_size).miou;
  double thr = cfg.quality_threshold >= 0 ? cfg.quality_threshold : 0.2;
  return eval_panoptic(models, ds, split, cfg.batch_size, thr).mean_pq;
}

}  // namespace

TrainResult train(const RunConfig& cfg, bool resume) {
  cfg.validate();
  namespace fs = std::filesystem;
  Dataset ds = load_dataset(cfg);
  Models models;
  models.init(cfg);

  nn::Adam<float> opt;
  {
    nn::Visitor<float> v;
    v.param = [&](const std::string& n, ag::Var<float>& p) { opt.add_param(n, p); };
    v.buffer = [](const std::string&, Tensor<float>&) {};
    models.visit(v);
  }

  fs::path out(cfg.out_dir);
  fs::create_directories(out / "checkpoints");
  fs::path best_dir = out / "checkpoints" / "best";
  fs::path last_dir = out / "checkpoints" / "last";

  TrainResult result;
  result.best_dir = best_dir;
  result.last_dir = last_dir;
  int start_epoch = 0;
  if (resume) {
    json extra = load_checkpoint(last_dir, cfg, models, &opt);
    start_epoch = extra.value("epoch", -1) + 1;
    result.best_metric = extra.value("best_metric", -1.0);
    result.best_epoch = extra.value("best_epoch", -1);
  }
  std::ofstream log(out / "log.jsonl", resume ? std::ios::app : std::ios::trunc);
  check(bool(log), ErrorCode::IndexError, "cannot write training log");

  json stats_json = {{"mean", ds.stats.mean}, {"std", ds.stats.std}};
  int total = cfg.total_epochs();
  for (int epoch = start_epoch; epoch < total; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    opt.lr = float(cfg.lr_at(epoch));

    // deterministic per-epoch order derived from (seed, epoch)
    Rng shuffle_rng(cfg.seed * 1315423911ull + uint64_t(epoch) + 1);
    std::vector<size_t> perm(ds.train.size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[size_t(shuffle_rng.uniform_int(int64_t(i)))]);

    double loss_sum = 0;
    int64_t steps = 0;
    for (size_t pos = 0; pos < perm.size(); pos += size_t(cfg.batch_size)) {
      std::vector<const core::SITSSample*> picked;
      for (size_t k = pos; k < std::min(perm.size(), pos + size_t(cfg.batch_size)); ++k)
        picked.push_back(ds.train[perm[k]]);
      std::vector<core::SITSSample> augmented;  // owns flipped copies
      if (cfg.augment) {
        augmented.reserve(picked.size());
        for (auto*& s : picked)
          if (shuffle_rng.uniform() < 0.5) {
            augmented.push_back(flip_lr(*s));
            s = &augmented.back();
          }
      }
      core::PaddedBatch batch = make_batch(picked, ds.stats);

      ag::Var<float> loss;
      auto pyr = models.backbone.forward(batch.images, batch.dates,
                                         batch.pad_mask, /*training=*/true);
      if (models.panoptic) {
        auto breakdown = paps::training_loss(models.heads, pyr, batch.targets, true);
        loss = breakdown.total;
      } else {
        Tensor<int32_t> targets = semantic_targets(picked);
        loss = ag::cross_entropy_mean(pyr.logits, targets, ds.labels.void_label());
      }
      double lv = double(loss.val()[0]);
      if (!std::isfinite(lv)) {
        save_checkpoint(out / "checkpoints" / "diverged", cfg, models, &opt,
                        {{"epoch", epoch}, {"loss", lv}});
        fail(ErrorCode::Divergence,
             "loss is not finite at epoch " + std::to_string(epoch) +
                 " (diagnostic snapshot written)");
      }
      loss_sum += lv;
      ++steps;
      opt.zero_grad();
      loss.backward();
      opt.step();
    }

    EpochLog el;
    el.epoch = epoch;
    el.lr = opt.lr;
    el.train_loss = steps ? loss_sum / double(steps) : 0.0;
    if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == total)
      el.metric = eval_metric(models, ds, cfg, ds.split(cfg.eval_split));
    el.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.logs.push_back(el);
    ++result.epochs_run;

    bool is_best = el.metric >= 0 && el.metric > result.best_metric;
    if (is_best) {
      result.best_metric = el.metric;
      result.best_epoch = epoch;
    }
    json extra = {{"epoch", epoch},
                  {"best_metric", result.best_metric},
                  {"best_epoch", result.best_epoch},
                  {"norm_stats", stats_json}};
    save_checkpoint(last_dir, cfg, models, &opt, extra);
    if (is_best) save_checkpoint(best_dir, cfg, models, nullptr, extra);

    json line = {{"epoch", epoch},
                 {"lr", el.lr},
                 {"train_loss", el.train_loss},
                 {"metric", el.metric},
                 {"seconds", el.seconds}};
    log << line.dump() << "\n";
    log.flush();

    if (cfg.stop_metric > 0 && el.metric >= cfg.stop_metric) break;
  }
  if (result.best_epoch < 0 && result.epochs_run > 0)
    save_checkpoint(best_dir, cfg, models, nullptr,
                    {{"epoch", result.epochs_run - 1},
                     {"best_metric", -1.0},
                     {"best_epoch", -1},
                     {"norm_stats", stats_json}});
  return result;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

metrics::SemanticReport eval_semantic(Models& models, const Dataset& ds,
                                      const std::vector<const core::SITSSample*>& split,
                                      int batch_size) {
  check(!split.empty(), ErrorCode::EmptyEvaluation, "empty evaluation split");
  int k = ds.labels.num_semantic();
  Tensor<int64_t> counts = Tensor<int64_t>::zeros({k, k});
  for (size_t pos = 0; pos < split.size(); pos += size_t(batch_size)) {
    std::vector<const core::SITSSample*> picked(
        split.begin() + int64_t(pos),
        split.begin() + int64_t(std::min(split.size(), pos + size_t(batch_size))));
    core::PaddedBatch batch = make_batch(picked, ds.stats);
    auto pyr = models.backbone.forward(batch.images, batch.dates, batch.pad_mask,
                                       /*training=*/false);
    const auto& logits = pyr.logits.val();  // [B,K,H,W]
    int64_t b = logits.dim(0), kk = logits.dim(1);
    int64_t sp = logits.dim(2) * logits.dim(3);
    for (int64_t bi = 0; bi < b; ++bi) {
      const core::SITSSample* s = picked[size_t(bi)];
      for (int64_t px = 0; px < sp; ++px) {
        int32_t truth = s->semantic[px];
        if (truth == ds.labels.void_label()) continue;
        int64_t arg = 0;
        float best = logits[bi * kk * sp + px];
        for (int64_t c = 1; c < kk; ++c) {
          float v = logits[(bi * kk + c) * sp + px];
          if (v > best) {
            best = v;
            arg = c;
          }
        }
        ++counts.at(truth, arg);
      }
    }
  }
  return metrics::semantic_metrics_from_confusion(counts, ds.labels);
}

std::vector<std::vector<panmerge::MaskProposal>> collect_proposals(
    Models& models, const Dataset& ds,
    const std::vector<const core::SITSSample*>& split, int batch_size) {
  std::vector<std::vector<panmerge::MaskProposal>> out(split.size());
  for (size_t pos = 0; pos < split.size(); pos += size_t(batch_size)) {
    std::vector<const core::SITSSample*> picked(
        split.begin() + int64_t(pos),
        split.begin() + int64_t(std::min(split.size(), pos + size_t(batch_size))));
    core::PaddedBatch batch = make_batch(picked, ds.stats);
    auto pyr = models.backbone.forward(batch.images, batch.dates, batch.pad_mask,
                                       /*training=*/false);
    auto proposals = paps::propose(models.heads, pyr, /*min_quality=*/0.01);
    for (auto& p : proposals)
      out[pos + size_t(p.b)].push_back(panmerge::to_mask_proposal(p));
  }
  return out;
}

metrics::PanopticQuality eval_panoptic(Models& models, const Dataset& ds,
                                       const std::vector<const core::SITSSample*>& split,
                                       int batch_size, double threshold,
                                       metrics::PanopticStats* stats_out) {
  check(!split.empty(), ErrorCode::EmptyEvaluation, "empty evaluation split");
  auto proposals = collect_proposals(models, ds, split, batch_size);
  metrics::PanopticStats stats(ds.labels.crop_classes);
  for (size_t i = 0; i < split.size(); ++i) {
    int64_t h = split[i]->height(), w = split[i]->width();
    panmerge::PanopticMap map = panmerge::merge(proposals[i], threshold, h, w);
    stats.merge(metrics::panoptic_match(map, *split[i], ds.labels));
  }
  if (stats_out) *stats_out = stats;
  return metrics::panoptic_quality(stats);
}

json evaluate(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
              const std::string& split_name, const std::filesystem::path& out_dir) {
  Dataset ds = load_dataset(cfg);
  Models models;
  models.init(cfg);
  json extra = load_checkpoint(ckpt_dir, cfg, models, nullptr);
  if (extra.contains("norm_stats")) {
    ds.stats.mean = extra["norm_stats"]["mean"].get<std::vector<double>>();
    ds.stats.std = extra["norm_stats"]["std"].get<std::vector<double>>();
  }
  const auto& split = ds.split(split_name);
  check(!split.empty(), ErrorCode::EmptyEvaluation,
        "split '" + split_name + "' is empty");

  json report;
  if (cfg.task == Task::semantic) {
    metrics::SemanticReport rep = eval_semantic(models, ds, split, cfg.batch_size);
    metrics::write_semantic_report(out_dir, rep);
    report["oa"] = rep.oa;
    report["miou"] = rep.miou;
  } else {
    double thr = cfg.quality_threshold;
    if (thr < 0) {
      const auto& val = ds.val.empty() ? split : ds.val;
      auto val_props = collect_proposals(models, ds, val, cfg.batch_size);
      thr = panmerge::tune_quality_threshold(val_props, val, val[0]->height(),
                                             val[0]->width());
    }
    metrics::PanopticStats stats;
    metrics::PanopticQuality pq =
        eval_panoptic(models, ds, split, cfg.batch_size, thr, &stats);
    std::vector<std::string> names;
    for (int c = 1; c <= ds.labels.crop_classes; ++c)
      names.push_back("class_" + std::to_string(c));
    metrics::write_panoptic_report(out_dir, pq, names);
    report["SQ"] = pq.mean_sq;
    report["RQ"] = pq.mean_rq;
    report["PQ"] = pq.mean_pq;
    report["quality_threshold"] = thr;
  }
  report["split"] = split_name;
  report["n_samples"] = split.size();
  std::filesystem::create_directories(out_dir);
  std::ofstream(out_dir / "evaluate.json") << report.dump(1) << "\n";
  return report;
}

void predict(const RunConfig& cfg, const std::filesystem::path& ckpt_dir,
             const std::string& sample_id, const std::filesystem::path& out_dir) {
  Dataset ds = load_dataset(cfg);
  Models models;
  models.init(cfg);
  json extra = load_checkpoint(ckpt_dir, cfg, models, nullptr);
  if (extra.contains("norm_stats")) {
    ds.stats.mean = extra["norm_stats"]["mean"].get<std::vector<double>>();
    ds.stats.std = extra["norm_stats"]["std"].get<std::vector<double>>();
  }
  const core::SITSSample* sample = nullptr;
  for (const auto& s : ds.storage)
    if (s.sample_id == sample_id) sample = &s;
  check(sample != nullptr, ErrorCode::IndexError,
        "sample '" + sample_id + "' not found");

  std::filesystem::create_directories(out_dir);
  core::PaddedBatch batch = make_batch({sample}, ds.stats);
  auto pyr = models.backbone.forward(batch.images, batch.dates, batch.pad_mask,
                                     /*training=*/false);

  // attention montage: G rows x T columns of lowest-level masks
  {
    const auto& a = pyr.a.back().val();  // [1,G,T,HL,WL]
    int64_t g = a.dim(1), t = a.dim(2), hl = a.dim(3), wl = a.dim(4);
    Tensor<float> tiles{Shape{g * t, hl, wl}};
    std::memcpy(tiles.data(), a.data(), size_t(a.numel()) * sizeof(float));
    viz::save_montage_png(out_dir / "attention_masks.png", tiles, g, t);
  }

  if (cfg.task == Task::semantic) {
    const auto& logits = pyr.logits.val();
    int64_t k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
    Tensor<int32_t> sem{Shape{h, w}};
    for (int64_t px = 0; px < h * w; ++px) {
      int64_t arg = 0;
      float best = logits[px];
      for (int64_t c = 1; c < k; ++c)
        if (logits[c * h * w + px] > best) {
          best = logits[c * h * w + px];
          arg = c;
        }
      sem[px] = int32_t(arg);
    }
    viz::save_class_map_png(out_dir / "semantic.png", sem, ds.labels.crop_classes);
  } else {
    ag::Var<float> m = models.heads.heatmap(pyr.d[0], false);
    ag::Var<float> z = models.heads.saliency(pyr.d[0], false);
    int64_t h = m.val().dim(1), w = m.val().dim(2);
    Tensor<float> heat{Shape{h, w}};
    std::memcpy(heat.data(), m.val().data(), size_t(h * w) * sizeof(float));
    viz::save_heatmap_png(out_dir / "heatmap.png", heat);
    Tensor<float> sal{Shape{h, w}};
    for (int64_t px = 0; px < h * w; ++px)
      sal[px] = 1.f / (1.f + std::exp(-z.val()[px]));
    viz::save_heatmap_png(out_dir / "saliency.png", sal);

    auto proposals = paps::propose(models.heads, pyr, 0.01);
    std::vector<panmerge::MaskProposal> mp;
    for (auto& p : proposals) mp.push_back(panmerge::to_mask_proposal(p));
    double thr = cfg.quality_threshold >= 0 ? cfg.quality_threshold : 0.2;
    panmerge::PanopticMap map = panmerge::merge(mp, thr, h, w);
    panmerge::save_panoptic(out_dir / "panoptic", map);
    viz::save_instance_map_png(out_dir / "panoptic_overlay.png", map.instance);
    viz::save_class_map_png(out_dir / "panoptic_semantic.png", map.semantic,
                            ds.labels.crop_classes);
    std::ofstream(out_dir / "proposals.jsonl")
        << paps::proposals_to_jsonl(proposals, 0.4);
  }
}

json ablate(const RunConfig& base, const std::vector<std::string>& variants,
            const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  json table = json::array();
  std::ofstream csv(out_dir / "ablations.csv");
  csv << "variant,params,best_metric,best_epoch,epochs\n";
  for (const auto& name : variants) {
    RunConfig cfg = base;
    cfg.utae.ablation = utae::ablation_from_string(name);  // UnknownAblation here
    cfg.out_dir = (out_dir / name).string();
    Models probe;
    probe.init(cfg);
    int64_t params = probe.backbone_params() + probe.paps_params();
    TrainResult r = train(cfg);
    json row = {{"variant", name},
                {"params", params},
                {"best_metric", r.best_metric},
                {"best_epoch", r.best_epoch},
                {"epochs", r.epochs_run}};
    table.push_back(row);
    csv << name << "," << params << "," << r.best_metric << "," << r.best_epoch
        << "," << r.epochs_run << "\n";
  }
  std::ofstream(out_dir / "ablations.json") << table.dump(1) << "\n";
  return table;
}

}  // namespace sitspan::harness
