#include "sitspan/pastis_io.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

#include "sitspan/npy.hpp"

namespace sitspan::pastis_io {

using nlohmann::json;

FoldScheme fold_scheme(int fold) {
  check(fold >= 1 && fold <= 5, ErrorCode::InvalidFold,
        "fold must be in 1..5, got " + std::to_string(fold));
  auto wrap = [](int v) { return (v - 1) % 5 + 1; };
  FoldScheme s;
  s.train = {wrap(fold), wrap(fold + 1), wrap(fold + 2)};
  s.val = wrap(fold + 3);
  s.test = wrap(fold + 4);
  return s;
}

DatasetIndex load_index(const std::filesystem::path& root) {
  auto meta_path = root / "metadata.json";
  std::ifstream f(meta_path);
  if (!f) fail(ErrorCode::IndexError, "missing metadata file " + meta_path.string());
  json meta;
  try {
    f >> meta;
  } catch (const std::exception& e) {
    fail(ErrorCode::FormatError,
         "corrupt metadata " + meta_path.string() + ": " + e.what());
  }

  DatasetIndex idx;
  idx.root = root;
  try {
    idx.labels.crop_classes = meta.at("n_crop_classes").get<int>();
    if (meta.contains("class_names"))
      idx.class_names = meta.at("class_names").get<std::vector<std::string>>();
    for (const auto& p : meta.at("patches")) {
      PatchEntry e;
      e.sample_id = p.at("id").get<std::string>();
      e.fold = p.at("fold").get<int>();
      check(e.fold >= 1 && e.fold <= 5, ErrorCode::FormatError,
            e.sample_id + ": fold outside 1..5");
      e.dates = p.at("dates").get<std::vector<int64_t>>();
      e.t = int64_t(e.dates.size());
      for (const auto& pp : p.at("parcels")) {
        ParcelMeta m;
        m.id = pp.at("id").get<int32_t>();
        m.center_i = pp.at("center").at(0).get<int64_t>();
        m.center_j = pp.at("center").at(1).get<int64_t>();
        m.bbox_h = pp.at("bbox_size").at(0).get<double>();
        m.bbox_w = pp.at("bbox_size").at(1).get<double>();
        m.crop_class = pp.at("crop_class").get<int32_t>();
        m.is_void = pp.value("void", false);
        e.parcels.push_back(m);
      }
      e.data_file = root / "DATA" / (e.sample_id + ".npy");
      e.sem_file = root / "ANNOT" / (e.sample_id + "_sem.npy");
      e.inst_file = root / "ANNOT" / (e.sample_id + "_inst.npy");
      idx.entries.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::FormatError,
         "metadata schema error in " + meta_path.string() + ": " + e.what());
  }
  for (const auto& e : idx.entries)
    for (const auto* file : {&e.data_file, &e.sem_file, &e.inst_file})
      check(std::filesystem::exists(*file), ErrorCode::IndexError,
            "missing patch file " + file->string());
  // enumeration-order independence
  std::sort(idx.entries.begin(), idx.entries.end(),
            [](const PatchEntry& a, const PatchEntry& b) {
              return a.sample_id < b.sample_id;
            });
  return idx;
}

core::SITSSample load_sample(const DatasetIndex& index, const PatchEntry& entry) {
  core::SITSSample s;
  s.sample_id = entry.sample_id;
  s.fold = entry.fold;
  s.images = npy::load_as<float>(entry.data_file);
  check(s.images.ndim() == 4, ErrorCode::FormatError,
        entry.data_file.string() + ": expected [T,C,H,W]");
  check(s.images.dim(0) == entry.t, ErrorCode::FormatError,
        entry.data_file.string() + ": T disagrees with metadata dates");
  s.dates = Tensor<int64_t>::zeros({entry.t});
  for (int64_t i = 0; i < entry.t; ++i) s.dates[i] = entry.dates[size_t(i)];
  s.semantic = npy::load_as<int32_t>(entry.sem_file);
  s.instances = npy::load_as<int32_t>(entry.inst_file);

  int64_t h = s.height(), w = s.width();
  for (const auto& m : entry.parcels) {
    core::ParcelRecord p;
    p.id = m.id;
    p.center_i = m.center_i;
    p.center_j = m.center_j;
    p.bbox_h = m.bbox_h;
    p.bbox_w = m.bbox_w;
    p.crop_class = m.crop_class;
    p.is_void = m.is_void;
    p.mask = Tensor<uint8_t>::zeros({h, w});
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        if (s.instances.at(i, j) == m.id) p.mask.at(i, j) = 1;
    s.parcels.push_back(std::move(p));
  }
  s.validate(index.labels);
  return s;
}

std::array<std::vector<const PatchEntry*>, 3> fold_split(const DatasetIndex& index,
                                                         int fold) {
  FoldScheme s = fold_scheme(fold);
  std::array<std::vector<const PatchEntry*>, 3> out;
  for (const auto& e : index.entries) {
    if (e.fold == s.val)
      out[1].push_back(&e);
    else if (e.fold == s.test)
      out[2].push_back(&e);
    else
      out[0].push_back(&e);
  }
  return out;
}

namespace {

struct Welford {
  double mean = 0, m2 = 0;
  int64_t n = 0;
  void add(double x) {
    ++n;
    double d = x - mean;
    mean += d / double(n);
    m2 += d * (x - mean);
  }
};

core::ChannelStats finalize(std::vector<Welford>& acc) {
  check(!acc.empty() && acc[0].n > 0, ErrorCode::EmptyTrainingSet,
        "no pixels to compute normalization statistics from");
  core::ChannelStats stats;
  for (auto& a : acc) {
    stats.mean.push_back(a.mean);
    double var = a.n > 0 ? a.m2 / double(a.n) : 0.0;
    stats.std.push_back(std::max(1e-6, std::sqrt(var)));
  }
  return stats;
}

void accumulate_sample(const core::SITSSample& s, std::vector<Welford>& acc) {
  int64_t c = s.channels(), sp = s.height() * s.width();
  for (int64_t tt = 0; tt < s.t(); ++tt)
    for (int64_t ch = 0; ch < c; ++ch) {
      const float* px = s.images.data() + (tt * c + ch) * sp;
      for (int64_t k = 0; k < sp; ++k) acc[size_t(ch)].add(double(px[k]));
    }
}

}  // namespace

core::ChannelStats compute_norm_stats(const DatasetIndex& index, int fold) {
  auto split = fold_split(index, fold);
  check(!split[0].empty(), ErrorCode::EmptyTrainingSet,
        "fold " + std::to_string(fold) + " has no training patches");
  std::vector<Welford> acc;
  for (const auto* e : split[0]) {
    core::SITSSample s = load_sample(index, *e);
    if (acc.empty()) acc.resize(size_t(s.channels()));
    accumulate_sample(s, acc);
  }
  return finalize(acc);
}

core::ChannelStats compute_norm_stats(
    const std::vector<const core::SITSSample*>& samples) {
  check(!samples.empty(), ErrorCode::EmptyTrainingSet,
        "no samples to compute normalization statistics from");
  std::vector<Welford> acc(size_t(samples[0]->channels()));
  for (const auto* s : samples) accumulate_sample(*s, acc);
  return finalize(acc);
}

void write_dataset(const std::filesystem::path& root,
                   const std::vector<core::SITSSample>& samples,
                   const core::LabelSpec& labels,
                   std::vector<std::string> class_names) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "DATA");
  fs::create_directories(root / "ANNOT");
  if (class_names.empty()) {
    class_names.push_back("background");
    for (int k = 1; k <= labels.crop_classes; ++k)
      class_names.push_back("class_" + std::to_string(k));
    class_names.push_back("void");
  }

  json meta;
  meta["format"] = "sitspan-pastis-v1";
  meta["n_crop_classes"] = labels.crop_classes;
  meta["class_names"] = class_names;
  meta["patches"] = json::array();
  for (const auto& s : samples) {
    npy::save_tensor(root / "DATA" / (s.sample_id + ".npy"), s.images);
    npy::save_tensor(root / "ANNOT" / (s.sample_id + "_sem.npy"), s.semantic);
    npy::save_tensor(root / "ANNOT" / (s.sample_id + "_inst.npy"), s.instances);
    json p;
    p["id"] = s.sample_id;
    p["fold"] = s.fold;
    std::vector<int64_t> dates(size_t(s.t()));
    for (int64_t i = 0; i < s.t(); ++i) dates[size_t(i)] = s.dates[i];
    p["dates"] = dates;
    p["parcels"] = json::array();
    for (const auto& pc : s.parcels) {
      json pp;
      pp["id"] = pc.id;
      pp["center"] = {pc.center_i, pc.center_j};
      pp["bbox_size"] = {pc.bbox_h, pc.bbox_w};
      pp["crop_class"] = pc.crop_class;
      pp["void"] = pc.is_void;
      p["parcels"].push_back(pp);
    }
    meta["patches"].push_back(p);
  }
  std::ofstream f(root / "metadata.json");
  check(bool(f), ErrorCode::IndexError,
        "cannot write " + (root / "metadata.json").string());
  f << meta.dump(1) << "\n";
}

}  // namespace sitspan::pastis_io
