#include "sitspan/panmerge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "sitspan/viz.hpp"

namespace sitspan::panmerge {

void PanopticMap::validate() const {
  check(semantic.shape() == instance.shape(), ErrorCode::ShapeMismatch,
        "semantic/instance shape mismatch");
  int32_t max_id = 0;
  for (int64_t k = 0; k < instance.numel(); ++k) {
    int32_t id = instance[k];
    check(id >= 0, ErrorCode::FormatError, "negative instance id");
    check((id > 0) == (semantic[k] != 0), ErrorCode::FormatError,
          "instance id > 0 iff semantic != background");
    max_id = std::max(max_id, id);
  }
  check(int64_t(max_id) == int64_t(instances.size()), ErrorCode::FormatError,
        "instance ids must be contiguous from 1");
  std::vector<bool> seen(size_t(max_id) + 1, false);
  for (int64_t k = 0; k < instance.numel(); ++k)
    if (instance[k] > 0) seen[size_t(instance[k])] = true;
  for (int32_t id = 1; id <= max_id; ++id)
    check(seen[size_t(id)], ErrorCode::FormatError,
          "instance id " + std::to_string(id) + " has no pixels");
}

template <typename T>
Tensor<uint8_t> binarize(const Tensor<T>& lc, double threshold) {
  Tensor<uint8_t> out{lc.shape()};
  for (int64_t k = 0; k < lc.numel(); ++k)
    out[k] = double(lc[k]) >= threshold ? 1 : 0;
  return out;
}

template <typename T>
MaskProposal to_mask_proposal(const paps::Proposal<T>& p, double threshold) {
  MaskProposal m;
  m.quality = p.center.q;
  m.center_i = p.center.i;
  m.center_j = p.center.j;
  m.r0 = p.box.r0;
  m.c0 = p.box.c0;
  m.mask = binarize(p.mask, threshold);
  m.class_probs = p.class_probs;
  return m;
}

Resolved resolve_overlaps(const std::vector<MaskProposal>& proposals,
                          double quality_threshold, int64_t h, int64_t w) {
  std::vector<size_t> order;
  for (size_t k = 0; k < proposals.size(); ++k)
    if (proposals[k].quality >= quality_threshold) order.push_back(k);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const auto& pa = proposals[a];
    const auto& pb = proposals[b];
    if (pa.quality != pb.quality) return pa.quality > pb.quality;
    if (pa.center_i != pb.center_i) return pa.center_i < pb.center_i;
    return pa.center_j < pb.center_j;
  });

  Resolved out;
  out.owner = Tensor<int32_t>::full({h, w}, -1);
  // ownership pass: the highest quality mask claims each pixel
  std::vector<int64_t> original(proposals.size(), 0), kept(proposals.size(), 0);
  Tensor<int32_t> claim = Tensor<int32_t>::full({h, w}, -1);
  for (size_t rank = 0; rank < order.size(); ++rank) {
    const auto& p = proposals[order[rank]];
    int64_t nr = p.mask.dim(0), nc = p.mask.dim(1);
    for (int64_t r = 0; r < nr; ++r)
      for (int64_t c = 0; c < nc; ++c) {
        if (!p.mask.at(r, c)) continue;
        ++original[order[rank]];
        int64_t i = p.r0 + r, j = p.c0 + c;
        if (i < 0 || i >= h || j < 0 || j >= w) continue;
        if (claim.at(i, j) < 0) {
          claim.at(i, j) = int32_t(rank);
          ++kept[order[rank]];
        }
      }
  }
  // removal pass: strictly more than 50% lost -> removed altogether; the
  // pixels are not released to lower-quality masks
  std::vector<int32_t> new_rank(order.size(), -1);
  for (size_t rank = 0; rank < order.size(); ++rank) {
    size_t k = order[rank];
    if (original[k] == 0) continue;  // empty binarized mask
    if (2 * kept[k] < original[k]) continue;
    new_rank[rank] = int32_t(out.surviving.size());
    out.surviving.push_back(k);
  }
  for (int64_t px = 0; px < h * w; ++px) {
    int32_t r = claim[px];
    if (r >= 0) out.owner[px] = new_rank[size_t(r)];
  }
  return out;
}

PanopticMap to_panoptic(const std::vector<MaskProposal>& proposals,
                        const Resolved& resolved, int64_t h, int64_t w) {
  PanopticMap map;
  map.semantic = Tensor<int32_t>::zeros({h, w});
  map.instance = Tensor<int32_t>::zeros({h, w});
  for (size_t s = 0; s < resolved.surviving.size(); ++s) {
    const auto& p = proposals[resolved.surviving[s]];
    InstanceRecord rec;
    rec.id = int32_t(s) + 1;
    rec.quality = p.quality;
    int64_t arg = 0;
    for (size_t c = 1; c < p.class_probs.size(); ++c)
      if (p.class_probs[c] > p.class_probs[size_t(arg)]) arg = int64_t(c);
    rec.sem_class = int32_t(arg) + 1;
    map.instances.push_back(rec);
  }
  for (int64_t px = 0; px < h * w; ++px) {
    int32_t s = resolved.owner[px];
    if (s < 0) continue;
    map.instance[px] = s + 1;
    map.semantic[px] = map.instances[size_t(s)].sem_class;
  }
  map.validate();
  return map;
}

PanopticMap merge(const std::vector<MaskProposal>& proposals,
                  double quality_threshold, int64_t h, int64_t w) {
  Resolved r = resolve_overlaps(proposals, quality_threshold, h, w);
  return to_panoptic(proposals, r, h, w);
}

namespace {

struct DetCounts {
  int64_t tp = 0, fp = 0, fn = 0;
};

DetCounts detection_counts(const PanopticMap& pred, const core::SITSSample& truth) {
  DetCounts out;
  int64_t n_pred = int64_t(pred.instances.size());
  int64_t hw = pred.instance.numel();
  std::vector<int64_t> pred_area(size_t(n_pred) + 1, 0);
  for (int64_t k = 0; k < hw; ++k) ++pred_area[size_t(pred.instance[k])];

  std::vector<int64_t> gt_area;
  std::vector<bool> gt_void;
  std::vector<const core::ParcelRecord*> gt;
  for (const auto& p : truth.parcels) {
    int64_t area = 0;
    for (int64_t k = 0; k < hw; ++k)
      if (truth.instances[k] == p.id) ++area;
    gt.push_back(&p);
    gt_area.push_back(area);
    gt_void.push_back(p.is_void);
  }

  std::vector<bool> gt_matched(gt.size(), false);
  for (int32_t pid = 1; pid <= n_pred; ++pid) {
    bool matched = false, ignored = false;
    for (size_t g = 0; g < gt.size(); ++g) {
      int64_t inter = 0;
      for (int64_t k = 0; k < hw; ++k)
        if (pred.instance[k] == pid && truth.instances[k] == gt[g]->id) ++inter;
      if (inter == 0) continue;
      double iou = double(inter) /
                   double(pred_area[size_t(pid)] + gt_area[g] - inter);
      if (iou > 0.5) {
        if (gt_void[g]) {
          ignored = true;  // void-matched predictions leave the evaluation
        } else {
          matched = true;
          gt_matched[g] = true;
        }
        break;  // IoU > 0.5 holds for at most one target
      }
    }
    if (matched)
      ++out.tp;
    else if (!ignored)
      ++out.fp;
  }
  for (size_t g = 0; g < gt.size(); ++g)
    if (!gt_void[g] && !gt_matched[g]) ++out.fn;
  return out;
}

}  // namespace

double tune_quality_threshold(
    const std::vector<std::vector<MaskProposal>>& proposals_per_image,
    const std::vector<const core::SITSSample*>& truth, int64_t h, int64_t w,
    double grid_start, double grid_stop, double grid_step) {
  check(!truth.empty() && proposals_per_image.size() == truth.size(),
        ErrorCode::ThresholdError, "empty or mismatched validation set");
  double best_f1 = -1.0, best_thr = grid_start;
  for (double thr = grid_start; thr <= grid_stop + 1e-9; thr += grid_step) {
    DetCounts total;
    for (size_t i = 0; i < truth.size(); ++i) {
      PanopticMap pred = merge(proposals_per_image[i], thr, h, w);
      DetCounts c = detection_counts(pred, *truth[i]);
      total.tp += c.tp;
      total.fp += c.fp;
      total.fn += c.fn;
    }
    double denom = double(2 * total.tp + total.fp + total.fn);
    double f1 = denom > 0 ? 2.0 * double(total.tp) / denom : 0.0;
    if (f1 > best_f1 + 1e-12) {  // ties keep the lowest threshold
      best_f1 = f1;
      best_thr = thr;
    }
  }
  return best_thr;
}

void save_panoptic(const std::filesystem::path& base, const PanopticMap& map) {
  int64_t h = map.semantic.dim(0), w = map.semantic.dim(1);
  Tensor<uint16_t> sem{Shape{h, w}}, inst{Shape{h, w}};
  for (int64_t k = 0; k < h * w; ++k) {
    sem[k] = uint16_t(map.semantic[k]);
    inst[k] = uint16_t(map.instance[k]);
  }
  viz::png_write_gray16(std::filesystem::path(base.string() + "_sem.png"), sem);
  viz::png_write_gray16(std::filesystem::path(base.string() + "_inst.png"), inst);
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : map.instances)
    j.push_back({{"id", r.id}, {"class", r.sem_class}, {"quality", r.quality}});
  std::ofstream f(base.string() + "_instances.json");
  f << j.dump(1) << "\n";
}

PanopticMap load_panoptic(const std::filesystem::path& base) {
  Tensor<uint16_t> sem =
      viz::png_read_gray16(std::filesystem::path(base.string() + "_sem.png"));
  Tensor<uint16_t> inst =
      viz::png_read_gray16(std::filesystem::path(base.string() + "_inst.png"));
  PanopticMap map;
  map.semantic = Tensor<int32_t>{sem.shape()};
  map.instance = Tensor<int32_t>{inst.shape()};
  for (int64_t k = 0; k < sem.numel(); ++k) {
    map.semantic[k] = sem[k];
    map.instance[k] = inst[k];
  }
  std::ifstream f(base.string() + "_instances.json");
  check(bool(f), ErrorCode::IndexError,
        "missing instance table " + base.string() + "_instances.json");
  nlohmann::json j;
  f >> j;
  for (const auto& r : j) {
    InstanceRecord rec;
    rec.id = r.at("id").get<int32_t>();
    rec.sem_class = r.at("class").get<int32_t>();
    rec.quality = r.at("quality").get<double>();
    map.instances.push_back(rec);
  }
  return map;
}

template Tensor<uint8_t> binarize<float>(const Tensor<float>&, double);
template Tensor<uint8_t> binarize<double>(const Tensor<double>&, double);
template MaskProposal to_mask_proposal<float>(const paps::Proposal<float>&, double);
template MaskProposal to_mask_proposal<double>(const paps::Proposal<double>&, double);

}  // namespace sitspan::panmerge
