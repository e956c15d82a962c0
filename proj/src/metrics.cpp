#include "sitspan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <json.hpp>

#include "sitspan/viz.hpp"

namespace sitspan::metrics {

SemanticReport semantic_metrics_from_confusion(const Tensor<int64_t>& counts,
                                               const core::LabelSpec& labels) {
  int64_t k = counts.dim(0);
  int void_label = labels.void_label();
  SemanticReport rep;
  rep.confusion.counts = counts.clone();
  int64_t total = 0, correct = 0;
  for (int64_t t = 0; t < k; ++t)
    for (int64_t p = 0; p < k; ++p) {
      total += counts.at(t, p);
      if (t == p) correct += counts.at(t, p);
    }
  check(total > 0, ErrorCode::EmptyEvaluation,
        "no valid (non-void) pixels to evaluate");
  rep.oa = double(correct) / double(total);

  rep.iou.assign(size_t(k), 0.0);
  rep.present.assign(size_t(k), false);
  double acc = 0;
  int64_t n_present = 0;
  for (int64_t c = 0; c < k; ++c) {
    int64_t tp = counts.at(c, c), fp = 0, fn = 0;
    for (int64_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fp += counts.at(o, c);
      fn += counts.at(c, o);
    }
    int64_t uni = tp + fp + fn;
    if (c == void_label || uni == 0) continue;  // void never enters the mean
    rep.present[size_t(c)] = true;
    rep.iou[size_t(c)] = double(tp) / double(uni);
    acc += rep.iou[size_t(c)];
    ++n_present;
  }
  rep.miou = n_present > 0 ? acc / double(n_present) : 0.0;
  return rep;
}

SemanticReport semantic_metrics(const Tensor<int32_t>& pred,
                                const Tensor<int32_t>& truth,
                                const core::LabelSpec& labels) {
  check(pred.shape() == truth.shape(), ErrorCode::ShapeMismatch,
        "prediction/truth shape mismatch");
  int k = labels.num_semantic();
  Tensor<int64_t> counts = Tensor<int64_t>::zeros({k, k});
  for (int64_t i = 0; i < pred.numel(); ++i) {
    int32_t t = truth[i];
    if (t == labels.void_label()) continue;  // void excluded from everything
    check(t >= 0 && t < k && pred[i] >= 0 && pred[i] < k, ErrorCode::ShapeError,
          "label out of range");
    ++counts.at(t, pred[i]);
  }
  return semantic_metrics_from_confusion(counts, labels);
}

void PanopticStats::merge(const PanopticStats& o) {
  if (tp.empty()) {
    *this = o;
    return;
  }
  check(o.n_classes() == n_classes(), ErrorCode::ShapeMismatch,
        "merging stats with different class counts");
  for (size_t c = 0; c < tp.size(); ++c) {
    tp[c] += o.tp[c];
    fp[c] += o.fp[c];
    fn[c] += o.fn[c];
    iou_sum[c] += o.iou_sum[c];
  }
}

PanopticStats panoptic_match(const panmerge::PanopticMap& pred,
                             const core::SITSSample& truth,
                             const core::LabelSpec& labels, bool void_ignore) {
  int k = labels.crop_classes;
  PanopticStats stats(k);
  int64_t hw = truth.instances.numel();
  check(pred.instance.numel() == hw, ErrorCode::ShapeMismatch,
        "prediction/truth size mismatch");

  // per-truth-parcel areas; void pixel set = pixels of void parcels
  std::map<int32_t, const core::ParcelRecord*> truth_by_id;
  for (const auto& p : truth.parcels) truth_by_id[p.id] = &p;
  std::map<int32_t, int64_t> truth_area;
  std::vector<uint8_t> void_px(size_t(hw), 0);
  for (int64_t px = 0; px < hw; ++px) {
    int32_t id = truth.instances[px];
    if (id == 0) continue;
    ++truth_area[id];
    if (truth_by_id.at(id)->is_void) void_px[size_t(px)] = 1;
  }

  int64_t n_pred = int64_t(pred.instances.size());
  std::vector<int64_t> pred_area(size_t(n_pred) + 1, 0);
  std::vector<int64_t> pred_void_inter(size_t(n_pred) + 1, 0);
  std::map<std::pair<int32_t, int32_t>, int64_t> inter;  // (pred id, truth id)
  for (int64_t px = 0; px < hw; ++px) {
    int32_t pid = pred.instance[px];
    if (pid == 0) continue;
    ++pred_area[size_t(pid)];
    if (void_px[size_t(px)]) ++pred_void_inter[size_t(pid)];
    int32_t tid = truth.instances[px];
    if (tid != 0) ++inter[{pid, tid}];
  }

  std::map<int32_t, bool> truth_matched;
  for (auto& [id, p] : truth_by_id)
    if (!p->is_void) truth_matched[id] = false;

  for (int32_t pid = 1; pid <= n_pred; ++pid) {
    int32_t cls = pred.instances[size_t(pid - 1)].sem_class;
    bool matched = false, ignored = false;
    for (auto& [key, in] : inter) {
      if (key.first != pid) continue;
      const auto* tp = truth_by_id.at(key.second);
      // prediction pixels on *other* void parcels leave the denominator
      int64_t void_other =
          pred_void_inter[size_t(pid)] - (tp->is_void ? in : 0);
      double denom =
          double(pred_area[size_t(pid)] - void_other + truth_area[key.second] - in);
      double iou = double(in) / denom;
      if (iou <= 0.5) continue;
      if (tp->is_void) {
        if (void_ignore) ignored = true;  // neither TP nor FP
        break;
      }
      if (tp->crop_class == cls) {
        matched = true;
        truth_matched[key.second] = true;
        stats.tp[size_t(cls - 1)] += 1;
        stats.iou_sum[size_t(cls - 1)] += iou;
      }
      break;  // at most one segment can pass the 0.5 bar
    }
    if (!matched && !ignored) stats.fp[size_t(cls - 1)] += 1;
  }
  for (auto& [id, was_matched] : truth_matched)
    if (!was_matched)
      stats.fn[size_t(truth_by_id.at(id)->crop_class - 1)] += 1;
  return stats;
}

PanopticQuality panoptic_quality(const PanopticStats& stats) {
  int k = stats.n_classes();
  PanopticQuality out;
  out.sq.assign(size_t(k), 0.0);
  out.rq.assign(size_t(k), 0.0);
  out.pq.assign(size_t(k), 0.0);
  out.has_sq.assign(size_t(k), false);
  out.has_rq.assign(size_t(k), false);
  double acc_sq = 0, acc_rq = 0, acc_pq = 0;
  int64_t n_sq = 0, n_rq = 0;
  for (int c = 0; c < k; ++c) {
    int64_t tp = stats.tp[size_t(c)], fp = stats.fp[size_t(c)], fn = stats.fn[size_t(c)];
    if (tp + fp + fn == 0) continue;  // class absent from truth and prediction
    double denom = double(tp) + 0.5 * double(fp) + 0.5 * double(fn);
    out.has_rq[size_t(c)] = true;
    out.rq[size_t(c)] = double(tp) / denom;
    if (tp > 0) {
      out.has_sq[size_t(c)] = true;
      out.sq[size_t(c)] = stats.iou_sum[size_t(c)] / double(tp);
      out.pq[size_t(c)] = out.sq[size_t(c)] * out.rq[size_t(c)];
      acc_sq += out.sq[size_t(c)];
      ++n_sq;
    } else {
      out.warnings.push_back("class " + std::to_string(c + 1) +
                             ": no true positives, SQ undefined (excluded)");
      out.pq[size_t(c)] = 0.0;
    }
    acc_rq += out.rq[size_t(c)];
    acc_pq += out.pq[size_t(c)];
    ++n_rq;
  }
  out.mean_sq = n_sq > 0 ? acc_sq / double(n_sq) : 0.0;
  out.mean_rq = n_rq > 0 ? acc_rq / double(n_rq) : 0.0;
  out.mean_pq = n_rq > 0 ? acc_pq / double(n_rq) : 0.0;
  if (n_rq == 0) out.warnings.push_back("no class appeared in the evaluation");
  return out;
}

void write_semantic_report(const std::filesystem::path& dir,
                           const SemanticReport& report) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["oa"] = report.oa;
  j["miou"] = report.miou;
  j["per_class_iou"] = report.iou;
  j["class_present"] = report.present;
  std::ofstream(dir / "semantic_metrics.json") << j.dump(1) << "\n";

  std::ofstream csv(dir / "semantic_metrics.csv");
  csv << "class,iou,present\n";
  for (size_t c = 0; c < report.iou.size(); ++c)
    csv << c << "," << report.iou[c] << "," << (report.present[c] ? 1 : 0) << "\n";
  csv << "OA," << report.oa << ",\nmIoU," << report.miou << ",\n";

  std::vector<std::string> names;
  for (size_t c = 0; c < report.iou.size(); ++c) names.push_back(std::to_string(c));
  viz::save_confusion_png(dir / "confusion.png", report.confusion.counts, names);
  std::vector<double> ious;
  std::vector<std::string> labels;
  for (size_t c = 0; c < report.iou.size(); ++c) {
    if (!report.present[c]) continue;
    ious.push_back(report.iou[c]);
    labels.push_back(std::to_string(c));
  }
  viz::save_bar_chart_png(dir / "per_class_iou.png", ious, labels, "IOU");
}

void write_panoptic_report(const std::filesystem::path& dir,
                           const PanopticQuality& pq,
                           const std::vector<std::string>& class_names) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["SQ"] = pq.mean_sq;
  j["RQ"] = pq.mean_rq;
  j["PQ"] = pq.mean_pq;
  j["per_class"] = nlohmann::json::array();
  for (size_t c = 0; c < pq.sq.size(); ++c) {
    j["per_class"].push_back({{"class", c + 1},
                              {"sq", pq.sq[c]},
                              {"rq", pq.rq[c]},
                              {"pq", pq.pq[c]},
                              {"has_sq", bool(pq.has_sq[c])},
                              {"has_rq", bool(pq.has_rq[c])}});
  }
  j["warnings"] = pq.warnings;
  std::ofstream(dir / "panoptic_metrics.json") << j.dump(1) << "\n";

  std::ofstream csv(dir / "panoptic_metrics.csv");
  csv << "class,sq,rq,pq\n";
  for (size_t c = 0; c < pq.sq.size(); ++c) {
    std::string name = c < class_names.size() ? class_names[c]
                                              : "class_" + std::to_string(c + 1);
    csv << name << "," << pq.sq[c] << "," << pq.rq[c] << "," << pq.pq[c] << "\n";
  }
  csv << "mean," << pq.mean_sq << "," << pq.mean_rq << "," << pq.mean_pq << "\n";

  std::vector<double> vals;
  std::vector<std::string> labels;
  for (size_t c = 0; c < pq.pq.size(); ++c) {
    if (!pq.has_rq[c]) continue;
    vals.push_back(pq.pq[c]);
    labels.push_back(std::to_string(c + 1));
  }
  viz::save_bar_chart_png(dir / "per_class_pq.png", vals, labels, "PQ");
}

}  // namespace sitspan::metrics
