#include "sitspan/paps.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

namespace sitspan::paps {

using namespace ag;

void PapsConfig::validate() const {
  check(!feature_widths.empty(), ErrorCode::ConfigError, "feature widths empty");
  check(num_classes >= 1, ErrorCode::ConfigError, "num_classes >= 1");
  check(shape_size >= 2, ErrorCode::ConfigError, "shape_size >= 2");
  check(sigma_floor > 0, ErrorCode::ConfigError, "sigma_floor > 0");
}

template <typename T>
Tensor<T> build_heatmap_target(const std::vector<core::ParcelRecord>& parcels,
                               int64_t h, int64_t w, double sigma_floor) {
  Tensor<T> out = Tensor<T>::zeros({h, w});
  for (const auto& p : parcels) {
    if (p.is_void) continue;
    double sv = std::max(sigma_floor, p.bbox_h / 20.0);
    double sh = std::max(sigma_floor, p.bbox_w / 20.0);
    double inv_v = 1.0 / (2.0 * sv * sv);
    double inv_h = 1.0 / (2.0 * sh * sh);
    for (int64_t i = 0; i < h; ++i) {
      double di = double(i - p.center_i);
      for (int64_t j = 0; j < w; ++j) {
        double dj = double(j - p.center_j);
        double v = std::exp(-(di * di * inv_v + dj * dj * inv_h));
        T& cell = out.at(i, j);
        if (T(v) > cell) cell = T(v);
      }
    }
  }
  return out;
}

template <typename T>
std::vector<Center> detect_centers(const Tensor<T>& m) {
  const Shape& s = m.shape();
  check(s.size() == 2, ErrorCode::ShapeError, "detect_centers wants [H,W]");
  int64_t h = s[0], w = s[1];
  std::vector<Center> out;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      T v = m.at(i, j);
      bool is_max = true;
      for (int64_t di = -1; di <= 1 && is_max; ++di)
        for (int64_t dj = -1; dj <= 1; ++dj) {
          // replicate padding: out-of-range neighbors read the clamped pixel
          int64_t ni = std::clamp(i + di, int64_t(0), h - 1);
          int64_t nj = std::clamp(j + dj, int64_t(0), w - 1);
          if (m.at(ni, nj) > v) {
            is_max = false;
            break;
          }
        }
      if (is_max) out.push_back({i, j, double(v)});
    }
  std::sort(out.begin(), out.end(), [](const Center& a, const Center& b) {
    if (a.q != b.q) return a.q > b.q;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  return out;
}

std::vector<int64_t> assign_centers(const std::vector<core::ParcelRecord>& parcels,
                                    const std::vector<Center>& centers,
                                    const Tensor<int32_t>& pixel_map) {
  std::vector<int64_t> best(parcels.size(), -1);
  std::vector<double> best_q(parcels.size(), -1.0);
  std::unordered_map<int32_t, size_t> by_id;
  for (size_t k = 0; k < parcels.size(); ++k) by_id[parcels[k].id] = k;
  for (size_t c = 0; c < centers.size(); ++c) {
    int32_t id = pixel_map.at(centers[c].i, centers[c].j);
    auto it = by_id.find(id);
    if (it == by_id.end()) continue;
    size_t k = it->second;
    if (centers[c].q > best_q[k]) {
      best_q[k] = centers[c].q;
      best[k] = int64_t(c);
    }
  }
  return best;
}

Box centered_box(int64_t i, int64_t j, int64_t bh, int64_t bw, int64_t h,
                 int64_t w) {
  check(bh >= 1 && bw >= 1, ErrorCode::SizeError, "degenerate box size");
  Box b;
  b.full_h = bh;
  b.full_w = bw;
  int64_t top = i - bh / 2;
  int64_t left = j - bw / 2;
  int64_t r1 = std::min(top + bh, h);
  int64_t c1 = std::min(left + bw, w);
  b.r0 = std::max<int64_t>(0, top);
  b.c0 = std::max<int64_t>(0, left);
  b.nr = r1 - b.r0;
  b.nc = c1 - b.c0;
  check(b.nr >= 1 && b.nc >= 1, ErrorCode::SizeError, "box fully outside image");
  b.pr0 = b.r0 - top;
  b.pc0 = b.c0 - left;
  return b;
}

// ---------------------------------------------------------------------------
// heads
// ---------------------------------------------------------------------------

template <typename T>
void PapsHeads<T>::init(const PapsConfig& cfg_, Rng& rng) {
  cfg = cfg_;
  cfg.validate();
  int64_t d1 = cfg.feature_widths[0];
  int64_t hw = cfg.head_width;
  heat_a.init(d1, hw, 3, 1, 1, rng);
  heat_norm.init(nn::NormKind::batch, hw, 1);
  heat_b.init(hw, 1, 3, 1, 1, rng);
  sal_a.init(d1, hw, 3, 1, 1, rng);
  sal_norm.init(nn::NormKind::batch, hw, 1);
  sal_b.init(hw, 1, 3, 1, 1, rng);

  int64_t stack = cfg.stack_dim();
  shape_1.init(stack, cfg.mlp_hidden, rng);
  shape_bn.init(nn::NormKind::batch, cfg.mlp_hidden, 1);
  shape_2.init(cfg.mlp_hidden, int64_t(cfg.shape_size) * cfg.shape_size, rng);
  size_1.init(stack, cfg.mlp_hidden, rng);
  size_bn.init(nn::NormKind::batch, cfg.mlp_hidden, 1);
  size_2.init(cfg.mlp_hidden, 2, rng);
  class_1.init(stack, cfg.mlp_hidden, rng);
  class_bn1.init(nn::NormKind::batch, cfg.mlp_hidden, 1);
  class_2.init(cfg.mlp_hidden, cfg.class_hidden, rng);
  class_bn2.init(nn::NormKind::batch, cfg.class_hidden, 1);
  class_3.init(cfg.class_hidden, cfg.num_classes, rng);

  if (!cfg.multiplicative_saliency) {
    int64_t mw = cfg.mask_cnn_width;
    mask_c1.init(1, mw, 3, 1, 1, rng);
    mask_in.init(nn::NormKind::instance, mw, 1);
    mask_c2.init(mw, mw, 3, 1, 1, rng);
    mask_c3.init(mw, 1, 3, 1, 1, rng);
  }
}

template <typename T>
void PapsHeads<T>::visit(const std::string& p, nn::Visitor<T>& v) {
  heat_a.visit(p + ".heat_a", v);
  heat_norm.visit(p + ".heat_norm", v);
  heat_b.visit(p + ".heat_b", v);
  sal_a.visit(p + ".sal_a", v);
  sal_norm.visit(p + ".sal_norm", v);
  sal_b.visit(p + ".sal_b", v);
  shape_1.visit(p + ".shape_1", v);
  shape_bn.visit(p + ".shape_bn", v);
  shape_2.visit(p + ".shape_2", v);
  size_1.visit(p + ".size_1", v);
  size_bn.visit(p + ".size_bn", v);
  size_2.visit(p + ".size_2", v);
  class_1.visit(p + ".class_1", v);
  class_bn1.visit(p + ".class_bn1", v);
  class_2.visit(p + ".class_2", v);
  class_bn2.visit(p + ".class_bn2", v);
  class_3.visit(p + ".class_3", v);
  if (!cfg.multiplicative_saliency) {
    mask_c1.visit(p + ".mask_c1", v);
    mask_in.visit(p + ".mask_in", v);
    mask_c2.visit(p + ".mask_c2", v);
    mask_c3.visit(p + ".mask_c3", v);
  }
}

template <typename T>
int64_t PapsHeads<T>::num_params() {
  int64_t n = 0;
  nn::Visitor<T> v;
  v.param = [&](const std::string&, Var<T>& p) { n += p.val().numel(); };
  v.buffer = [](const std::string&, Tensor<T>&) {};
  visit("paps", v);
  return n;
}

template <typename T>
Var<T> PapsHeads<T>::heatmap(const Var<T>& d1, bool training) {
  Var<T> y = relu(heat_norm.forward(heat_a.forward(d1), training));
  y = sigmoid(heat_b.forward(y));  // [B,1,H,W]
  const Shape& s = y.val().shape();
  return reshape(y, {s[0], s[2], s[3]});
}

template <typename T>
Var<T> PapsHeads<T>::saliency(const Var<T>& d1, bool training) {
  Var<T> y = relu(sal_norm.forward(sal_a.forward(d1), training));
  y = sal_b.forward(y);
  const Shape& s = y.val().shape();
  return reshape(y, {s[0], s[2], s[3]});
}

template <typename T>
typename PapsHeads<T>::HeadOut PapsHeads<T>::predict_heads(const Var<T>& feats,
                                                           bool training) {
  HeadOut out;
  Var<T> s = relu(shape_bn.forward(shape_1.forward(feats), training));
  out.shapes = shape_2.forward(s);
  Var<T> z = relu(size_bn.forward(size_1.forward(feats), training));
  out.sizes = softplus(size_2.forward(z));
  Var<T> c = relu(class_bn1.forward(class_1.forward(feats), training));
  c = relu(class_bn2.forward(class_2.forward(c), training));
  out.class_logits = class_3.forward(c);
  return out;
}

template <typename T>
Var<T> PapsHeads<T>::assemble_shape(const Var<T>& patch_logits, const Var<T>& z,
                                    int64_t b, const Box& box) {
  Var<T> resized = bilinear_resize_hw(patch_logits, box.full_h, box.full_w);
  Var<T> patch = resized;
  if (box.nr != box.full_h || box.nc != box.full_w) {
    // crop the resized patch to the part that stayed inside the image
    Var<T> flat = reshape(resized, {1, box.full_h, box.full_w});
    patch = crop_map(flat, 0, box.pr0, box.nr, box.pc0, box.nc);
  } else {
    patch = reshape(resized, {box.nr, box.nc});
  }
  Var<T> zc = crop_map(z, b, box.r0, box.nr, box.c0, box.nc);
  if (cfg.multiplicative_saliency) return mul(sigmoid(patch), sigmoid(zc));
  Var<T> lt = add(patch, zc);
  Var<T> x = reshape(lt, {1, 1, box.nr, box.nc});
  x = relu(mask_in.forward(mask_c1.forward(x), /*training=*/true));
  x = relu(mask_c2.forward(x));
  x = mask_c3.forward(x);
  return sigmoid(add(lt, reshape(x, {box.nr, box.nc})));
}

template <typename T>
Var<T> size_loss_sum(const Var<T>& sizes, const Tensor<T>& target) {
  check(sizes.val().shape() == target.shape(), ErrorCode::ShapeMismatch,
        "size loss shapes");
  Var<T> st = Var<T>::constant(target);
  return sum(divide(abs_(sub(sizes, st)), st));
}

template <typename T>
Var<T> extract_multiscale_features(const std::vector<Var<T>>& d,
                                   const std::vector<std::array<int64_t, 3>>& coords) {
  std::vector<Var<T>> per_level;
  for (size_t l = 0; l < d.size(); ++l) {
    std::vector<std::array<int64_t, 3>> scaled = coords;
    for (auto& c : scaled) {
      c[1] >>= l;
      c[2] >>= l;
    }
    per_level.push_back(gather_pixels(d[l], scaled));
  }
  return concat<T>(per_level, 1);
}

// ---------------------------------------------------------------------------
// training loss + inference
// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::vector<core::ParcelRecord> valid_parcels(const core::SITSSample& s) {
  std::vector<core::ParcelRecord> out;
  for (const auto& p : s.parcels)
    if (!p.is_void) out.push_back(p);
  return out;
}

}  // namespace

template <typename T>
LossBreakdown<T> training_loss(PapsHeads<T>& heads,
                               const utae::FeaturePyramid<T>& pyr,
                               const std::vector<const core::SITSSample*>& targets,
                               bool training) {
  const Shape& ds = pyr.d[0].val().shape();
  int64_t b = ds[0], h = ds[2], w = ds[3];
  check(int64_t(targets.size()) == b, ErrorCode::ShapeMismatch,
        "targets vs batch size");

  Var<T> m = heads.heatmap(pyr.d[0], training);
  Var<T> z = heads.saliency(pyr.d[0], training);

  Tensor<T> target{Shape{b, h, w}};
  std::vector<int64_t> counts(size_t(b), 0);
  struct Det {
    int64_t b;
    Center center;
    const core::ParcelRecord* parcel;
  };
  std::vector<Det> dets;
  std::vector<std::vector<core::ParcelRecord>> parcels_of(static_cast<size_t>(b));
  for (int64_t bi = 0; bi < b; ++bi) {
    parcels_of[size_t(bi)] = valid_parcels<T>(*targets[size_t(bi)]);
    const auto& parcels = parcels_of[size_t(bi)];
    Tensor<T> tb = build_heatmap_target<T>(parcels, h, w, heads.cfg.sigma_floor);
    std::copy(tb.data(), tb.data() + h * w, target.data() + bi * h * w);
    counts[size_t(bi)] = int64_t(parcels.size());
    if (parcels.empty()) continue;
    // detection + assignment on the current predicted heatmap
    Tensor<T> mb{Shape{h, w}};
    std::copy(m.val().data() + bi * h * w, m.val().data() + (bi + 1) * h * w,
              mb.data());
    auto centers = detect_centers(mb);
    Tensor<int32_t> pix_map =
        core::pixel_to_parcel_map(parcels, h, w, heads.cfg.sigma_floor);
    auto assigned = assign_centers(parcels, centers, pix_map);
    for (size_t k = 0; k < parcels.size(); ++k)
      if (assigned[k] >= 0)
        dets.push_back({bi, centers[size_t(assigned[k])], &parcels[k]});
  }

  LossBreakdown<T> out;
  out.center = center_focal_loss(m, target, counts, T(heads.cfg.focal_beta),
                                 T(heads.cfg.heatmap_eps));
  out.n_detected = int64_t(dets.size());
  for (auto c : counts) out.n_parcels += c;

  if (dets.empty()) {
    Tensor<T> zero = Tensor<T>::scalar(T(0));
    out.cls = Var<T>::constant(zero);
    out.size = Var<T>::constant(zero);
    out.shape = Var<T>::constant(zero);
    out.total = out.center;
    return out;
  }

  std::vector<std::array<int64_t, 3>> coords;
  for (const auto& d : dets) coords.push_back({d.b, d.center.i, d.center.j});
  Var<T> feats = extract_multiscale_features(pyr.d, coords);
  auto head_out = heads.predict_heads(feats, training);

  int64_t n_det = int64_t(dets.size());
  Tensor<int32_t> cls_target{Shape{n_det}};
  Tensor<T> size_target{Shape{n_det, 2}};
  for (int64_t k = 0; k < n_det; ++k) {
    cls_target[k] = dets[size_t(k)].parcel->crop_class - 1;
    size_target.at(k, 0) = T(dets[size_t(k)].parcel->bbox_h);
    size_target.at(k, 1) = T(dets[size_t(k)].parcel->bbox_w);
  }
  out.cls = cross_entropy_rows_sum(head_out.class_logits, cls_target);
  out.size = size_loss_sum(head_out.sizes, size_target);

  Var<T> shape_sum;
  int s = heads.cfg.shape_size;
  for (int64_t k = 0; k < n_det; ++k) {
    const auto& det = dets[size_t(k)];
    int64_t bh = int64_t(std::ceil(head_out.sizes.val().at(k, 0)));
    int64_t bw = int64_t(std::ceil(head_out.sizes.val().at(k, 1)));
    bh = std::max<int64_t>(1, bh);
    bw = std::max<int64_t>(1, bw);
    Box box = centered_box(det.center.i, det.center.j, bh, bw, h, w);
    Var<T> patch = reshape(take_row(head_out.shapes, k), {int64_t(s), int64_t(s)});
    Var<T> lc = heads.assemble_shape(patch, z, det.b, box);
    Tensor<T> tgt{Shape{box.nr, box.nc}};
    for (int64_t r = 0; r < box.nr; ++r)
      for (int64_t cc = 0; cc < box.nc; ++cc)
        tgt.at(r, cc) = T(det.parcel->mask.at(box.r0 + r, box.c0 + cc));
    Var<T> l = bce_mean(lc, tgt, T(heads.cfg.heatmap_eps));
    shape_sum = shape_sum.defined() ? add(shape_sum, l) : l;
  }
  out.shape = shape_sum;

  T inv = T(1) / T(n_det);
  Var<T> per_parcel = muls(add(add(out.cls, out.size), out.shape), inv);
  out.total = add(out.center, per_parcel);
  return out;
}

template <typename T>
std::vector<Proposal<T>> propose(PapsHeads<T>& heads,
                                 const utae::FeaturePyramid<T>& pyr,
                                 double min_quality) {
  const Shape& ds = pyr.d[0].val().shape();
  int64_t b = ds[0], h = ds[2], w = ds[3];
  Var<T> m = heads.heatmap(pyr.d[0], false);
  Var<T> z = heads.saliency(pyr.d[0], false);

  std::vector<std::array<int64_t, 3>> coords;
  std::vector<std::pair<int64_t, Center>> picked;
  for (int64_t bi = 0; bi < b; ++bi) {
    Tensor<T> mb{Shape{h, w}};
    std::copy(m.val().data() + bi * h * w, m.val().data() + (bi + 1) * h * w,
              mb.data());
    for (const auto& c : detect_centers(mb)) {
      if (c.q < min_quality) break;  // centers are sorted by q desc
      picked.push_back({bi, c});
      coords.push_back({bi, c.i, c.j});
    }
  }
  std::vector<Proposal<T>> out;
  if (picked.empty()) return out;

  Var<T> feats = extract_multiscale_features(pyr.d, coords);
  auto head_out = heads.predict_heads(feats, false);
  int s = heads.cfg.shape_size;
  int64_t k_classes = heads.cfg.num_classes;
  for (int64_t k = 0; k < int64_t(picked.size()); ++k) {
    Proposal<T> p;
    p.b = picked[size_t(k)].first;
    p.center = picked[size_t(k)].second;
    p.size_h = double(head_out.sizes.val().at(k, 0));
    p.size_w = double(head_out.sizes.val().at(k, 1));
    int64_t bh = std::max<int64_t>(1, int64_t(std::ceil(p.size_h)));
    int64_t bw = std::max<int64_t>(1, int64_t(std::ceil(p.size_w)));
    p.box = centered_box(p.center.i, p.center.j, bh, bw, h, w);
    // softmax over class logits
    p.class_probs.resize(size_t(k_classes));
    double mx = -1e30;
    for (int64_t c = 0; c < k_classes; ++c)
      mx = std::max(mx, double(head_out.class_logits.val().at(k, c)));
    double zsum = 0;
    for (int64_t c = 0; c < k_classes; ++c) {
      p.class_probs[size_t(c)] =
          std::exp(double(head_out.class_logits.val().at(k, c)) - mx);
      zsum += p.class_probs[size_t(c)];
    }
    for (auto& v : p.class_probs) v /= zsum;
    Var<T> patch = reshape(take_row(head_out.shapes, k), {int64_t(s), int64_t(s)});
    Var<T> lc = heads.assemble_shape(patch, z, p.b, p.box);
    p.mask = lc.val().clone();
    out.push_back(std::move(p));
  }
  return out;
}

template <typename T>
std::string proposals_to_jsonl(const std::vector<Proposal<T>>& proposals,
                               double binarize_threshold) {
  std::ostringstream os;
  for (const auto& p : proposals) {
    nlohmann::json j;
    j["batch"] = p.b;
    j["center"] = {p.center.i, p.center.j};
    j["quality"] = p.center.q;
    j["size"] = {p.size_h, p.size_w};
    int64_t arg = 0;
    for (size_t c = 1; c < p.class_probs.size(); ++c)
      if (p.class_probs[c] > p.class_probs[size_t(arg)]) arg = int64_t(c);
    j["class"] = arg + 1;
    j["box"] = {p.box.r0, p.box.c0, p.box.nr, p.box.nc};
    // run-length encoding of the thresholded mask, row-major: count pairs
    // starting with the number of zeros
    std::vector<int64_t> rle;
    int64_t run = 0;
    bool cur = false;
    for (int64_t i = 0; i < p.mask.numel(); ++i) {
      bool v = double(p.mask[i]) >= binarize_threshold;
      if (v == cur) {
        ++run;
      } else {
        rle.push_back(run);
        cur = v;
        run = 1;
      }
    }
    rle.push_back(run);
    j["mask_rle"] = rle;
    os << j.dump() << "\n";
  }
  return os.str();
}

#define SITSPAN_INSTANTIATE_PAPS(T)                                            \
  template Tensor<T> build_heatmap_target<T>(                                  \
      const std::vector<core::ParcelRecord>&, int64_t, int64_t, double);       \
  template std::vector<Center> detect_centers<T>(const Tensor<T>&);            \
  template struct PapsHeads<T>;                                                \
  template Var<T> extract_multiscale_features<T>(                              \
      const std::vector<Var<T>>&, const std::vector<std::array<int64_t, 3>>&); \
  template Var<T> size_loss_sum<T>(const Var<T>&, const Tensor<T>&);          \
  template LossBreakdown<T> training_loss<T>(                                  \
      PapsHeads<T>&, const utae::FeaturePyramid<T>&,                           \
      const std::vector<const core::SITSSample*>&, bool);                      \
  template std::vector<Proposal<T>> propose<T>(                                \
      PapsHeads<T>&, const utae::FeaturePyramid<T>&, double);                  \
  template std::string proposals_to_jsonl<T>(const std::vector<Proposal<T>>&,  \
                                             double);

SITSPAN_INSTANTIATE_PAPS(float)
SITSPAN_INSTANTIATE_PAPS(double)

#undef SITSPAN_INSTANTIATE_PAPS

}  // namespace sitspan::paps
