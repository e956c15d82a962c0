#include "sitspan/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

namespace sitspan::core {

void SITSSample::validate(const LabelSpec& labels) const {
  check(images.ndim() == 4 && t() >= 1, ErrorCode::ShapeError,
        sample_id + ": images must be [T,C,H,W] with T >= 1");
  check(dates.numel() == t(), ErrorCode::ShapeMismatch,
        sample_id + ": dates length != T");
  for (int64_t i = 1; i < t(); ++i)
    check(dates[i] > dates[i - 1], ErrorCode::FormatError,
          sample_id + ": dates must be strictly increasing");
  check(semantic.shape() == Shape({height(), width()}) &&
            instances.shape() == Shape({height(), width()}),
        ErrorCode::ShapeMismatch, sample_id + ": annotation shape");

  std::map<int32_t, const ParcelRecord*> by_id;
  for (const auto& p : parcels) {
    check(p.id > 0, ErrorCode::FormatError, sample_id + ": parcel id must be > 0");
    check(by_id.emplace(p.id, &p).second, ErrorCode::FormatError,
          sample_id + ": duplicate parcel id " + std::to_string(p.id));
    check(p.center_i >= 0 && p.center_i < height() && p.center_j >= 0 &&
              p.center_j < width(),
          ErrorCode::FormatError, sample_id + ": parcel center outside image");
    check(p.bbox_h >= 1 && p.bbox_w >= 1, ErrorCode::FormatError,
          sample_id + ": bbox_size must be >= 1");
    check(p.mask.shape() == Shape({height(), width()}), ErrorCode::ShapeMismatch,
          sample_id + ": parcel mask shape");
    check(p.crop_class >= 1 && p.crop_class <= labels.crop_classes,
          ErrorCode::FormatError, sample_id + ": crop class out of range");
    // tight bbox check + nonempty mask
    int64_t r0 = height(), r1 = -1, c0 = width(), c1 = -1;
    for (int64_t i = 0; i < height(); ++i)
      for (int64_t j = 0; j < width(); ++j)
        if (p.mask.at(i, j)) {
          r0 = std::min(r0, i), r1 = std::max(r1, i);
          c0 = std::min(c0, j), c1 = std::max(c1, j);
        }
    check(r1 >= 0, ErrorCode::FormatError,
          sample_id + ": empty mask for parcel " + std::to_string(p.id));
    check(int64_t(p.bbox_h) == r1 - r0 + 1 && int64_t(p.bbox_w) == c1 - c0 + 1,
          ErrorCode::FormatError,
          sample_id + ": bbox is not the tight box of the mask");
  }
  for (int64_t i = 0; i < height(); ++i)
    for (int64_t j = 0; j < width(); ++j) {
      int32_t inst = instances.at(i, j);
      int32_t sem = semantic.at(i, j);
      if (inst == 0) continue;
      auto it = by_id.find(inst);
      check(it != by_id.end(), ErrorCode::FormatError,
            sample_id + ": instance id " + std::to_string(inst) +
                " has no parcel record");
      int expected = it->second->is_void ? labels.void_label()
                                         : it->second->crop_class;
      check(sem == expected, ErrorCode::FormatError,
            sample_id + ": semantic/instance class mismatch at pixel");
      check(it->second->mask.at(i, j) != 0, ErrorCode::FormatError,
            sample_id + ": instance pixel outside its parcel mask");
    }
}

PaddedBatch pad_and_batch(const std::vector<const SITSSample*>& samples) {
  check(!samples.empty(), ErrorCode::EmptyBatch, "pad_and_batch of zero samples");
  int64_t c = samples[0]->channels();
  int64_t h = samples[0]->height();
  int64_t w = samples[0]->width();
  int64_t t_max = 0;
  for (const auto* s : samples) {
    check(s->channels() == c && s->height() == h && s->width() == w,
          ErrorCode::ShapeMismatch,
          "pad_and_batch: samples disagree on C/H/W (" + s->sample_id + ")");
    t_max = std::max(t_max, s->t());
  }
  int64_t b = int64_t(samples.size());
  PaddedBatch out;
  out.images = Tensor<float>::zeros({b, t_max, c, h, w});
  out.pad_mask = Tensor<float>::zeros({b, t_max});
  out.dates = Tensor<int64_t>::zeros({b, t_max});
  out.targets.assign(samples.begin(), samples.end());
  int64_t frame = c * h * w;
  for (int64_t i = 0; i < b; ++i) {
    const auto* s = samples[size_t(i)];
    std::memcpy(out.images.data() + i * t_max * frame, s->images.data(),
                size_t(s->t() * frame) * sizeof(float));
    for (int64_t tt = 0; tt < s->t(); ++tt) {
      out.pad_mask.at(i, tt) = 1.f;
      out.dates.at(i, tt) = s->dates[tt];
    }
  }
  return out;
}

Tensor<float> unpad_images(const PaddedBatch& batch, int64_t b) {
  int64_t t_real = 0;
  for (int64_t tt = 0; tt < batch.t_max(); ++tt)
    if (batch.pad_mask.at(b, tt) != 0.f) ++t_real;
  int64_t c = batch.images.dim(2), h = batch.images.dim(3), w = batch.images.dim(4);
  Tensor<float> out{Shape{t_real, c, h, w}};
  std::memcpy(out.data(), batch.images.data() + b * batch.t_max() * c * h * w,
              size_t(t_real * c * h * w) * sizeof(float));
  return out;
}

Tensor<int32_t> pixel_to_parcel_map(const std::vector<ParcelRecord>& parcels,
                                    int64_t h, int64_t w, double sigma_floor) {
  Tensor<int32_t> out = Tensor<int32_t>::zeros({h, w});
  if (parcels.empty()) return out;

  struct Kern {
    int32_t id;
    double ci, cj, inv2sv, inv2sh;
  };
  std::vector<Kern> kerns;
  kerns.reserve(parcels.size());
  for (const auto& p : parcels) {
    double sv = std::max(sigma_floor, p.bbox_h / 20.0);
    double sh = std::max(sigma_floor, p.bbox_w / 20.0);
    kerns.push_back({p.id, double(p.center_i), double(p.center_j),
                     1.0 / (2.0 * sv * sv), 1.0 / (2.0 * sh * sh)});
  }
  // argmax of exp(-q) == argmin of q; ties resolved toward the lowest id
  std::sort(kerns.begin(), kerns.end(),
            [](const Kern& a, const Kern& b) { return a.id < b.id; });
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      double best = std::numeric_limits<double>::infinity();
      int32_t best_id = 0;
      for (const auto& k : kerns) {
        double di = double(i) - k.ci, dj = double(j) - k.cj;
        double q = di * di * k.inv2sv + dj * dj * k.inv2sh;
        if (q < best) {
          best = q;
          best_id = k.id;
        }
      }
      out.at(i, j) = best_id;
    }
  }
  return out;
}

PaddedBatch normalize_channels(const PaddedBatch& batch, const ChannelStats& stats) {
  int64_t c = batch.images.dim(2);
  check(int64_t(stats.mean.size()) == c && int64_t(stats.std.size()) == c,
        ErrorCode::ShapeMismatch, "normalization stats size != channels");
  for (double s : stats.std)
    check(s > 0.0, ErrorCode::DegenerateStats, "channel std must be > 0");

  PaddedBatch out;
  out.images = batch.images.clone();
  out.pad_mask = batch.pad_mask;
  out.dates = batch.dates;
  out.targets = batch.targets;
  int64_t b = batch.batch(), t = batch.t_max();
  int64_t sp = batch.images.dim(3) * batch.images.dim(4);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t tt = 0; tt < t; ++tt) {
      if (batch.pad_mask.at(bi, tt) == 0.f) continue;  // keep padded frames zero
      for (int64_t ch = 0; ch < c; ++ch) {
        float* px = out.images.data() + (((bi * t + tt) * c) + ch) * sp;
        float mu = float(stats.mean[size_t(ch)]);
        float sd = float(stats.std[size_t(ch)]);
        for (int64_t k = 0; k < sp; ++k) px[k] = (px[k] - mu) / sd;
      }
    }
  }
  return out;
}

}  // namespace sitspan::core
