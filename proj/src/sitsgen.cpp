#include "sitspan/sitsgen.hpp"

#include <algorithm>
#include <cmath>

namespace sitspan::sitsgen {

void GenConfig::validate() const {
  check(height >= 16 && width >= 16, ErrorCode::ConfigError, "H,W must be >= 16");
  check(n_classes >= 2, ErrorCode::ConfigError, "n_classes must be >= 2");
  check(t_min >= 4 && t_max >= t_min, ErrorCode::ConfigError,
        "T range must satisfy 4 <= t_min <= t_max");
  check(channels >= 1, ErrorCode::ConfigError, "channels must be >= 1");
  check(cloud_prob >= 0.0 && cloud_prob <= 1.0, ErrorCode::ConfigError,
        "cloud_prob in [0,1]");
  check(noise_std >= 0.0, ErrorCode::ConfigError, "noise_std >= 0");
  check(parcel_density > 0.0, ErrorCode::ConfigError, "parcel_density > 0");
}

double PhenologyProfile::value(int channel, double day) const {
  const Curve& c = curves[size_t(channel)];
  double up = 1.0 / (1.0 + std::exp(-c.onset_rate * (day - c.onset)));
  double down = 1.0 / (1.0 + std::exp(-c.senescence_rate * (day - c.senescence)));
  double v = c.base + c.amplitude * (up - down);
  return std::min(1.5, std::max(0.0, v));
}

namespace {

struct Site {
  double ci, cj;
  double axx, axy, ayy;  // metric: q = axx*di^2 + 2*axy*di*dj + ayy*dj^2
  double cut2;           // squared metric radius beyond which pixels stay background
};

// centroid rounded, snapped to the nearest in-mask pixel
void place_center(core::ParcelRecord& p, int64_t h, int64_t w) {
  double si = 0, sj = 0;
  int64_t n = 0;
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      if (p.mask.at(i, j)) {
        si += double(i);
        sj += double(j);
        ++n;
      }
  int64_t ci = int64_t(std::llround(si / double(n)));
  int64_t cj = int64_t(std::llround(sj / double(n)));
  ci = std::min(h - 1, std::max<int64_t>(0, ci));
  cj = std::min(w - 1, std::max<int64_t>(0, cj));
  if (p.mask.at(ci, cj)) {
    p.center_i = ci;
    p.center_j = cj;
    return;
  }
  int64_t best_i = -1, best_j = -1;
  double best = std::numeric_limits<double>::infinity();
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      if (!p.mask.at(i, j)) continue;
      double d = double((i - ci) * (i - ci) + (j - cj) * (j - cj));
      if (d < best) {
        best = d;
        best_i = i;
        best_j = j;
      }
    }
  p.center_i = best_i;
  p.center_j = best_j;
}

}  // namespace

Layout generate_layout(const GenConfig& cfg, Rng& rng, int class_offset) {
  cfg.validate();
  int64_t h = cfg.height, w = cfg.width;
  double lambda = cfg.parcel_density * double(h * w) / 1000.0;

  int n_sites = 0;
  for (int attempt = 0; attempt < 8 && n_sites == 0; ++attempt)
    n_sites = rng.poisson(lambda);
  check(n_sites > 0, ErrorCode::EmptyLayout,
        "no parcels sampled after 8 attempts (density too low)");

  std::vector<Site> sites;
  sites.reserve(size_t(n_sites));
  double cell = std::sqrt(double(h * w) / double(n_sites));
  for (int s = 0; s < n_sites; ++s) {
    double ci = rng.uniform(0.0, double(h));
    double cj = rng.uniform(0.0, double(w));
    double theta = rng.uniform(0.0, 3.14159265358979323846);
    double sx = rng.uniform(0.6, 1.8);
    double sy = rng.uniform(0.6, 1.8);
    double ct = std::cos(theta), st = std::sin(theta);
    // rotated diagonal metric
    double axx = ct * ct * sx + st * st * sy;
    double ayy = st * st * sx + ct * ct * sy;
    double axy = ct * st * (sx - sy);
    double radius = std::min(rng.uniform(0.65, 1.05) * cell,
                              0.35 * std::sqrt(double(h * w)));
    sites.push_back({ci, cj, axx, axy, ayy, radius * radius});
  }

  Tensor<int32_t> assign = Tensor<int32_t>::zeros({h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      double best = std::numeric_limits<double>::infinity();
      int32_t id = 0;
      for (size_t s = 0; s < sites.size(); ++s) {
        double di = double(i) - sites[s].ci;
        double dj = double(j) - sites[s].cj;
        double q = sites[s].axx * di * di + 2.0 * sites[s].axy * di * dj +
                   sites[s].ayy * dj * dj;
        if (q < best && q <= sites[s].cut2) {  // bounded extent per parcel
          best = q;
          id = int32_t(s) + 1;
        }
      }
      assign.at(i, j) = id;
    }

  // carve >= 1px corridors: a pixel touching a different parcel (4-adjacency)
  // becomes background
  Tensor<int32_t> inst = assign.clone();
  auto other_parcel = [&](int64_t i, int64_t j, int32_t a) {
    if (i < 0 || i >= h || j < 0 || j >= w) return false;
    int32_t v = assign.at(i, j);
    return v != 0 && v != a;
  };
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int32_t a = assign.at(i, j);
      if (a == 0) continue;
      if (other_parcel(i - 1, j, a) || other_parcel(i + 1, j, a) ||
          other_parcel(i, j - 1, a) || other_parcel(i, j + 1, a))
        inst.at(i, j) = 0;
    }

  // rebuild surviving parcels with contiguous ids
  std::vector<int64_t> count(size_t(n_sites) + 1, 0);
  for (int64_t k = 0; k < inst.numel(); ++k) ++count[size_t(inst[k])];
  std::vector<int32_t> remap(size_t(n_sites) + 1, 0);
  int32_t next_id = 0;
  for (int s = 1; s <= n_sites; ++s)
    if (count[size_t(s)] > 0) remap[size_t(s)] = ++next_id;
  check(next_id > 0, ErrorCode::EmptyLayout, "corridors removed every parcel");

  Layout out;
  out.instances = Tensor<int32_t>::zeros({h, w});
  out.parcels.resize(size_t(next_id));
  for (auto& p : out.parcels) p.mask = Tensor<uint8_t>::zeros({h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int32_t id = remap[size_t(inst.at(i, j))];
      out.instances.at(i, j) = id;
      if (id > 0) out.parcels[size_t(id - 1)].mask.at(i, j) = 1;
    }
  for (int32_t id = 1; id <= next_id; ++id) {
    auto& p = out.parcels[size_t(id - 1)];
    p.id = id;
    p.crop_class = int32_t((class_offset + id - 1) % cfg.n_classes) + 1;
    p.is_void = false;
    int64_t r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (int64_t i = 0; i < h; ++i)
      for (int64_t j = 0; j < w; ++j)
        if (p.mask.at(i, j)) {
          r0 = std::min(r0, i), r1 = std::max(r1, i);
          c0 = std::min(c0, j), c1 = std::max(c1, j);
        }
    p.bbox_h = double(r1 - r0 + 1);
    p.bbox_w = double(c1 - c0 + 1);
    place_center(p, h, w);
  }
  return out;
}

std::vector<PhenologyProfile> make_profiles(const GenConfig& cfg, Rng& rng) {
  std::vector<PhenologyProfile> profiles(size_t(cfg.n_classes) + 1);
  // background: flat low-reflectance baseline with negligible seasonality
  profiles[0].class_id = 0;
  profiles[0].curves.resize(size_t(cfg.channels));
  for (int c = 0; c < cfg.channels; ++c) {
    auto& cv = profiles[0].curves[size_t(c)];
    cv.base = rng.uniform(0.08, 0.2);
    cv.amplitude = rng.uniform(0.0, 0.04);
    cv.onset = 200;
    cv.senescence = 280;
    cv.onset_rate = cv.senescence_rate = 0.05;
  }
  // crop classes: onsets on a grid separated by at least class_margin_days
  double span = std::max(cfg.class_margin_days * double(cfg.n_classes - 1), 180.0);
  for (int k = 1; k <= cfg.n_classes; ++k) {
    auto& pr = profiles[size_t(k)];
    pr.class_id = k;
    pr.curves.resize(size_t(cfg.channels));
    double onset = 150.0 + span * double(k - 1) / double(std::max(1, cfg.n_classes - 1));
    double duration = rng.uniform(60.0, 110.0);
    double up_rate = rng.uniform(0.08, 0.2);
    double down_rate = rng.uniform(0.08, 0.2);
    double amp = rng.uniform(0.5, 0.9);
    for (int c = 0; c < cfg.channels; ++c) {
      auto& cv = pr.curves[size_t(c)];
      cv.base = rng.uniform(0.05, 0.15);
      cv.amplitude = amp * rng.uniform(0.55, 1.0);
      cv.onset = onset + rng.uniform(-3.0, 3.0);
      cv.senescence = onset + duration;
      cv.onset_rate = up_rate;
      cv.senescence_rate = down_rate;
    }
  }
  return profiles;
}

core::SITSSample render_sequence(const Layout& layout,
                                 const std::vector<PhenologyProfile>& profiles,
                                 const GenConfig& cfg, Rng& rng) {
  int64_t h = cfg.height, w = cfg.width;
  int t = cfg.t_min + int(rng.uniform_int(int64_t(cfg.t_max - cfg.t_min + 1)));

  core::SITSSample s;
  s.dates = Tensor<int64_t>::zeros({t});
  int64_t day = rng.uniform_int(30);
  for (int tt = 0; tt < t; ++tt) {
    s.dates[tt] = day;
    day += 1 + rng.poisson(4.0);  // irregular gaps, median ~5 days
  }

  s.instances = layout.instances;
  s.parcels = layout.parcels;
  s.semantic = Tensor<int32_t>::zeros({h, w});
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j) {
      int32_t id = layout.instances.at(i, j);
      s.semantic.at(i, j) =
          id > 0 ? layout.parcels[size_t(id - 1)].crop_class : 0;
    }

  s.images = Tensor<float>::zeros({t, cfg.channels, h, w});
  for (int tt = 0; tt < t; ++tt) {
    double date = double(s.dates[tt]);
    for (int c = 0; c < cfg.channels; ++c) {
      // per-class value at this date, shared by all pixels of the class
      std::vector<float> val(profiles.size());
      for (size_t k = 0; k < profiles.size(); ++k)
        val[k] = float(profiles[k].value(c, date));
      float* px = s.images.data() + (int64_t(tt) * cfg.channels + c) * h * w;
      const int32_t* sem = s.semantic.data();
      if (cfg.noise_std > 0) {
        for (int64_t k = 0; k < h * w; ++k)
          px[k] = val[size_t(sem[k])] + float(rng.normal(0.0, cfg.noise_std));
      } else {
        for (int64_t k = 0; k < h * w; ++k) px[k] = val[size_t(sem[k])];
      }
    }
    if (rng.uniform() < cfg.cloud_prob) {
      // bright low-contrast blob: raises reflectance and compresses contrast
      double ci = rng.uniform(0.0, double(h));
      double cj = rng.uniform(0.0, double(w));
      double r = rng.uniform(0.25, 0.7) * double(std::min(h, w));
      double bright = rng.uniform(0.75, 1.05);
      for (int64_t i = 0; i < h; ++i)
        for (int64_t j = 0; j < w; ++j) {
          double d2 = (double(i) - ci) * (double(i) - ci) +
                      (double(j) - cj) * (double(j) - cj);
          float cov = float(std::exp(-d2 / (2.0 * r * r)));
          if (cov < 1e-3f) continue;
          for (int c = 0; c < cfg.channels; ++c) {
            float& v = s.images.at(tt, c, i, j);
            v = v * (1.f - 0.8f * cov) + cov * float(bright);
          }
        }
    }
  }
  return s;
}

std::vector<core::SITSSample> generate_dataset(const GenConfig& cfg, int n_samples) {
  cfg.validate();
  Rng base(cfg.seed);
  Rng profile_rng = base.fork(0x9999);
  auto profiles = make_profiles(cfg, profile_rng);
  std::vector<core::SITSSample> out;
  out.reserve(size_t(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    Rng rng = base.fork(uint64_t(i) + 1);
    Layout layout = generate_layout(cfg, rng, i);
    core::SITSSample s = render_sequence(layout, profiles, cfg, rng);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "synt_%05d", i);
    s.sample_id = buf;
    s.fold = i % 5 + 1;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace sitspan::sitsgen
