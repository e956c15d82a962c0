#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "sitspan/panmerge.hpp"

using namespace sitspan;
using panmerge::MaskProposal;
using panmerge::PanopticMap;

namespace {

MaskProposal rect_proposal(double q, int64_t r0, int64_t c0, int64_t nr, int64_t nc,
                           int cls, int k_classes = 4) {
  MaskProposal p;
  p.quality = q;
  p.center_i = r0 + nr / 2;
  p.center_j = c0 + nc / 2;
  p.r0 = r0;
  p.c0 = c0;
  p.mask = Tensor<uint8_t>::full({nr, nc}, 1);
  p.class_probs.assign(size_t(k_classes), 0.05);
  p.class_probs[size_t(cls - 1)] = 0.9;
  return p;
}

// independent reference: per-pixel argmax over qualities, then one removal pass
PanopticMap brute_force_merge(const std::vector<MaskProposal>& props,
                              double threshold, int64_t h, int64_t w) {
  std::vector<size_t> keep;
  for (size_t k = 0; k < props.size(); ++k)
    if (props[k].quality >= threshold) keep.push_back(k);
  std::sort(keep.begin(), keep.end(), [&](size_t a, size_t b) {
    if (props[a].quality != props[b].quality)
      return props[a].quality > props[b].quality;
    if (props[a].center_i != props[b].center_i)
      return props[a].center_i < props[b].center_i;
    return props[a].center_j < props[b].center_j;
  });
  auto covers = [&](const MaskProposal& p, int64_t i, int64_t j) {
    int64_t r = i - p.r0, c = j - p.c0;
    return r >= 0 && c >= 0 && r < p.mask.dim(0) && c < p.mask.dim(1) &&
           p.mask.at(r, c) != 0;
  };
  // ownership by the strongest covering proposal
  Tensor<int64_t> own = Tensor<int64_t>::full({h, w}, -1);
  for (int64_t i = 0; i < h; ++i)
    for (int64_t j = 0; j < w; ++j)
      for (size_t rank = 0; rank < keep.size(); ++rank)
        if (covers(props[keep[rank]], i, j)) {
          own.at(i, j) = int64_t(rank);
          break;
        }
  // removal: strictly more than half the original pixels lost
  std::vector<int64_t> orig(keep.size(), 0), kept(keep.size(), 0);
  for (size_t rank = 0; rank < keep.size(); ++rank)
    for (int64_t r = 0; r < props[keep[rank]].mask.dim(0); ++r)
      for (int64_t c = 0; c < props[keep[rank]].mask.dim(1); ++c)
        if (props[keep[rank]].mask.at(r, c)) ++orig[rank];
  for (int64_t k = 0; k < h * w; ++k)
    if (own[k] >= 0) ++kept[size_t(own[k])];
  std::vector<int32_t> id_of(keep.size(), 0);
  PanopticMap map;
  map.semantic = Tensor<int32_t>::zeros({h, w});
  map.instance = Tensor<int32_t>::zeros({h, w});
  int32_t next = 0;
  for (size_t rank = 0; rank < keep.size(); ++rank) {
    if (orig[rank] == 0 || 2 * kept[rank] < orig[rank]) continue;
    id_of[rank] = ++next;
    const auto& cp = props[keep[rank]].class_probs;
    int32_t cls = 1;
    for (size_t c = 1; c < cp.size(); ++c)
      if (cp[c] > cp[size_t(cls - 1)]) cls = int32_t(c) + 1;
    map.instances.push_back({next, cls, props[keep[rank]].quality});
  }
  for (int64_t k = 0; k < h * w; ++k) {
    if (own[k] < 0 || id_of[size_t(own[k])] == 0) continue;
    map.instance[k] = id_of[size_t(own[k])];
    map.semantic[k] = map.instances[size_t(map.instance[k] - 1)].sem_class;
  }
  return map;
}

}  // namespace

TEST_CASE("binarize thresholds at 0.4 inclusive") {
  Tensor<float> all_half = Tensor<float>::full({3, 3}, 0.5f);
  auto b1 = panmerge::binarize(all_half);
  for (int64_t k = 0; k < 9; ++k) CHECK(b1[k] == 1);
  Tensor<float> low = Tensor<float>::full({3, 3}, 0.39f);
  auto b2 = panmerge::binarize(low);
  for (int64_t k = 0; k < 9; ++k) CHECK(b2[k] == 0);
  Tensor<double> edge = Tensor<double>::full({2, 2}, 0.4);
  auto b3 = panmerge::binarize(edge);
  for (int64_t k = 0; k < 4; ++k) CHECK(b3[k] == 1);  // >= keeps the boundary
}

TEST_CASE("disjoint masks all survive unchanged") {
  std::vector<MaskProposal> props{rect_proposal(0.9, 0, 0, 4, 4, 1),
                                  rect_proposal(0.5, 8, 8, 4, 4, 2)};
  auto r = panmerge::resolve_overlaps(props, 0.0, 16, 16);
  CHECK(r.surviving.size() == 2);
  PanopticMap map = panmerge::to_panoptic(props, r, 16, 16);
  CHECK(map.instance.at(1, 1) == 1);
  CHECK(map.instance.at(9, 9) == 2);
  CHECK(map.semantic.at(9, 9) == 2);
}

TEST_CASE("a mask losing more than half its pixels is removed, pixels freed") {
  // high-q 4x6 mask overlaps 60% of a low-q 4x5 mask
  std::vector<MaskProposal> props{rect_proposal(0.5, 0, 0, 4, 5, 1),
                                  rect_proposal(0.9, 0, 2, 4, 6, 2)};
  auto r = panmerge::resolve_overlaps(props, 0.0, 8, 8);
  REQUIRE(r.surviving.size() == 1);
  CHECK(props[r.surviving[0]].quality == 0.9);
  PanopticMap map = panmerge::to_panoptic(props, r, 8, 8);
  // the removed mask's unique pixels become background, not second-choice
  CHECK(map.instance.at(0, 0) == 0);
  CHECK(map.instance.at(0, 1) == 0);
  CHECK(map.instance.at(0, 3) == 1);
}

TEST_CASE("losing exactly half is kept (strictly-more-than rule)") {
  std::vector<MaskProposal> props{rect_proposal(0.5, 0, 0, 4, 4, 1),
                                  rect_proposal(0.9, 0, 2, 4, 4, 2)};
  // overlap is columns 2..3 of the low mask: exactly 8 of its 16 pixels
  auto r = panmerge::resolve_overlaps(props, 0.0, 8, 8);
  CHECK(r.surviving.size() == 2);
  PanopticMap map = panmerge::to_panoptic(props, r, 8, 8);
  CHECK(map.instance.at(0, 0) != 0);   // remaining half still owned
  int32_t low_id = map.instance.at(0, 0);
  CHECK(map.instance.at(0, 2) != low_id);  // contested pixels went high-q
}

TEST_CASE("quality threshold drops proposals before resolution") {
  std::vector<MaskProposal> props{rect_proposal(0.15, 0, 0, 4, 4, 1),
                                  rect_proposal(0.9, 8, 8, 4, 4, 2)};
  PanopticMap map = panmerge::merge(props, 0.2, 16, 16);
  CHECK(map.instances.size() == 1);
  CHECK(map.instance.at(1, 1) == 0);
}

TEST_CASE("to_panoptic edge cases") {
  SUBCASE("zero proposals: all background") {
    PanopticMap map = panmerge::merge({}, 0.0, 8, 8);
    for (int64_t k = 0; k < 64; ++k) {
      CHECK(map.instance[k] == 0);
      CHECK(map.semantic[k] == 0);
    }
  }
  SUBCASE("single full-image mask of class 3") {
    std::vector<MaskProposal> props{rect_proposal(0.7, 0, 0, 8, 8, 3)};
    PanopticMap map = panmerge::merge(props, 0.0, 8, 8);
    REQUIRE(map.instances.size() == 1);
    for (int64_t k = 0; k < 64; ++k) {
      CHECK(map.instance[k] == 1);
      CHECK(map.semantic[k] == 3);
    }
  }
  SUBCASE("three survivors get ids by quality rank") {
    std::vector<MaskProposal> props{rect_proposal(0.4, 8, 8, 3, 3, 1),
                                    rect_proposal(0.9, 0, 0, 3, 3, 2),
                                    rect_proposal(0.6, 4, 4, 3, 3, 3)};
    PanopticMap map = panmerge::merge(props, 0.0, 12, 12);
    CHECK(map.instance.at(0, 0) == 1);  // q=0.9
    CHECK(map.instance.at(4, 4) == 2);  // q=0.6
    CHECK(map.instance.at(8, 8) == 3);  // q=0.4
  }
}

TEST_CASE("matches the brute-force reference on random proposal sets") {
  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<MaskProposal> props;
    int n = 1 + int(rng.uniform_int(10));
    for (int k = 0; k < n; ++k) {
      int64_t nr = 2 + rng.uniform_int(12), nc = 2 + rng.uniform_int(12);
      int64_t r0 = rng.uniform_int(32 - nr), c0 = rng.uniform_int(32 - nc);
      MaskProposal p = rect_proposal(rng.uniform(0.05, 1.0), r0, c0, nr, nc,
                                     1 + int(rng.uniform_int(4)));
      // randomize mask interior so shapes are not plain rectangles
      for (int64_t i = 0; i < nr; ++i)
        for (int64_t j = 0; j < nc; ++j)
          if (rng.uniform() < 0.25) p.mask.at(i, j) = 0;
      props.push_back(std::move(p));
    }
    double thr = rng.uniform(0.0, 0.4);
    PanopticMap got = panmerge::merge(props, thr, 32, 32);
    PanopticMap want = brute_force_merge(props, thr, 32, 32);
    REQUIRE(got.instances.size() == want.instances.size());
    for (int64_t k = 0; k < 32 * 32; ++k) {
      REQUIRE(got.instance[k] == want.instance[k]);
      REQUIRE(got.semantic[k] == want.semantic[k]);
    }
    got.validate();  // panoptic invariants hold on fuzz inputs
  }
}

TEST_CASE("deterministic output and tie-breaks") {
  std::vector<MaskProposal> props{rect_proposal(0.5, 0, 0, 4, 4, 1),
                                  rect_proposal(0.5, 0, 2, 4, 4, 2)};
  PanopticMap a = panmerge::merge(props, 0.0, 8, 8);
  PanopticMap b = panmerge::merge(props, 0.0, 8, 8);
  for (int64_t k = 0; k < 64; ++k) CHECK(a.instance[k] == b.instance[k]);
  // equal quality: the mask with the smaller center row wins the contest
  CHECK(a.instance.at(0, 2) == 1);
}

TEST_CASE("threshold tuning") {
  int64_t h = 16, w = 16;
  core::SITSSample truth;
  truth.sample_id = "t";
  truth.images = Tensor<float>::zeros({1, 1, h, w});
  truth.dates = Tensor<int64_t>::zeros({1});
  truth.semantic = Tensor<int32_t>::zeros({h, w});
  truth.instances = Tensor<int32_t>::zeros({h, w});
  for (int g = 0; g < 2; ++g) {
    core::ParcelRecord p;
    p.id = g + 1;
    p.mask = Tensor<uint8_t>::zeros({h, w});
    int64_t r0 = g * 8, c0 = g * 8;
    for (int64_t i = r0; i < r0 + 6; ++i)
      for (int64_t j = c0; j < c0 + 6; ++j) {
        p.mask.at(i, j) = 1;
        truth.instances.at(i, j) = p.id;
        truth.semantic.at(i, j) = 1;
      }
    p.bbox_h = p.bbox_w = 6;
    p.center_i = r0 + 3;
    p.center_j = c0 + 3;
    p.crop_class = 1;
    truth.parcels.push_back(std::move(p));
  }

  SUBCASE("all proposals perfect: ties keep the lowest threshold, 0") {
    std::vector<MaskProposal> props{rect_proposal(0.8, 0, 0, 6, 6, 1),
                                    rect_proposal(0.9, 8, 8, 6, 6, 1)};
    double thr = panmerge::tune_quality_threshold({props}, {&truth}, h, w);
    CHECK(thr == doctest::Approx(0.0));
  }
  SUBCASE("spurious low-quality proposals push the threshold up") {
    std::vector<MaskProposal> props{
        rect_proposal(0.7, 0, 0, 6, 6, 1), rect_proposal(0.9, 8, 8, 6, 6, 1),
        rect_proposal(0.25, 2, 9, 4, 4, 1), rect_proposal(0.1, 9, 2, 4, 4, 1)};
    double thr = panmerge::tune_quality_threshold({props}, {&truth}, h, w);
    // any grid point in (0.25, 0.7] gives F1=1; the lowest such is 0.30
    CHECK(thr == doctest::Approx(0.30));
  }
  SUBCASE("nothing matches: F1 identically zero, returns the lowest value") {
    std::vector<MaskProposal> props{rect_proposal(0.9, 9, 1, 3, 3, 1)};
    double thr = panmerge::tune_quality_threshold({props}, {&truth}, h, w);
    CHECK(thr == doctest::Approx(0.0));
  }
  SUBCASE("empty validation set is rejected") {
    CHECK_THROWS_AS(panmerge::tune_quality_threshold({}, {}, h, w), Error);
  }
}

TEST_CASE("png-16 serialization round trip") {
  std::vector<MaskProposal> props{rect_proposal(0.8, 1, 1, 5, 5, 2),
                                  rect_proposal(0.6, 10, 9, 4, 5, 3)};
  PanopticMap map = panmerge::merge(props, 0.0, 16, 16);
  auto base = std::filesystem::temp_directory_path() / "sitspan_panmap";
  panmerge::save_panoptic(base, map);
  PanopticMap back = panmerge::load_panoptic(base);
  REQUIRE(back.instance.shape() == map.instance.shape());
  for (int64_t k = 0; k < map.instance.numel(); ++k) {
    CHECK(back.instance[k] == map.instance[k]);
    CHECK(back.semantic[k] == map.semantic[k]);
  }
  REQUIRE(back.instances.size() == map.instances.size());
  CHECK(back.instances[0].sem_class == map.instances[0].sem_class);
  CHECK(back.instances[1].quality == doctest::Approx(map.instances[1].quality));
}
