#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>

#include <gtest/gtest.h>

#include "protodrift/error.hpp"
#include "protodrift/synth.hpp"

using namespace protodrift;

namespace {

const World& default_world() {
  static const World w = generate_world(WorldConfig{});
  return w;
}

// Average ranks, ties share their mean rank.
std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  const auto ra = ranks(a), rb = ranks(b);
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / ra.size();
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / rb.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(Synth, DefaultCardinality) {
  const World& w = default_world();
  EXPECT_EQ(w.train.size(), 2000u);
  EXPECT_EQ(w.test.size(), 1000u);
  EXPECT_EQ(w.classes.size(), 10u);
  for (const auto& p : w.train) {
    EXPECT_EQ(p.x.size(), 16u);
    EXPECT_GE(p.u, 0.0);
    EXPECT_LE(p.u, 1.0);
  }
}

TEST(Synth, MeansLieOnTheRadiusSphere) {
  for (const auto& m : default_world().means) {
    double n = 0;
    for (double v : m) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 4.0, 1e-12);
  }
}

TEST(Synth, SameSeedIsByteIdentical) {
  WorldConfig c;
  c.seed = 1234;
  const World a = generate_world(c), b = generate_world(c);
  EXPECT_EQ(a, b);
  EXPECT_EQ(to_json(a).dump(), to_json(b).dump());
  c.seed = 1235;
  EXPECT_NE(generate_world(c).train, a.train);
}

TEST(Synth, VanishingSigmaGivesHighIou) {
  WorldConfig c;
  c.cluster_sigma = 1e-9;
  for (const auto& p : generate_world(c).train) EXPECT_GE(p.u, 0.9);
}

TEST(Synth, IouDecreasesWithDistanceWithinEachClass) {
  const World& w = default_world();
  for (int id : w.classes.ids()) {
    std::vector<double> u, negdist;
    for (const auto& p : w.train) {
      if (p.y != id) continue;
      u.push_back(p.u);
      negdist.push_back(-euclidean(p.x, w.means[static_cast<std::size_t>(id)]));
    }
    EXPECT_GE(spearman(u, negdist), 0.9) << "class " << id;
  }
}

TEST(Synth, TrueMeanLinearClassifierSeparatesBaseClasses) {
  // argmin ||x - m_c||^2 == argmax (m_c . x - ||m_c||^2 / 2), a linear rule.
  const World& w = default_world();
  const auto base = w.base_ids();
  std::size_t hit = 0, n = 0;
  for (const auto& p : w.test) {
    if (std::find(base.begin(), base.end(), p.y) == base.end()) continue;
    int best = base.front();
    double best_score = -1e300;
    for (int c : base) {
      const auto& m = w.means[static_cast<std::size_t>(c)];
      double s = 0, mm = 0;
      for (std::size_t k = 0; k < m.size(); ++k) {
        s += m[k] * p.x[k];
        mm += m[k] * m[k];
      }
      s -= 0.5 * mm;
      if (s > best_score) best_score = s, best = c;
    }
    hit += best == p.y;
    ++n;
  }
  EXPECT_GE(static_cast<double>(hit) / n, 0.95);
}

TEST(Synth, BaseAndNovelIdsAreDisjoint) {
  const World& w = default_world();
  const auto b = w.base_ids(), nv = w.novel_ids();
  EXPECT_EQ(b.size(), 7u);
  EXPECT_EQ(nv.size(), 3u);
  std::set<int> all(b.begin(), b.end());
  for (int id : nv) EXPECT_TRUE(all.insert(id).second);
}

TEST(Synth, BackgroundSamplesAreLowIouAndUnregistered) {
  WorldConfig c;
  c.background = true;
  const World w = generate_world(c);
  EXPECT_EQ(w.train.size(), 2200u);
  for (const auto& p : w.train) {
    if (p.y != kBackgroundClass) continue;
    EXPECT_LT(p.u, 0.3);
    EXPECT_FALSE(w.classes.contains(p.y));
  }
}

TEST(Synth, ConfigValidation) {
  WorldConfig c;
  c.num_base = 1;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = {};
  c.num_novel = 0;
  EXPECT_THROW(generate_world(c), ConfigError);
  c = {};
  c.cluster_sigma = 0;
  EXPECT_THROW(generate_world(c), ConfigError);
}

TEST(KShot, OneShotThreeClasses) {
  const World& w = default_world();
  const auto ids = w.novel_ids();
  const Dataset s = sample_kshot(w.train, ids, 1, 9);
  ASSERT_EQ(s.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(s[i].y, ids[i]);
}

TEST(KShot, ExactlyKDistinctSamplesPerClass) {
  const World& w = default_world();
  const auto ids = w.novel_ids();
  const Dataset s = sample_kshot(w.train, ids, 10, 3);
  ASSERT_EQ(s.size(), 30u);
  for (int id : ids) {
    std::set<std::vector<double>> seen;
    for (const auto& p : s)
      if (p.y == id) seen.insert(p.x);
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(KShot, Errors) {
  const World& w = default_world();
  const auto ids = w.novel_ids();
  EXPECT_THROW(sample_kshot(w.train, ids, 201, 0), Error);
  EXPECT_THROW(sample_kshot(w.train, ids, 0, 0), Error);
}

TEST(KShot, SameSeedSameSupport) {
  const World& w = default_world();
  const auto ids = w.novel_ids();
  EXPECT_EQ(sample_kshot(w.train, ids, 5, 77), sample_kshot(w.train, ids, 5, 77));
  EXPECT_NE(sample_kshot(w.train, ids, 5, 77), sample_kshot(w.train, ids, 5, 78));
}

TEST(Synth, JsonRoundTrip) {
  WorldConfig c;
  c.samples_per_class_train = 20;
  c.samples_per_class_test = 10;
  c.seed = 5;
  const World w = generate_world(c);
  const auto path = std::filesystem::temp_directory_path() / "protodrift_world_roundtrip.json";
  save_world(w, path.string());
  EXPECT_EQ(load_world(path.string()), w);
  std::filesystem::remove(path);
}

TEST(Synth, DatasetJsonRejectsBadIou) {
  json j = json::array({{{"x", {1.0}}, {"y", 0}, {"u", 1.5}}});
  EXPECT_THROW(dataset_from_json(j, "train"), ConfigError);
  j = json::array({{{"x", {1.0}}, {"y", 0}, {"u", 0.5}, {"z", 1}}});
  EXPECT_THROW(dataset_from_json(j, "train"), ConfigError);
}
