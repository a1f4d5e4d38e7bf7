#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rsaforge/fixtures.hpp"
#include "rsaforge/random.hpp"
#include "rsaforge/rsa.hpp"

using namespace rsaforge;

// ---------------------------------------------------------------------------
// Independent reference implementations. Different algorithms on purpose:
// counting-based ranks and the raw-sum correlation formula, so agreement
// with the library is meaningful.
// ---------------------------------------------------------------------------

namespace {

std::vector<double> ref_rank(const std::vector<double>& x) {
  const std::size_t n = x.size();
  std::vector<double> r(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (x[j] < x[i]) ++less;
      if (x[j] == x[i]) ++equal;  // includes self
    }
    r[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return r;
}

double ref_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (sxy - sx * sy / n) / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
}

double ref_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return ref_pearson(ref_rank(x), ref_rank(y));
}

// Valid only without ties.
double spearman_shortcut(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ref_rank(x), ry = ref_rank(y);
  const auto n = static_cast<double>(x.size());
  double d2 = 0;
  for (std::size_t i = 0; i < x.size(); ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

Rdm rdm_from_triangle(std::size_t n, const std::vector<double>& tri) {
  Rdm rdm{Tensor({n, n})};
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++k) {
      rdm.matrix.at2(i, j) = static_cast<float>(tri[k]);
      rdm.matrix.at2(j, i) = static_cast<float>(tri[k]);
    }
  return rdm;
}

// Distinct dyadic triangle entries so every derived quantity is exact.
Rdm dyadic_rdm(std::size_t n) {
  const std::size_t t = n * (n - 1) / 2;
  std::vector<double> tri(t);
  for (std::size_t k = 0; k < t; ++k) tri[k] = static_cast<double>(k + 1) / 512.0;
  return rdm_from_triangle(n, tri);
}

std::vector<double> random_vector(SplitMix64& rng, std::size_t n, bool with_ties) {
  std::vector<double> v(n);
  for (auto& x : v)
    x = with_ties ? static_cast<double>(rng.index(std::max<std::size_t>(2, n / 2)))
                  : rng.uniform(-10.0, 10.0);
  return v;
}

} // namespace

// ---------------------------------------------------------------------------
// rank_transform
// ---------------------------------------------------------------------------

TEST_CASE("rank_transform on sorted input") {
  CHECK(rank_transform({10, 20, 30}) == std::vector<double>{1, 2, 3});
}

TEST_CASE("rank_transform full tie averages the covered positions") {
  CHECK(rank_transform({5, 5}) == std::vector<double>{1.5, 1.5});
}

TEST_CASE("rank_transform partial ties") {
  CHECK(rank_transform({3, 1, 4, 1}) == std::vector<double>{3, 1.5, 4, 1.5});
}

TEST_CASE("rank_transform agrees with the counting oracle") {
  SplitMix64 rng(19);
  for (int iter = 0; iter < 50; ++iter) {
    const auto v = random_vector(rng, 2 + rng.index(40), iter % 2 == 0);
    CHECK(rank_transform(v) == ref_rank(v));
  }
}

TEST_CASE("rank_transform rejects non-finite input") {
  CHECK_THROWS_AS(rank_transform({1.0, std::nan("")}), ValueError);
}

// ---------------------------------------------------------------------------
// pearson / spearman
// ---------------------------------------------------------------------------

TEST_CASE("pearson of an increasing affine map is exactly 1") {
  const std::vector<double> x = {1, 2, 5, 9};
  std::vector<double> y;
  for (double v : x) y.push_back(2.0 * v + 1.0);
  CHECK(pearson(x, y) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("pearson of a negation is exactly -1") {
  const std::vector<double> x = {1, 4, 2, 8};
  std::vector<double> y;
  for (double v : x) y.push_back(-v);
  CHECK(pearson(x, y) == doctest::Approx(-1.0).epsilon(1e-14));
}

TEST_CASE("pearson matches the independent reference within 1e-12") {
  const std::vector<double> x = {1, 2, 3, 4};
  const std::vector<double> y = {1, 2, 2, 4};
  CHECK(std::abs(pearson(x, y) - ref_pearson(x, y)) < 1e-12);
  SplitMix64 rng(20);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t n = 3 + rng.index(100);
    const auto a = random_vector(rng, n, false);
    const auto b = random_vector(rng, n, false);
    CHECK(std::abs(pearson(a, b) - ref_pearson(a, b)) < 1e-12);
  }
}

TEST_CASE("pearson raises a dedicated error on constant vectors") {
  CHECK_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), DegenerateInputError);
  CHECK_THROWS_AS(pearson({1, 2, 3}, {4, 4, 4}), DegenerateInputError);
}

TEST_CASE("spearman hand example") {
  // Ranks are the values themselves; Pearson on them is -1/2.
  CHECK(spearman({1, 2, 3}, {3, 1, 2}) == doctest::Approx(-0.5).epsilon(1e-14));
}

TEST_CASE("spearman is invariant under strictly monotone transforms") {
  SplitMix64 rng(22);
  for (int iter = 0; iter < 20; ++iter) {
    const std::size_t n = 4 + rng.index(30);
    const auto x = random_vector(rng, n, false);
    const auto y = random_vector(rng, n, false);
    std::vector<double> tx;
    for (double v : x) tx.push_back(std::exp(0.3 * v) + 5.0 * v);  // strictly increasing
    CHECK(spearman(tx, x) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(std::abs(spearman(tx, y) - spearman(x, y)) < 1e-12);
  }
}

TEST_CASE("spearman equals Pearson-on-fractional-ranks, ties included") {
  SplitMix64 rng(23);
  for (int iter = 0; iter < 100; ++iter) {
    const std::size_t n = 3 + rng.index(60);
    const auto x = random_vector(rng, n, true);
    const auto y = random_vector(rng, n, true);
    double ref;
    try {
      ref = ref_spearman(x, y);
    } catch (...) {
      continue;
    }
    if (!std::isfinite(ref)) continue;  // constant after ranking
    CHECK(std::abs(spearman(x, y) - ref) < 1e-12);
  }
}

TEST_CASE("spearman without ties matches the d^2 shortcut") {
  SplitMix64 rng(24);
  for (int iter = 0; iter < 50; ++iter) {
    const std::size_t n = 3 + rng.index(60);
    const auto x = random_vector(rng, n, false);
    const auto y = random_vector(rng, n, false);
    CHECK(std::abs(spearman(x, y) - spearman_shortcut(x, y)) < 1e-12);
  }
}

// ---------------------------------------------------------------------------
// compute_rdm
// ---------------------------------------------------------------------------

TEST_CASE("compute_rdm on affine-related and reversed rows") {
  const Tensor acts = Tensor::from_data({3, 3}, {1, 2, 3,  //
                                                 2, 4, 6,  //
                                                 3, 2, 1});
  const Rdm rdm = compute_rdm(acts);
  CHECK(rdm.matrix.at2(0, 1) == doctest::Approx(0.0f));  // perfectly correlated
  CHECK(rdm.matrix.at2(0, 2) == doctest::Approx(2.0f));  // perfectly anti-correlated
  for (std::size_t i = 0; i < 3; ++i) CHECK(rdm.matrix.at2(i, i) == 0.0f);
}

TEST_CASE("duplicated stimuli have zero dissimilarity") {
  SplitMix64 rng(25);
  Tensor acts({4, 6});
  for (std::size_t i = 0; i < acts.size(); ++i) acts[i] = rng.uniform_f(-1.0f, 1.0f);
  for (std::size_t k = 0; k < 6; ++k) acts.at2(3, k) = acts.at2(1, k);
  const Rdm rdm = compute_rdm(acts);
  CHECK(rdm.matrix.at2(1, 3) == 0.0f);
}

TEST_CASE("constant activation rows are reported by stimulus index") {
  Tensor acts({3, 4}, 0.0f);
  for (std::size_t k = 0; k < 4; ++k) {
    acts.at2(0, k) = static_cast<float>(k);
    acts.at2(2, k) = static_cast<float>(k * k);
  }
  acts.at2(1, 0) = acts.at2(1, 1) = acts.at2(1, 2) = acts.at2(1, 3) = 5.0f;
  CHECK_THROWS_WITH_AS(compute_rdm(acts), doctest::Contains("row 1"), DegenerateInputError);
}

TEST_CASE("rdm invariants hold and rdms are invariant to per-row positive affine maps") {
  SplitMix64 rng(26);
  for (int iter = 0; iter < 25; ++iter) {
    const std::size_t n = 3 + rng.index(8), d = 2 + rng.index(12);
    Tensor acts({n, d});
    for (std::size_t i = 0; i < acts.size(); ++i) acts[i] = rng.uniform_f(-2.0f, 2.0f);
    const Rdm rdm = compute_rdm(acts);
    validate_rdm(rdm);

    // Moderate scales: the shifted rows are stored as f32, and a huge offset
    // against a tiny scale would drown the centered signal in quantization.
    Tensor scaled({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      const float a = rng.uniform_f(0.5f, 2.0f), b = rng.uniform_f(-2.0f, 2.0f);
      for (std::size_t k = 0; k < d; ++k) scaled.at2(i, k) = a * acts.at2(i, k) + b;
    }
    const Rdm rdm2 = compute_rdm(scaled);
    for (std::size_t i = 0; i < n * n; ++i)
      CHECK(std::abs(rdm.matrix[i] - rdm2.matrix[i]) < 1e-6f);
  }
}

// ---------------------------------------------------------------------------
// noise_ceiling
// ---------------------------------------------------------------------------

TEST_CASE("identical subjects give a ceiling of exactly 1") {
  SubjectRdmSet set;
  set.region = "IT";
  for (int s = 0; s < 15; ++s) set.subjects.push_back(dyadic_rdm(6));
  const NoiseCeiling nc = noise_ceiling(set);
  CHECK(nc.lower == 1.0);
  CHECK(nc.upper == 1.0);
}

TEST_CASE("with two subjects the lower bound uses the partner directly") {
  SplitMix64 rng(27);
  const std::size_t n = 8;
  SubjectRdmSet set;
  set.region = "EVC";
  for (int s = 0; s < 2; ++s) {
    std::vector<double> tri(n * (n - 1) / 2);
    for (auto& v : tri) v = rng.uniform(0.1, 1.9);
    set.subjects.push_back(rdm_from_triangle(n, tri));
  }
  const NoiseCeiling nc = noise_ceiling(set);
  const double r = ref_spearman(upper_triangle(set.subjects[0]), upper_triangle(set.subjects[1]));
  CHECK(nc.lower == doctest::Approx(r * r).epsilon(1e-12));
}

TEST_CASE("noise ceiling matches a brute-force reimplementation") {
  SplitMix64 rng(28);
  for (int iter = 0; iter < 5; ++iter) {
    const std::size_t n = 5 + rng.index(6), s_count = 3 + rng.index(4);
    SubjectRdmSet set;
    set.region = "IT";
    for (std::size_t s = 0; s < s_count; ++s) {
      std::vector<double> tri(n * (n - 1) / 2);
      for (auto& v : tri) v = rng.uniform(0.05, 1.95);
      set.subjects.push_back(rdm_from_triangle(n, tri));
    }
    const NoiseCeiling nc = noise_ceiling(set);

    // Oracle: direct leave-one-out loops on the stored f32 triangles.
    double lower = 0.0, upper = 0.0;
    const std::size_t t = n * (n - 1) / 2;
    for (std::size_t s = 0; s < s_count; ++s) {
      std::vector<double> loo(t, 0.0), all(t, 0.0);
      for (std::size_t o = 0; o < s_count; ++o) {
        const auto tri = upper_triangle(set.subjects[o]);
        for (std::size_t i = 0; i < t; ++i) {
          all[i] += tri[i];
          if (o != s) loo[i] += tri[i];
        }
      }
      for (auto& v : loo) v /= static_cast<double>(s_count - 1);
      for (auto& v : all) v /= static_cast<double>(s_count);
      const double lo = ref_spearman(upper_triangle(set.subjects[s]), loo);
      const double hi = ref_spearman(upper_triangle(set.subjects[s]), all);
      lower += lo * lo;
      upper += hi * hi;
    }
    lower /= static_cast<double>(s_count);
    upper /= static_cast<double>(s_count);
    CHECK(std::abs(nc.lower - lower) < 1e-12);
    CHECK(std::abs(nc.upper - upper) < 1e-12);
  }
}

// ---------------------------------------------------------------------------
// score_model
// ---------------------------------------------------------------------------

TEST_CASE("a model equal to the shared subject RDM scores exactly 100") {
  SubjectRdmSet set;
  set.region = "IT";
  for (int s = 0; s < 7; ++s) set.subjects.push_back(dyadic_rdm(6));
  const ModelScore score = score_model(dyadic_rdm(6), set);
  CHECK(score.normalized_pct == 100.0);
  CHECK(score.mean_sq_r == 1.0);
  CHECK(score.mean_r == 1.0);
}

TEST_CASE("4-stimulus 2-subject fixture matches the composed oracle") {
  const std::vector<double> s1 = {0.2, 0.5, 0.9, 0.4, 0.7, 0.3};
  const std::vector<double> s2 = {0.3, 0.4, 1.0, 0.5, 0.6, 0.2};
  const std::vector<double> mt = {0.1, 0.6, 0.8, 0.5, 0.9, 0.2};
  SubjectRdmSet set;
  set.region = "EVC";
  set.subjects.push_back(rdm_from_triangle(4, s1));
  set.subjects.push_back(rdm_from_triangle(4, s2));
  const Rdm model = rdm_from_triangle(4, mt);

  // Oracle composition from the reference rank/Pearson implementations.
  const auto t1 = upper_triangle(set.subjects[0]);
  const auto t2 = upper_triangle(set.subjects[1]);
  const auto tm = upper_triangle(model);
  const double r1 = ref_spearman(tm, t1);
  const double r2 = ref_spearman(tm, t2);
  const double nc_lower =
      (ref_spearman(t1, t2) * ref_spearman(t1, t2) + ref_spearman(t2, t1) * ref_spearman(t2, t1)) /
      2.0;
  const double expected = 100.0 * ((r1 * r1 + r2 * r2) / 2.0) / nc_lower;

  const ModelScore score = score_model(model, set);
  CHECK(score.normalized_pct == doctest::Approx(expected).epsilon(1e-9));
  REQUIRE(score.per_subject_r.size() == 2);
  CHECK(score.per_subject_r[0] == doctest::Approx(r1).epsilon(1e-12));
  CHECK(score.per_subject_r[1] == doctest::Approx(r2).epsilon(1e-12));
}

TEST_CASE("score_model is invariant under a common stimulus relabeling") {
  SplitMix64 rng(29);
  const std::size_t n = 9;
  auto random_rdm = [&rng, n] {
    std::vector<double> tri(n * (n - 1) / 2);
    for (auto& v : tri) v = rng.uniform(0.05, 1.95);
    return rdm_from_triangle(n, tri);
  };
  SubjectRdmSet set;
  set.region = "IT";
  for (int s = 0; s < 4; ++s) set.subjects.push_back(random_rdm());
  const Rdm model = random_rdm();
  const double base = score_model(model, set).normalized_pct;

  auto perm = shuffled_indices(n, 5);
  auto permute = [&perm, n](const Rdm& r) {
    Rdm out{Tensor({n, n})};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        out.matrix.at2(i, j) = r.matrix.at2(perm[i], perm[j]);
    return out;
  };
  SubjectRdmSet pset;
  pset.region = "IT";
  for (const auto& s : set.subjects) pset.subjects.push_back(permute(s));
  const double permuted = score_model(permute(model), pset).normalized_pct;
  CHECK(permuted == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("score_model rejects mismatched stimulus counts") {
  SubjectRdmSet set;
  set.region = "IT";
  set.subjects.push_back(dyadic_rdm(6));
  set.subjects.push_back(dyadic_rdm(6));
  CHECK_THROWS_AS(score_model(dyadic_rdm(5), set), ShapeError);
}

TEST_CASE("flat subject triangles are a degenerate-input error") {
  Rdm flat = rdm_from_triangle(4, {0.5, 0.5, 0.5, 0.5, 0.5, 0.5});
  SubjectRdmSet set{"IT", {flat, flat}};
  CHECK_THROWS_AS(noise_ceiling(set), DegenerateInputError);
}

TEST_CASE("a permutation-shuffled subject triangle scores near zero") {
  const std::size_t n = 40, s_count = 6;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 4);
  const SubjectRdmSet set =
      make_subject_set(make_class_latent_rdm(labels, 0.4, 1.3, 71), "IT", s_count, 0.12, 72);

  auto tri = upper_triangle(set.subjects[0]);
  const auto perm = shuffled_indices(tri.size(), 73);
  std::vector<double> shuffled(tri.size());
  for (std::size_t i = 0; i < tri.size(); ++i) shuffled[i] = tri[perm[i]];
  const double pct = score_model(rdm_from_triangle(n, shuffled), set).normalized_pct;
  CHECK(pct < 5.0);
}

TEST_CASE("leave-one-out ideal predictor beats a random model") {
  const std::size_t n = 30, s_count = 8;
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
  const Rdm latent = make_class_latent_rdm(labels, 0.4, 1.3, 61);
  const SubjectRdmSet set = make_subject_set(latent, "IT", s_count, 0.15, 62);
  const NoiseCeiling nc = noise_ceiling(set);

  // Ideal predictor: score each subject against the mean of the others.
  double ideal = 0.0;
  const std::size_t t = n * (n - 1) / 2;
  for (std::size_t s = 0; s < s_count; ++s) {
    std::vector<double> loo(t, 0.0);
    for (std::size_t o = 0; o < s_count; ++o) {
      if (o == s) continue;
      const auto tri = upper_triangle(set.subjects[o]);
      for (std::size_t i = 0; i < t; ++i) loo[i] += tri[i];
    }
    for (auto& v : loo) v /= static_cast<double>(s_count - 1);
    const double r = ref_spearman(upper_triangle(set.subjects[s]), loo);
    ideal += r * r;
  }
  ideal = 100.0 * (ideal / static_cast<double>(s_count)) / nc.lower;

  SplitMix64 rng(63);
  std::vector<double> tri(t);
  for (auto& v : tri) v = rng.uniform(0.0, 2.0);
  const double random_pct = score_model(rdm_from_triangle(n, tri), set).normalized_pct;
  CHECK(ideal > random_pct);
  CHECK(ideal == doctest::Approx(100.0).epsilon(1e-9));
}

// ---------------------------------------------------------------------------
// best_layer
// ---------------------------------------------------------------------------

TEST_CASE("best_layer basics") {
  CHECK(best_layer({"fc"}, {{"fc", {12.0}}}) == "fc");
  CHECK(best_layer({"stage1", "fc"}, {{"stage1", {10.4, 10.4}}, {"fc", {15.5, 15.5}}}) == "fc");
  // Exact tie breaks toward the earlier layer in network order.
  CHECK(best_layer({"stage2", "fc"}, {{"stage2", {7.0, 9.0}}, {"fc", {8.0, 8.0}}}) == "stage2");
}

TEST_CASE("best_layer demands a score on every set") {
  CHECK_THROWS_AS(best_layer({"stage1", "fc"}, {{"stage1", {1.0, 2.0}}, {"fc", {3.0}}}),
                  ValueError);
  CHECK_THROWS_AS(best_layer({"stage1", "fc"}, {{"fc", {3.0, 1.0}}}), ValueError);
}
