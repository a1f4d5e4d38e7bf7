#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/tensor.hpp"

// Representational similarity analysis: dissimilarity matrices over stimuli,
// Spearman correlation as Pearson on fractional ranks, leave-one-out noise
// ceilings, and the noise-normalized squared-correlation percentage used to
// score each network layer against each brain region.
//
// Dissimilarity is correlation distance, 1 - Pearson(r_i, r_j), so entries
// live in [0,2]. RDM comparisons use the strict upper triangle, row-major.

namespace rsaforge {

// ---------------------------------------------------------------------------
// Rank statistics. All accumulation in 64-bit.
// ---------------------------------------------------------------------------

// Fractional ranks 1..n; tied values receive the average of the rank
// positions they cover.
inline std::vector<double> rank_transform(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 2) throw ValueError("rank_transform: need at least 2 values");
  for (std::size_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i]))
      throw ValueError("rank_transform: non-finite value at index " + std::to_string(i));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&x](std::size_t a, std::size_t b) { return x[a] < x[b]; });

  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
    // Positions i..j (0-based) share the average of ranks i+1..j+1.
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

// Centered product-moment correlation, two-pass.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = x.size();
  if (y.size() != n) throw ShapeError("pearson: vector lengths differ");
  if (n < 3) throw ValueError("pearson: need at least 3 values");
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw DegenerateInputError("pearson: correlation undefined for a constant vector");
  return sxy / std::sqrt(sxx * syy);
}

// Pearson correlation between rank variables. Tie-aware by construction; the
// 1 - 6*sum(d^2)/(n(n^2-1)) shortcut is never used here because it is wrong
// in the presence of ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(rank_transform(x), rank_transform(y));
}

// ---------------------------------------------------------------------------
// RDMs
// ---------------------------------------------------------------------------

struct Rdm {
  Tensor matrix;  // [n,n]

  std::size_t n() const { return matrix.rank() == 2 ? matrix.dim(0) : 0; }
};

inline void validate_rdm(const Rdm& rdm, const std::string& what = "rdm") {
  require_rank(rdm.matrix, 2, what);
  const std::size_t n = rdm.matrix.dim(0);
  if (rdm.matrix.dim(1) != n) throw ShapeError(what + ": matrix must be square");
  if (n < 3) throw ShapeError(what + ": need at least 3 stimuli");
  for (std::size_t i = 0; i < n; ++i) {
    if (rdm.matrix.at2(i, i) != 0.0f)
      throw ValueError(what + ": diagonal entry " + std::to_string(i) + " is not zero");
    for (std::size_t j = i + 1; j < n; ++j) {
      const float a = rdm.matrix.at2(i, j);
      const float b = rdm.matrix.at2(j, i);
      if (std::abs(a - b) > 1e-6f)
        throw ValueError(what + ": asymmetric at (" + std::to_string(i) + "," +
                         std::to_string(j) + ")");
      if (a < 0.0f || a > 2.0f)
        throw ValueError(what + ": entry out of correlation-distance range [0,2]");
    }
  }
}

// Strict upper triangle, row-major: (0,1), (0,2), ..., (n-2,n-1).
inline std::vector<double> upper_triangle(const Rdm& rdm) {
  const std::size_t n = rdm.n();
  std::vector<double> v;
  v.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) v.push_back(rdm.matrix.at2(i, j));
  return v;
}

// Correlation-distance RDM from activations [N,D]: entry (i,j) is
// 1 - Pearson(row_i, row_j), diagonal forced to zero.
inline Rdm compute_rdm(const Tensor& activations) {
  require_rank(activations, 2, "compute_rdm activations");
  const std::size_t n = activations.dim(0), d = activations.dim(1);
  if (n < 3) throw ShapeError("compute_rdm: need at least 3 stimuli");
  if (d < 2) throw ShapeError("compute_rdm: need at least 2 features per stimulus");

  // Precompute row means and centered norms; flag constant rows up front.
  std::vector<double> mean(n), norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = activations.data() + i * d;
    double acc = 0.0;
    for (std::size_t k = 0; k < d; ++k) acc += row[k];
    mean[i] = acc / static_cast<double>(d);
    double ss = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      const double dv = row[k] - mean[i];
      ss += dv * dv;
    }
    if (ss == 0.0)
      throw DegenerateInputError("compute_rdm: activation row " + std::to_string(i) +
                                 " is constant");
    norm[i] = std::sqrt(ss);
  }

  Rdm rdm{Tensor({n, n})};
  for (std::size_t i = 0; i < n; ++i) {
    const float* ri = activations.data() + i * d;
    for (std::size_t j = i + 1; j < n; ++j) {
      const float* rj = activations.data() + j * d;
      double sxy = 0.0;
      for (std::size_t k = 0; k < d; ++k) sxy += (ri[k] - mean[i]) * (rj[k] - mean[j]);
      const double r = std::clamp(sxy / (norm[i] * norm[j]), -1.0, 1.0);
      const auto dist = static_cast<float>(1.0 - r);
      rdm.matrix.at2(i, j) = dist;
      rdm.matrix.at2(j, i) = dist;
    }
  }
  return rdm;
}

// ---------------------------------------------------------------------------
// Noise ceilings and model scoring
// ---------------------------------------------------------------------------

struct SubjectRdmSet {
  std::string region;  // e.g. "EVC" or "IT"
  std::vector<Rdm> subjects;

  std::size_t n_stimuli() const { return subjects.empty() ? 0 : subjects.front().n(); }
};

inline void validate_subject_set(const SubjectRdmSet& set) {
  if (set.subjects.size() < 2)
    throw ValueError("subject set \"" + set.region + "\" needs at least 2 subjects");
  const std::size_t n = set.subjects.front().n();
  for (std::size_t s = 0; s < set.subjects.size(); ++s) {
    validate_rdm(set.subjects[s], "subject " + std::to_string(s) + " (" + set.region + ")");
    if (set.subjects[s].n() != n)
      throw ShapeError("subject set \"" + set.region + "\": stimulus counts differ");
  }
}

struct NoiseCeiling {
  double lower = 0.0;  // mean over subjects of squared leave-one-out correlations
  double upper = 0.0;  // same, against the mean including the subject
};

// Lower bound: each subject against the mean RDM of the other S-1 subjects.
// Upper bound: each subject against the mean including itself. Both are
// returned as means of the squared per-subject Spearman correlations.
inline NoiseCeiling noise_ceiling(const SubjectRdmSet& set) {
  validate_subject_set(set);
  const std::size_t s_count = set.subjects.size();
  std::vector<std::vector<double>> tris(s_count);
  for (std::size_t s = 0; s < s_count; ++s) tris[s] = upper_triangle(set.subjects[s]);
  const std::size_t t = tris[0].size();

  NoiseCeiling nc;
  for (std::size_t s = 0; s < s_count; ++s) {
    std::vector<double> loo(t, 0.0), all(t, 0.0);
    for (std::size_t o = 0; o < s_count; ++o)
      for (std::size_t i = 0; i < t; ++i) {
        all[i] += tris[o][i];
        if (o != s) loo[i] += tris[o][i];
      }
    for (std::size_t i = 0; i < t; ++i) {
      loo[i] /= static_cast<double>(s_count - 1);
      all[i] /= static_cast<double>(s_count);
    }
    const double lo = spearman(tris[s], loo);
    const double hi = spearman(tris[s], all);
    nc.lower += lo * lo;
    nc.upper += hi * hi;
  }
  nc.lower /= static_cast<double>(s_count);
  nc.upper /= static_cast<double>(s_count);
  return nc;
}

struct ModelScore {
  double mean_sq_r = 0.0;       // mean over subjects of r_s^2
  double normalized_pct = 0.0;  // 100 * mean_sq_r / noise_ceiling.lower
  double mean_r = 0.0;          // signed mean, diagnostic only
  std::vector<double> per_subject_r;
};

// Scores a model RDM against every subject: r_s = Spearman of the two upper
// triangles, then 100 * mean(r_s^2) / nc_lower.
inline ModelScore score_model(const Rdm& model_rdm, const SubjectRdmSet& subjects) {
  validate_rdm(model_rdm, "model rdm");
  validate_subject_set(subjects);
  if (model_rdm.n() != subjects.n_stimuli())
    throw ShapeError("score_model: model has " + std::to_string(model_rdm.n()) +
                     " stimuli, subjects have " + std::to_string(subjects.n_stimuli()));

  const auto model_tri = upper_triangle(model_rdm);
  const NoiseCeiling nc = noise_ceiling(subjects);
  if (!(nc.lower > 0.0))
    throw DegenerateInputError("score_model: noise ceiling is zero, score undefined");

  ModelScore score;
  for (const auto& subj : subjects.subjects) {
    const double r = spearman(model_tri, upper_triangle(subj));
    score.per_subject_r.push_back(r);
    score.mean_sq_r += r * r;
    score.mean_r += r;
  }
  const auto s_count = static_cast<double>(subjects.subjects.size());
  score.mean_sq_r /= s_count;
  score.mean_r /= s_count;
  score.normalized_pct = 100.0 * score.mean_sq_r / nc.lower;
  return score;
}

// Sample standard deviation across subjects of the per-subject normalized
// percentages 100 * r_s^2 / nc_lower.
inline double across_subject_stddev(const std::vector<double>& per_subject_r, double nc_lower) {
  const std::size_t s = per_subject_r.size();
  if (s < 2) return 0.0;
  std::vector<double> vals(s);
  for (std::size_t i = 0; i < s; ++i)
    vals[i] = 100.0 * per_subject_r[i] * per_subject_r[i] / nc_lower;
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(s);
  double ss = 0.0;
  for (double v : vals) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(s - 1));
}

// Best layer: the one whose scores, averaged over the stimulus sets, are
// maximal. Ties break toward the earlier layer in network order.
inline std::string best_layer(const std::vector<std::string>& layer_order,
                              const std::map<std::string, std::vector<double>>& set_scores) {
  if (layer_order.empty()) throw ValueError("best_layer: no layers to rank");
  std::size_t expected_sets = 0;
  bool found_any = false;
  std::string best;
  double best_mean = 0.0;
  for (const auto& layer : layer_order) {
    auto it = set_scores.find(layer);
    if (it == set_scores.end() || it->second.empty())
      throw ValueError("best_layer: layer \"" + layer + "\" has no scores");
    if (!found_any) {
      expected_sets = it->second.size();
    } else if (it->second.size() != expected_sets) {
      throw ValueError("best_layer: layer \"" + layer + "\" scored on " +
                       std::to_string(it->second.size()) + " sets, expected " +
                       std::to_string(expected_sets));
    }
    double mean = 0.0;
    for (double v : it->second) mean += v;
    mean /= static_cast<double>(it->second.size());
    if (!found_any || mean > best_mean) {
      best = layer;
      best_mean = mean;
      found_any = true;
    }
  }
  return best;
}

} // namespace rsaforge
