#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rsaforge/dataset.hpp"
#include "rsaforge/random.hpp"
#include "rsaforge/rsa.hpp"
#include "rsaforge/tensor.hpp"
#include "rsaforge/tensor_io.hpp"

// Synthetic "brain" fixtures. Real recordings are not redistributable, so the
// test and demo data are subject RDM sets built as a shared latent RDM plus
// per-subject seeded noise, re-symmetrized, clipped to the correlation-
// distance range [0,2], zero diagonal. The latent encodes class structure:
// stimuli of the same class are similar, across classes dissimilar, with a
// little jitter so no two entries tie.

namespace rsaforge {

inline Rdm make_class_latent_rdm(const std::vector<int>& labels, double within, double between,
                                 std::uint64_t seed, double jitter = 0.08) {
  const std::size_t n = labels.size();
  if (n < 3) throw ValueError("make_class_latent_rdm: need at least 3 stimuli");
  SplitMix64 rng(seed);
  Rdm rdm{Tensor({n, n})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double base = labels[i] == labels[j] ? within : between;
      const double v = std::clamp(base + rng.uniform(-jitter, jitter), 0.0, 2.0);
      rdm.matrix.at2(i, j) = static_cast<float>(v);
      rdm.matrix.at2(j, i) = static_cast<float>(v);
    }
  return rdm;
}

inline SubjectRdmSet make_subject_set(const Rdm& latent, std::string region,
                                      std::size_t n_subjects, double noise_sd,
                                      std::uint64_t seed) {
  if (n_subjects < 2) throw ValueError("make_subject_set: need at least 2 subjects");
  const std::size_t n = latent.n();
  SubjectRdmSet set;
  set.region = std::move(region);
  SplitMix64 rng(seed);
  for (std::size_t s = 0; s < n_subjects; ++s) {
    Rdm rdm{Tensor({n, n})};
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        const double v = std::clamp(
            static_cast<double>(latent.matrix.at2(i, j)) + noise_sd * rng.normal(), 0.0, 2.0);
        rdm.matrix.at2(i, j) = static_cast<float>(v);
        rdm.matrix.at2(j, i) = static_cast<float>(v);
      }
    set.subjects.push_back(std::move(rdm));
  }
  return set;
}

// Brain-data archive: one [S,n,n] tensor per region.
inline NamedTensor pack_subject_set(const SubjectRdmSet& set) {
  validate_subject_set(set);
  const std::size_t s_count = set.subjects.size();
  const std::size_t n = set.n_stimuli();
  Tensor packed({s_count, n, n});
  for (std::size_t s = 0; s < s_count; ++s)
    std::copy(set.subjects[s].matrix.data(), set.subjects[s].matrix.data() + n * n,
              packed.data() + s * n * n);
  return NamedTensor{set.region, std::move(packed)};
}

inline SubjectRdmSet unpack_subject_set(const NamedTensor& record) {
  require_rank(record.tensor, 3, "brain region tensor \"" + record.name + '"');
  const std::size_t s_count = record.tensor.dim(0);
  const std::size_t n = record.tensor.dim(1);
  if (record.tensor.dim(2) != n)
    throw ShapeError("brain region tensor \"" + record.name + "\" is not [S,n,n]");
  SubjectRdmSet set;
  set.region = record.name;
  for (std::size_t s = 0; s < s_count; ++s) {
    Rdm rdm{Tensor::from_data(
        {n, n}, std::vector<float>(record.tensor.data() + s * n * n,
                                   record.tensor.data() + (s + 1) * n * n))};
    set.subjects.push_back(std::move(rdm));
  }
  validate_subject_set(set);
  return set;
}

inline void write_brain_archive(const std::filesystem::path& path,
                                const std::vector<SubjectRdmSet>& sets) {
  std::vector<NamedTensor> records;
  records.reserve(sets.size());
  for (const auto& s : sets) records.push_back(pack_subject_set(s));
  write_archive_file(path, records);
}

// A complete demo stimulus set: n images balanced across classes plus EVC/IT
// subject RDMs derived from the class structure. IT tracks object identity
// tightly; EVC has weaker class structure and more subject noise.
struct DemoSet {
  LabeledDataset stimuli;
  SubjectRdmSet evc, it;
};

inline DemoSet make_demo_set(int classes, std::size_t n_stimuli, std::size_t image_size,
                             std::size_t subjects, double noise_sd, std::uint64_t seed) {
  const int per_class = static_cast<int>((n_stimuli + static_cast<std::size_t>(classes) - 1) /
                                         static_cast<std::size_t>(classes));
  const LabeledDataset full = gen_synthetic(classes, per_class, image_size, image_size, seed);

  DemoSet demo;
  demo.stimuli.class_count = classes;
  demo.stimuli.images = Tensor({n_stimuli, 3, image_size, image_size});
  const std::size_t plane = 3 * image_size * image_size;
  std::size_t taken = 0;
  // Round-robin across classes keeps the subset balanced for any n.
  for (int k = 0; k < per_class && taken < n_stimuli; ++k)
    for (int c = 0; c < classes && taken < n_stimuli; ++c) {
      const std::size_t src = static_cast<std::size_t>(c) * static_cast<std::size_t>(per_class) +
                              static_cast<std::size_t>(k);
      std::copy(full.images.data() + src * plane, full.images.data() + (src + 1) * plane,
                demo.stimuli.images.data() + taken * plane);
      demo.stimuli.labels.push_back(full.labels[src]);
      ++taken;
    }

  const Rdm it_latent = make_class_latent_rdm(demo.stimuli.labels, 0.35, 1.30, seed + 101, 0.10);
  const Rdm evc_latent = make_class_latent_rdm(demo.stimuli.labels, 0.60, 1.05, seed + 202, 0.18);
  demo.it = make_subject_set(it_latent, "IT", subjects, noise_sd, seed + 303);
  demo.evc = make_subject_set(evc_latent, "EVC", subjects, noise_sd * 1.5, seed + 404);
  return demo;
}

inline std::vector<SubjectRdmSet> read_brain_archive(const std::filesystem::path& path) {
  std::vector<SubjectRdmSet> sets;
  for (const auto& r : read_archive_file(path)) sets.push_back(unpack_subject_set(r));
  std::sort(sets.begin(), sets.end(),
            [](const SubjectRdmSet& a, const SubjectRdmSet& b) { return a.region < b.region; });
  return sets;
}

} // namespace rsaforge
