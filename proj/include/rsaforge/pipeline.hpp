#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <json.hpp>

#include "rsaforge/dataset.hpp"
#include "rsaforge/errors.hpp"
#include "rsaforge/fixtures.hpp"
#include "rsaforge/image.hpp"
#include "rsaforge/model.hpp"
#include "rsaforge/rsa.hpp"
#include "rsaforge/tensor_io.hpp"

// File-level pipeline: extract activations from a checkpoint, turn activation
// archives into RDM files, score model RDMs against brain RDM archives, and
// keep a leaderboard ledger. The CLI is a thin shell over these functions,
// and `evaluate` is literally the extract -> rdm -> score chain, so the two
// paths cannot drift apart.

namespace rsaforge {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Worker pool size: RSAFORGE_THREADS caps it, default 1 (fully sequential).
// ---------------------------------------------------------------------------

inline std::size_t worker_count(std::size_t tasks) {
  std::size_t cap = 1;
  if (const char* env = std::getenv("RSAFORGE_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw UsageError("RSAFORGE_THREADS must be a positive integer");
    cap = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(cap, tasks));
}

// Runs fn(i) for i in [0,n). Tasks must be independent; results land in
// caller-owned slots, so the output is identical however many workers run.
template <typename Fn>
inline void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = worker_count(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::future<void>> futs;
  futs.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t)
    futs.push_back(std::async(std::launch::async, [&fn, t, n, workers] {
      for (std::size_t i = t; i < n; i += workers) fn(i);
    }));
  for (auto& f : futs) f.get();
}

// ---------------------------------------------------------------------------
// Stimulus images: a directory of .ppm files (sorted by name) or an "RDMA"
// archive containing an [N,3,H,W] tensor named "images".
// ---------------------------------------------------------------------------

struct PreprocessOptions {
  std::size_t resize_h = 64;
  std::size_t resize_w = 64;
  std::array<float, 3> mean = kDefaultMean;
  std::array<float, 3> std_dev = kDefaultStd;
};

inline Tensor load_stimulus_images(const fs::path& path, const PreprocessOptions& opt) {
  std::vector<Tensor> raw;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(path))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    if (files.empty()) throw Error("no .ppm images in " + path.string());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) raw.push_back(load_ppm_file(f));
  } else {
    const auto records = read_archive_file(path);
    const NamedTensor* images = nullptr;
    for (const auto& r : records)
      if (r.name == "images") images = &r;
    if (!images)
      throw FormatError("image archive " + path.string() + " has no tensor named \"images\"");
    require_rank(images->tensor, 4, "image archive \"images\" tensor");
    const std::size_t m = images->tensor.dim(0);
    const std::size_t plane =
        images->tensor.dim(1) * images->tensor.dim(2) * images->tensor.dim(3);
    for (std::size_t i = 0; i < m; ++i)
      raw.push_back(Tensor::from_data(
          {images->tensor.dim(1), images->tensor.dim(2), images->tensor.dim(3)},
          std::vector<float>(images->tensor.data() + i * plane,
                             images->tensor.data() + (i + 1) * plane)));
  }

  Tensor batch({raw.size(), 3, opt.resize_h, opt.resize_w});
  const std::size_t plane = 3 * opt.resize_h * opt.resize_w;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Tensor img = bilinear_resize(raw[i], opt.resize_h, opt.resize_w);
    img = normalize_image(img, opt.mean, opt.std_dev);
    std::copy(img.data(), img.data() + plane, batch.data() + i * plane);
  }
  return batch;
}

// ---------------------------------------------------------------------------
// extract: eval-mode forward in batches, one [N,D] tensor per tap.
// ---------------------------------------------------------------------------

inline std::vector<NamedTensor> extract_activations(Model& model, const Tensor& images,
                                                    const std::vector<std::string>& taps,
                                                    std::size_t batch_size = 32) {
  const std::size_t n = images.dim(0);
  const std::size_t plane = images.dim(1) * images.dim(2) * images.dim(3);
  std::map<std::string, std::vector<float>> rows;
  std::map<std::string, std::size_t> width;

  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t bs = std::min(batch_size, n - start);
    Tensor batch = Tensor::from_data(
        {bs, images.dim(1), images.dim(2), images.dim(3)},
        std::vector<float>(images.data() + start * plane, images.data() + (start + bs) * plane));
    auto acts = forward_with_taps(model, batch, taps, /*training=*/false);
    for (auto& [tap, t] : acts) {
      width[tap] = t.dim(1);
      auto& dst = rows[tap];
      dst.insert(dst.end(), t.data(), t.data() + t.size());
    }
  }

  std::vector<NamedTensor> records;
  for (const auto& tap : taps)
    records.push_back(
        {tap, Tensor::from_data({n, width.at(tap)}, std::move(rows.at(tap)))});
  return records;
}

// ---------------------------------------------------------------------------
// rdm: one correlation-distance RDM per tap, one "RDMT" file per tap.
// ---------------------------------------------------------------------------

inline std::vector<fs::path> write_rdms(const std::vector<NamedTensor>& activations,
                                        const fs::path& out_dir,
                                        const std::string& prefix = "") {
  fs::create_directories(out_dir);
  std::vector<Rdm> rdms(activations.size());
  parallel_for(activations.size(),
               [&](std::size_t i) { rdms[i] = compute_rdm(activations[i].tensor); });
  std::vector<fs::path> out;
  for (std::size_t i = 0; i < activations.size(); ++i) {
    const fs::path p = out_dir / (prefix + activations[i].name + ".rdmt");
    write_tensor_file(p, activations[i].name, rdms[i].matrix);
    out.push_back(p);
  }
  return out;
}

// Reads RDM files (each one tensor named after its tap) and orders them by
// the network tap order; unknown names sort after, alphabetically.
inline std::vector<std::pair<std::string, Rdm>> read_rdm_files(
    const std::vector<fs::path>& files) {
  std::vector<std::pair<std::string, Rdm>> rdms;
  for (const auto& f : files) {
    auto rec = read_tensor_file(f);
    Rdm rdm{std::move(rec.tensor)};
    validate_rdm(rdm, "model rdm \"" + rec.name + '"');
    rdms.emplace_back(std::move(rec.name), std::move(rdm));
  }
  auto rank = [](const std::string& name) {
    const auto& order = Model::tap_order();
    for (std::size_t i = 0; i < order.size(); ++i)
      if (order[i] == name) return i;
    return order.size();
  };
  std::stable_sort(rdms.begin(), rdms.end(), [&rank](const auto& a, const auto& b) {
    const std::size_t ra = rank(a.first), rb = rank(b.first);
    return ra != rb ? ra < rb : a.first < b.first;
  });
  return rdms;
}

// ---------------------------------------------------------------------------
// score: per-region, per-layer noise-normalized squared Spearman percentages.
// ---------------------------------------------------------------------------

struct LayerRegionScore {
  ModelScore score;
  double stddev_pct = 0.0;
};

struct RegionReport {
  std::string region;
  NoiseCeiling ceiling;
  std::size_t n_subjects = 0;
  std::map<std::string, LayerRegionScore> layers;
};

struct ScoreReport {
  std::size_t n_stimuli = 0;
  std::vector<std::string> layer_order;
  std::vector<RegionReport> regions;                // sorted by region name
  std::map<std::string, double> layer_set_scores;   // mean over regions per layer
  std::string best_layer;
};

inline ScoreReport score_rdms(const std::vector<std::pair<std::string, Rdm>>& model_rdms,
                              const std::vector<SubjectRdmSet>& brain) {
  if (model_rdms.empty()) throw ValueError("score: no model RDMs given");
  if (brain.empty()) throw ValueError("score: no brain regions given");

  ScoreReport report;
  report.n_stimuli = model_rdms.front().second.n();
  for (const auto& [name, rdm] : model_rdms) {
    if (rdm.n() != report.n_stimuli)
      throw ShapeError("score: model RDM \"" + name + "\" has a different stimulus count");
    report.layer_order.push_back(name);
  }

  report.regions.resize(brain.size());
  struct Task {
    std::size_t region, layer;
  };
  std::vector<Task> tasks;
  for (std::size_t r = 0; r < brain.size(); ++r) {
    if (brain[r].n_stimuli() != report.n_stimuli)
      throw ShapeError("score: region \"" + brain[r].region + "\" has " +
                       std::to_string(brain[r].n_stimuli()) + " stimuli, model RDMs have " +
                       std::to_string(report.n_stimuli));
    report.regions[r].region = brain[r].region;
    report.regions[r].n_subjects = brain[r].subjects.size();
    report.regions[r].ceiling = noise_ceiling(brain[r]);
    for (std::size_t l = 0; l < model_rdms.size(); ++l) tasks.push_back({r, l});
  }

  std::vector<LayerRegionScore> results(tasks.size());
  parallel_for(tasks.size(), [&](std::size_t i) {
    const auto& [r, l] = tasks[i];
    LayerRegionScore lrs;
    lrs.score = score_model(model_rdms[l].second, brain[r]);
    lrs.stddev_pct =
        across_subject_stddev(lrs.score.per_subject_r, report.regions[r].ceiling.lower);
    results[i] = std::move(lrs);
  });
  for (std::size_t i = 0; i < tasks.size(); ++i)
    report.regions[tasks[i].region].layers[model_rdms[tasks[i].layer].first] =
        std::move(results[i]);

  std::map<std::string, std::vector<double>> per_layer;
  for (const auto& [name, rdm] : model_rdms) {
    double mean = 0.0;
    for (const auto& region : report.regions)
      mean += region.layers.at(name).score.normalized_pct;
    mean /= static_cast<double>(report.regions.size());
    report.layer_set_scores[name] = mean;
    per_layer[name] = {mean};
  }
  report.best_layer = best_layer(report.layer_order, per_layer);
  return report;
}

inline ordered_json score_report_json(const ScoreReport& report) {
  ordered_json j;
  j["n_stimuli"] = report.n_stimuli;
  j["layer_order"] = report.layer_order;
  ordered_json regions = ordered_json::object();
  for (const auto& region : report.regions) {
    ordered_json rj;
    rj["n_subjects"] = region.n_subjects;
    rj["noise_ceiling_sq_lower"] = region.ceiling.lower;
    rj["noise_ceiling_sq_upper"] = region.ceiling.upper;
    ordered_json layers = ordered_json::object();
    for (const auto& layer : report.layer_order) {
      const auto& lrs = region.layers.at(layer);
      ordered_json lj;
      lj["mean_sq_r"] = lrs.score.mean_sq_r;
      lj["normalized_pct"] = lrs.score.normalized_pct;
      lj["mean_r"] = lrs.score.mean_r;
      lj["stddev_pct"] = lrs.stddev_pct;
      lj["per_subject_r"] = lrs.score.per_subject_r;
      layers[layer] = std::move(lj);
    }
    rj["layers"] = std::move(layers);
    regions[region.region] = std::move(rj);
  }
  j["regions"] = std::move(regions);
  ordered_json set_scores = ordered_json::object();
  for (const auto& layer : report.layer_order) set_scores[layer] = report.layer_set_scores.at(layer);
  j["layer_set_scores"] = std::move(set_scores);
  j["best_layer"] = report.best_layer;
  return j;
}

inline void write_json_file(const fs::path& path, const ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw Error("cannot open for writing: " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw Error("write failed: " + path.string());
}

// ---------------------------------------------------------------------------
// Leaderboard ledger: a flat JSON array, append-only under an advisory
// exclusive lock so concurrent evaluations on one host cannot interleave.
// ---------------------------------------------------------------------------

struct LeaderboardRow {
  std::string model;
  int epoch = 0;
  double evc_pct = 0.0;
  double it_pct = 0.0;
  double mean_pct = 0.0;
  double stddev = 0.0;
  std::string best_layer;
  ordered_json detail;  // per-region nc + per-subject r lists, per set
};

inline ordered_json leaderboard_row_json(const LeaderboardRow& row) {
  ordered_json j;
  j["model"] = row.model;
  j["epoch"] = row.epoch;
  j["evc_pct"] = row.evc_pct;
  j["it_pct"] = row.it_pct;
  j["mean_pct"] = row.mean_pct;
  j["stddev"] = row.stddev;
  j["best_layer"] = row.best_layer;
  if (!row.detail.is_null()) j["detail"] = row.detail;
  return j;
}

class FileLock {
public:
  explicit FileLock(const fs::path& path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw Error("cannot open ledger " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw Error("cannot lock ledger " + path.string());
    }
  }
  ~FileLock() {
    if (fd_ >= 0) {
      ::flock(fd_, LOCK_UN);
      ::close(fd_);
    }
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

private:
  int fd_ = -1;
};

inline void append_ledger_row(const fs::path& ledger, const LeaderboardRow& row) {
  if (ledger.has_parent_path()) fs::create_directories(ledger.parent_path());
  FileLock lock(ledger);
  ordered_json rows = ordered_json::array();
  {
    std::ifstream is(ledger);
    std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    if (!content.empty()) {
      rows = ordered_json::parse(content);
      if (!rows.is_array()) throw FormatError("ledger " + ledger.string() + " is not a JSON array");
    }
  }
  rows.push_back(leaderboard_row_json(row));
  std::ofstream os(ledger, std::ios::trunc);
  if (!os) throw Error("cannot rewrite ledger " + ledger.string());
  os << rows.dump(2) << '\n';
}

inline ordered_json read_ledger(const fs::path& ledger) {
  std::ifstream is(ledger);
  if (!is) throw Error("cannot open ledger " + ledger.string());
  std::string content((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (content.empty()) return ordered_json::array();
  ordered_json rows = ordered_json::parse(content);
  if (!rows.is_array()) throw FormatError("ledger " + ledger.string() + " is not a JSON array");
  return rows;
}

// ---------------------------------------------------------------------------
// evaluate: manifest-driven extract -> rdm -> score over every stimulus set,
// best layer across sets, one ledger row. Any stage failure removes the
// files written so far and rethrows tagged with the stage name.
// ---------------------------------------------------------------------------

struct StimulusSet {
  std::string name;
  fs::path images;
  fs::path brain;
};

struct EvalManifest {
  std::string label;
  fs::path checkpoint;
  std::vector<StimulusSet> sets;
  std::vector<std::string> taps = Model::tap_order();
  PreprocessOptions preprocess;
  std::size_t batch_size = 32;
  fs::path out_dir = "eval_out";
  fs::path ledger = "results.json";
};

inline EvalManifest parse_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot open manifest " + path.string());
  json j = json::parse(is);
  EvalManifest m;
  m.checkpoint = j.at("checkpoint").get<std::string>();
  m.label = j.value("label", m.checkpoint.stem().string());
  if (j.contains("taps")) m.taps = j.at("taps").get<std::vector<std::string>>();
  if (j.contains("mean")) {
    auto v = j.at("mean").get<std::vector<float>>();
    if (v.size() != 3) throw UsageError("manifest: mean must have 3 components");
    std::copy(v.begin(), v.end(), m.preprocess.mean.begin());
  }
  if (j.contains("std")) {
    auto v = j.at("std").get<std::vector<float>>();
    if (v.size() != 3) throw UsageError("manifest: std must have 3 components");
    std::copy(v.begin(), v.end(), m.preprocess.std_dev.begin());
  }
  if (j.contains("input_size")) {
    m.preprocess.resize_h = j.at("input_size").get<std::size_t>();
    m.preprocess.resize_w = m.preprocess.resize_h;
  }
  if (j.contains("batch_size")) m.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("out_dir")) m.out_dir = j.at("out_dir").get<std::string>();
  if (j.contains("ledger")) m.ledger = j.at("ledger").get<std::string>();
  for (const auto& s : j.at("sets")) {
    StimulusSet set;
    set.name = s.at("name").get<std::string>();
    set.images = s.at("images").get<std::string>();
    set.brain = s.at("brain").get<std::string>();
    m.sets.push_back(std::move(set));
  }
  if (m.sets.empty()) throw UsageError("manifest: need at least one stimulus set");
  for (const auto& s : m.sets) {
    if (!fs::exists(s.images)) throw UsageError("manifest: missing image file " + s.images.string());
    if (!fs::exists(s.brain)) throw UsageError("manifest: missing brain file " + s.brain.string());
  }
  if (!fs::exists(m.checkpoint))
    throw UsageError("manifest: missing checkpoint " + m.checkpoint.string());
  return m;
}

struct EvalOutcome {
  std::vector<std::pair<std::string, ScoreReport>> set_reports;
  LeaderboardRow row;
};

inline EvalOutcome run_evaluate(const EvalManifest& manifest, std::ostream& warnings) {
  std::vector<fs::path> created;
  auto cleanup = [&created] {
    for (const auto& p : created) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  };
  std::string stage = "setup";
  try {
    if (manifest.sets.size() == 1)
      warnings << "warning: only one stimulus set given; best layer is computed from it alone\n";
    fs::create_directories(manifest.out_dir);

    stage = "load-checkpoint";
    auto [model, epoch] = load_model_file(manifest.checkpoint);

    EvalOutcome outcome;
    std::map<std::string, std::vector<double>> per_layer_set_scores;
    for (const auto& set : manifest.sets) {
      stage = "extract (" + set.name + ")";
      const Tensor images = load_stimulus_images(set.images, manifest.preprocess);
      auto acts = extract_activations(model, images, manifest.taps, manifest.batch_size);
      const fs::path acts_path = manifest.out_dir / (set.name + "_activations.rdma");
      write_archive_file(acts_path, acts);
      created.push_back(acts_path);

      stage = "rdm (" + set.name + ")";
      const auto rdm_paths = write_rdms(acts, manifest.out_dir, set.name + "_rdm_");
      created.insert(created.end(), rdm_paths.begin(), rdm_paths.end());

      stage = "score (" + set.name + ")";
      const auto brain = read_brain_archive(set.brain);
      const auto model_rdms = read_rdm_files(rdm_paths);
      ScoreReport report = score_rdms(model_rdms, brain);
      const fs::path report_path = manifest.out_dir / (set.name + "_score.json");
      write_json_file(report_path, score_report_json(report));
      created.push_back(report_path);

      for (const auto& layer : report.layer_order)
        per_layer_set_scores[layer].push_back(report.layer_set_scores.at(layer));
      outcome.set_reports.emplace_back(set.name, std::move(report));
    }

    stage = "best-layer";
    const std::string best =
        best_layer(outcome.set_reports.front().second.layer_order, per_layer_set_scores);

    stage = "leaderboard";
    LeaderboardRow row;
    row.model = manifest.label;
    row.epoch = epoch;
    row.best_layer = best;
    // Region percentages at the best layer, averaged over the stimulus sets.
    std::map<std::string, double> region_pct;
    ordered_json detail = ordered_json::object();
    std::size_t n_subjects = 0;
    for (const auto& [set_name, report] : outcome.set_reports)
      for (const auto& region : report.regions) {
        region_pct[region.region] += region.layers.at(best).score.normalized_pct;
        n_subjects = region.n_subjects;
        ordered_json& dr = detail[region.region];
        dr["nc_sq_lower"].push_back(region.ceiling.lower);
        dr["per_subject_r"].push_back(region.layers.at(best).score.per_subject_r);
      }
    const auto n_sets = static_cast<double>(outcome.set_reports.size());
    for (auto& [name, pct] : region_pct) pct /= n_sets;
    if (!region_pct.count("EVC") || !region_pct.count("IT"))
      throw ValueError("evaluate: brain archives must provide both EVC and IT regions");
    row.evc_pct = region_pct.at("EVC");
    row.it_pct = region_pct.at("IT");
    row.mean_pct = 0.0;
    for (const auto& [name, pct] : region_pct) row.mean_pct += pct;
    row.mean_pct /= static_cast<double>(region_pct.size());

    // Across-subject spread of the per-subject normalized percentages,
    // pooled over sets and regions at the best layer.
    std::vector<double> subject_vals(n_subjects, 0.0);
    std::size_t pairs = 0;
    for (const auto& [set_name, report] : outcome.set_reports)
      for (const auto& region : report.regions) {
        const auto& rs = region.layers.at(best).score.per_subject_r;
        if (rs.size() != n_subjects)
          throw ValueError("evaluate: subject counts differ across sets or regions");
        for (std::size_t s = 0; s < n_subjects; ++s)
          subject_vals[s] += 100.0 * rs[s] * rs[s] / region.ceiling.lower;
        ++pairs;
      }
    if (n_subjects >= 2) {
      double mean = 0.0;
      for (auto& v : subject_vals) {
        v /= static_cast<double>(pairs);
        mean += v;
      }
      mean /= static_cast<double>(n_subjects);
      double ss = 0.0;
      for (double v : subject_vals) ss += (v - mean) * (v - mean);
      row.stddev = std::sqrt(ss / static_cast<double>(n_subjects - 1));
    }
    row.detail = std::move(detail);

    append_ledger_row(manifest.ledger, row);
    outcome.row = std::move(row);
    return outcome;
  } catch (const std::exception& e) {
    cleanup();
    throw Error("evaluate failed at stage " + stage + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// report: leaderboard rows sorted by descending mean score, CSV or JSON.
// ---------------------------------------------------------------------------

inline std::string csv_field(const ordered_json& v) {
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    if (s.find(',') != std::string::npos || s.find('"') != std::string::npos) {
      std::string quoted = "\"";
      for (char c : s) {
        if (c == '"') quoted += '"';
        quoted += c;
      }
      quoted += '"';
      return quoted;
    }
    return s;
  }
  return v.dump();  // numbers keep their shortest exact representation
}

inline constexpr const char* kReportHeader = "model,epoch,evc_pct,it_pct,mean_pct,stddev,best_layer";

inline std::string render_report(const ordered_json& rows, const std::string& format) {
  ordered_json sorted = rows;
  std::stable_sort(sorted.begin(), sorted.end(), [](const ordered_json& a, const ordered_json& b) {
    return a.at("mean_pct").get<double>() > b.at("mean_pct").get<double>();
  });
  static const std::vector<std::string> fields = {"model",    "epoch",  "evc_pct", "it_pct",
                                                  "mean_pct", "stddev", "best_layer"};
  if (format == "csv") {
    std::string out = std::string(kReportHeader) + "\n";
    for (const auto& row : sorted) {
      std::string line;
      for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) line += ',';
        line += csv_field(row.at(fields[i]));
      }
      out += line + "\n";
    }
    return out;
  }
  if (format == "json") {
    ordered_json out = ordered_json::array();
    for (const auto& row : sorted) {
      ordered_json r;
      for (const auto& f : fields) r[f] = row.at(f);
      out.push_back(std::move(r));
    }
    return out.dump(2) + "\n";
  }
  throw UsageError("report: unknown format \"" + format + "\" (expected csv or json)");
}

} // namespace rsaforge
