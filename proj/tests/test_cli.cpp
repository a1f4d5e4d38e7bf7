#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rsaforge/cli.hpp"
#include "rsaforge/fixtures.hpp"

using namespace rsaforge;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("rsaforge_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(is.good());
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

json load_json(const fs::path& p) { return json::parse(slurp(p)); }

// Small four-stage model; checkpoints from it drive extract/evaluate tests.
fs::path write_tiny_checkpoint(const fs::path& dir, int epoch, std::uint64_t seed = 5) {
  ArchConfig cfg;
  cfg.stage_blocks = {1, 1, 1, 1};
  cfg.stage_channels = {4, 8, 8, 8};
  cfg.num_classes = 3;
  cfg.input_h = cfg.input_w = 16;
  Model m = build_model(cfg, seed);
  const fs::path path = dir / ("ckpt_epoch_" + std::to_string(epoch) + ".rdma");
  save_checkpoint_file(path, m, epoch);
  return path;
}

fs::path write_image_archive(const fs::path& dir, const std::string& name, std::size_t n,
                             std::uint64_t seed) {
  SplitMix64 rng(seed);
  Tensor images({n, 3, 16, 16});
  for (std::size_t i = 0; i < images.size(); ++i) images[i] = rng.uniform_f(0.0f, 1.0f);
  const fs::path path = dir / name;
  write_archive_file(path, {{"images", images}});
  return path;
}

fs::path write_brain_fixture(const fs::path& dir, const std::string& name, std::size_t n,
                             std::uint64_t seed) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % 3);
  const Rdm evc_latent = make_class_latent_rdm(labels, 0.6, 1.1, seed);
  const Rdm it_latent = make_class_latent_rdm(labels, 0.35, 1.3, seed + 1);
  const fs::path path = dir / name;
  write_brain_archive(path, {make_subject_set(evc_latent, "EVC", 4, 0.15, seed + 2),
                             make_subject_set(it_latent, "IT", 4, 0.10, seed + 3)});
  return path;
}

// Reference rank/Pearson pair, independent of the library implementations.
std::vector<double> ref_rank(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++less;
      if (x[j] == x[i]) ++equal;
    }
    r[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return r;
}

double ref_spearman(const std::vector<double>& x, const std::vector<double>& y) {
  const auto rx = ref_rank(x), ry = ref_rank(y);
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += rx[i];
    sy += ry[i];
    sxx += rx[i] * rx[i];
    syy += ry[i] * ry[i];
    sxy += rx[i] * ry[i];
  }
  return (sxy - sx * sy / n) / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
}

} // namespace

// ---------------------------------------------------------------------------
// exit codes
// ---------------------------------------------------------------------------

TEST_CASE("usage errors exit 2, runtime errors exit 1, success exits 0") {
  CHECK(run({"bogus-command"}).code == 2);
  CHECK(run({"train", "--lr", "-1", "--synthetic", "classes=2,per_class=4"}).code == 2);
  CHECK(run({"train"}).code == 2);  // neither --synthetic nor --data
  CHECK(run({"train", "--data", "/nonexistent/data.rdma"}).code == 1);
  CHECK(run({"extract", "--images", "x"}).code == 2);  // missing required --checkpoint
  CHECK(run({"rdm", "--activations", "/nonexistent/file.rdma"}).code == 1);
  const fs::path empty = scratch("emptyrdms");
  CHECK(run({"score", "--rdms", empty.string(), "--brain", "whatever"}).code == 2);
  CHECK(run({"evaluate", "--manifest", "/nonexistent/manifest.json"}).code == 1);
  CHECK(run({"report", "--ledger", "/nonexistent/ledger.json", "--format", "yaml"}).code == 2);
}

TEST_CASE("train with zero epochs succeeds and writes no checkpoints") {
  const fs::path dir = scratch("train0");
  const auto res = run({"train", "--synthetic", "classes=2,per_class=4", "--epochs", "0",
                        "--input-size", "16", "--batch-size", "4", "--out",
                        (dir / "run").string()});
  CHECK(res.code == 0);
  CHECK_FALSE(fs::exists(dir / "run" / "ckpt_epoch_1.rdma"));
}

TEST_CASE("train writes checkpoints at the documented cadence") {
  const fs::path dir = scratch("train10");
  const auto res = run({"train", "--synthetic", "classes=2,per_class=16", "--epochs", "10",
                        "--seed", "7", "--input-size", "16", "--batch-size", "8", "--out",
                        (dir / "run").string()});
  REQUIRE(res.code == 0);
  CHECK(fs::exists(dir / "run" / "ckpt_epoch_1.rdma"));
  CHECK(fs::exists(dir / "run" / "ckpt_epoch_5.rdma"));
  CHECK(fs::exists(dir / "run" / "ckpt_epoch_10.rdma"));
  CHECK_FALSE(fs::exists(dir / "run" / "ckpt_epoch_2.rdma"));
  CHECK(fs::exists(dir / "run" / "train_log.jsonl"));
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

TEST_CASE("extract writes one tensor per tap with one row per stimulus") {
  const fs::path dir = scratch("extract");
  const fs::path ckpt = write_tiny_checkpoint(dir, 1);
  const fs::path images = write_image_archive(dir, "images.rdma", 9, 100);

  const auto res = run({"extract", "--checkpoint", ckpt.string(), "--images", images.string(),
                        "--out", (dir / "acts.rdma").string(), "--input-size", "16"});
  REQUIRE(res.code == 0);
  const auto records = read_archive_file(dir / "acts.rdma");
  REQUIRE(records.size() == 7);
  for (const auto& r : records) CHECK(r.tensor.dim(0) == 9);

  // Determinism: a second run writes byte-identical output.
  const std::string first = slurp(dir / "acts.rdma");
  REQUIRE(run({"extract", "--checkpoint", ckpt.string(), "--images", images.string(), "--out",
               (dir / "acts.rdma").string(), "--input-size", "16"})
              .code == 0);
  CHECK(slurp(dir / "acts.rdma") == first);
}

TEST_CASE("extract rejects unknown taps and lists the valid ones") {
  const fs::path dir = scratch("badtap");
  const fs::path ckpt = write_tiny_checkpoint(dir, 1);
  const fs::path images = write_image_archive(dir, "images.rdma", 4, 101);
  const auto res = run({"extract", "--checkpoint", ckpt.string(), "--images", images.string(),
                        "--taps", "bogus", "--out", (dir / "a.rdma").string()});
  CHECK(res.code == 2);
  CHECK(res.err.find("stage1") != std::string::npos);
  CHECK(res.err.find("softmax") != std::string::npos);
}

// ---------------------------------------------------------------------------
// rdm + score
// ---------------------------------------------------------------------------

TEST_CASE("rdm marks duplicated stimuli with a zero off-diagonal") {
  const fs::path dir = scratch("rdmdup");
  SplitMix64 rng(31);
  Tensor acts({5, 8});
  for (std::size_t i = 0; i < acts.size(); ++i) acts[i] = rng.uniform_f(-1.0f, 1.0f);
  for (std::size_t k = 0; k < 8; ++k) acts.at2(4, k) = acts.at2(2, k);
  write_archive_file(dir / "acts.rdma", {{"fc", acts}});

  REQUIRE(run({"rdm", "--activations", (dir / "acts.rdma").string(), "--out",
               (dir / "rdms").string()})
              .code == 0);
  const auto rec = read_tensor_file(dir / "rdms" / "fc.rdmt");
  CHECK(rec.name == "fc");
  const Tensor& m = rec.tensor;
  CHECK(m.at2(2, 4) == 0.0f);
  CHECK(m.at2(0, 2) > 0.0f);
}

TEST_CASE("a model RDM identical to every subject scores 100 in each region") {
  const fs::path dir = scratch("score100");
  const std::size_t n = 6;
  std::vector<double> tri(n * (n - 1) / 2);
  for (std::size_t k = 0; k < tri.size(); ++k) tri[k] = static_cast<double>(k + 1) / 64.0;
  Rdm shared{Tensor({n, n})};
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j, ++k) {
      shared.matrix.at2(i, j) = static_cast<float>(tri[k]);
      shared.matrix.at2(j, i) = static_cast<float>(tri[k]);
    }
  SubjectRdmSet evc{"EVC", {shared, shared, shared}};
  SubjectRdmSet it{"IT", {shared, shared, shared}};
  write_brain_archive(dir / "brain.rdma", {evc, it});
  write_tensor_file(dir / "fc.rdmt", "fc", shared.matrix);

  REQUIRE(run({"score", "--rdms", (dir / "fc.rdmt").string(), "--brain",
               (dir / "brain.rdma").string(), "--out", (dir / "score.json").string()})
              .code == 0);
  const json report = load_json(dir / "score.json");
  CHECK(report.at("regions").at("EVC").at("layers").at("fc").at("normalized_pct") == 100.0);
  CHECK(report.at("regions").at("IT").at("layers").at("fc").at("normalized_pct") == 100.0);
  CHECK(report.at("best_layer") == "fc");
}

TEST_CASE("score pipeline matches the committed golden fixture") {
  const fs::path dir = scratch("golden");

  // Deterministic small fixture: 6 stimuli in 3 classes, 3 subjects per
  // region; "fc" activations encode class identity, "stage1" is unrelated.
  const std::size_t n = 6;
  std::vector<int> labels = {0, 0, 1, 1, 2, 2};
  SplitMix64 rng(777);
  Tensor stage1({n, 10});
  for (std::size_t i = 0; i < stage1.size(); ++i) stage1[i] = rng.uniform_f(-1.0f, 1.0f);
  Tensor fc({n, 5});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      fc.at2(i, j) = (static_cast<int>(j) == labels[i] ? 1.0f : 0.0f) + rng.uniform_f(-0.1f, 0.1f);
  write_archive_file(dir / "acts.rdma", {{"stage1", stage1}, {"fc", fc}});

  const Rdm evc_latent = make_class_latent_rdm(labels, 0.6, 1.05, 910);
  const Rdm it_latent = make_class_latent_rdm(labels, 0.35, 1.3, 920);
  write_brain_archive(dir / "brain.rdma", {make_subject_set(evc_latent, "EVC", 3, 0.15, 930),
                                           make_subject_set(it_latent, "IT", 3, 0.10, 940)});

  REQUIRE(run({"rdm", "--activations", (dir / "acts.rdma").string(), "--out",
               (dir / "rdms").string()})
              .code == 0);
  REQUIRE(run({"score", "--rdms", (dir / "rdms").string(), "--brain",
               (dir / "brain.rdma").string(), "--out", (dir / "score.json").string()})
              .code == 0);

  const json produced = load_json(dir / "score.json");
  const json golden = load_json(fs::path(RSAFORGE_TEST_DATA_DIR) / "golden_score.json");

  // Structural equality plus numeric agreement within 1e-9.
  std::function<void(const json&, const json&, const std::string&)> compare =
      [&](const json& a, const json& b, const std::string& where) {
        REQUIRE_MESSAGE(a.type() == b.type(), where);
        if (a.is_object()) {
          REQUIRE_MESSAGE(a.size() == b.size(), where);
          for (auto it = a.begin(); it != a.end(); ++it) {
            const std::string child = where + "/" + it.key();
            REQUIRE_MESSAGE(b.contains(it.key()), child);
            compare(it.value(), b.at(it.key()), child);
          }
        } else if (a.is_array()) {
          REQUIRE_MESSAGE(a.size() == b.size(), where);
          for (std::size_t i = 0; i < a.size(); ++i)
            compare(a[i], b[i], where + "[" + std::to_string(i) + "]");
        } else if (a.is_number()) {
          CHECK_MESSAGE(std::abs(a.get<double>() - b.get<double>()) < 1e-9, where);
        } else {
          CHECK_MESSAGE(a == b, where);
        }
      };
  compare(produced, golden, "");

  // Independent oracle anchor: recompute the fc/IT score from scratch.
  const auto fc_rdm = read_tensor_file(dir / "rdms" / "fc.rdmt").tensor;
  auto triangle = [n](const Tensor& m) {
    std::vector<double> v;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) v.push_back(m.at2(i, j));
    return v;
  };
  const auto brain = read_brain_archive(dir / "brain.rdma");
  const SubjectRdmSet& it_set = brain[1];
  REQUIRE(it_set.region == "IT");
  const std::size_t s_count = it_set.subjects.size();
  const std::size_t t = n * (n - 1) / 2;
  double mean_sq = 0.0, nc_lower = 0.0;
  for (std::size_t s = 0; s < s_count; ++s) {
    const double r = ref_spearman(triangle(fc_rdm), upper_triangle(it_set.subjects[s]));
    mean_sq += r * r;
    std::vector<double> loo(t, 0.0);
    for (std::size_t o = 0; o < s_count; ++o) {
      if (o == s) continue;
      const auto tri = upper_triangle(it_set.subjects[o]);
      for (std::size_t i = 0; i < t; ++i) loo[i] += tri[i];
    }
    for (auto& v : loo) v /= static_cast<double>(s_count - 1);
    const double lo = ref_spearman(upper_triangle(it_set.subjects[s]), loo);
    nc_lower += lo * lo;
  }
  mean_sq /= static_cast<double>(s_count);
  nc_lower /= static_cast<double>(s_count);
  const double oracle_pct = 100.0 * mean_sq / nc_lower;
  CHECK(std::abs(golden.at("regions").at("IT").at("layers").at("fc").at("normalized_pct")
                     .get<double>() -
                 oracle_pct) < 1e-9);
}

TEST_CASE("scoring with a worker pool matches the sequential result") {
  const fs::path dir = scratch("threads");
  const fs::path ckpt = write_tiny_checkpoint(dir, 1);
  const fs::path images = write_image_archive(dir, "images.rdma", 8, 200);
  const fs::path brain = write_brain_fixture(dir, "brain.rdma", 8, 300);

  REQUIRE(run({"extract", "--checkpoint", ckpt.string(), "--images", images.string(), "--out",
               (dir / "acts.rdma").string(), "--input-size", "16"})
              .code == 0);
  REQUIRE(run({"rdm", "--activations", (dir / "acts.rdma").string(), "--out",
               (dir / "rdms").string()})
              .code == 0);
  REQUIRE(run({"score", "--rdms", (dir / "rdms").string(), "--brain", brain.string(), "--out",
               (dir / "seq.json").string()})
              .code == 0);

  ::setenv("RSAFORGE_THREADS", "3", 1);
  const int code = run({"score", "--rdms", (dir / "rdms").string(), "--brain", brain.string(),
                        "--out", (dir / "par.json").string()})
                       .code;
  ::unsetenv("RSAFORGE_THREADS");
  REQUIRE(code == 0);
  CHECK(slurp(dir / "seq.json") == slurp(dir / "par.json"));
}

// ---------------------------------------------------------------------------
// evaluate + report
// ---------------------------------------------------------------------------

namespace {

fs::path write_manifest(const fs::path& dir, const fs::path& ckpt,
                        const std::vector<std::pair<fs::path, fs::path>>& sets,
                        const std::string& label) {
  nlohmann::ordered_json m;
  m["label"] = label;
  m["checkpoint"] = ckpt.string();
  m["input_size"] = 16;
  m["out_dir"] = (dir / ("eval_" + label)).string();
  m["ledger"] = (dir / "results.json").string();
  m["sets"] = nlohmann::ordered_json::array();
  int idx = 0;
  for (const auto& [images, brain] : sets) {
    m["sets"].push_back({{"name", "set" + std::to_string(idx)},
                         {"images", images.string()},
                         {"brain", brain.string()}});
    ++idx;
  }
  const fs::path path = dir / ("manifest_" + label + ".json");
  std::ofstream os(path);
  os << m.dump(2);
  return path;
}

} // namespace

TEST_CASE("evaluate composes extract/rdm/score and appends a ledger row per run") {
  const fs::path dir = scratch("evaluate");
  const fs::path ckpt1 = write_tiny_checkpoint(dir, 1, 5);
  const fs::path ckpt10 = write_tiny_checkpoint(dir, 10, 5);
  const fs::path images_a = write_image_archive(dir, "a_images.rdma", 8, 400);
  const fs::path brain_a = write_brain_fixture(dir, "a_brain.rdma", 8, 500);
  const fs::path images_b = write_image_archive(dir, "b_images.rdma", 10, 600);
  const fs::path brain_b = write_brain_fixture(dir, "b_brain.rdma", 10, 700);

  const fs::path manifest1 = write_manifest(
      dir, ckpt1, {{images_a, brain_a}, {images_b, brain_b}}, "resnet-epoch1");
  auto res1 = run({"evaluate", "--manifest", manifest1.string()});
  REQUIRE_MESSAGE(res1.code == 0, res1.err);

  // One-set manifest warns but still works.
  const fs::path manifest2 =
      write_manifest(dir, ckpt10, {{images_a, brain_a}}, "resnet-epoch1");
  auto res2 = run({"evaluate", "--manifest", manifest2.string()});
  REQUIRE_MESSAGE(res2.code == 0, res2.err);
  CHECK(res2.err.find("warning") != std::string::npos);

  const json ledger = load_json(dir / "results.json");
  REQUIRE(ledger.size() == 2);
  CHECK(ledger[0].at("model") == "resnet-epoch1");
  CHECK(ledger[1].at("model") == "resnet-epoch1");
  CHECK(ledger[0].at("epoch") == 1);
  CHECK(ledger[1].at("epoch") == 10);
  for (const auto& row : ledger) {
    const double mean = (row.at("evc_pct").get<double>() + row.at("it_pct").get<double>()) / 2.0;
    CHECK(std::abs(row.at("mean_pct").get<double>() - mean) < 1e-12);
  }

  // Compositionality: the per-set score written by evaluate equals the
  // manually chained extract -> rdm -> score on the same inputs.
  const fs::path manual = dir / "manual";
  fs::create_directories(manual);
  REQUIRE(run({"extract", "--checkpoint", ckpt1.string(), "--images", images_a.string(),
               "--out", (manual / "acts.rdma").string(), "--input-size", "16"})
              .code == 0);
  REQUIRE(run({"rdm", "--activations", (manual / "acts.rdma").string(), "--out",
               (manual / "rdms").string()})
              .code == 0);
  REQUIRE(run({"score", "--rdms", (manual / "rdms").string(), "--brain", brain_a.string(),
               "--out", (manual / "score.json").string()})
              .code == 0);
  CHECK(load_json(manual / "score.json") ==
        load_json(dir / "eval_resnet-epoch1" / "set0_score.json"));
}

TEST_CASE("evaluate aborts with the stage name and removes partial outputs") {
  const fs::path dir = scratch("evalfail");
  const fs::path ckpt = write_tiny_checkpoint(dir, 1);
  const fs::path images = write_image_archive(dir, "images.rdma", 8, 410);
  // Brain archive whose stimulus count does not match the image count.
  const fs::path brain = write_brain_fixture(dir, "brain.rdma", 9, 510);
  const fs::path manifest = write_manifest(dir, ckpt, {{images, brain}}, "broken");
  const auto res = run({"evaluate", "--manifest", manifest.string()});
  CHECK(res.code == 1);
  CHECK(res.err.find("score") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "eval_broken" / "set0_activations.rdma"));
  CHECK_FALSE(fs::exists(dir / "eval_broken" / "set0_score.json"));
}

TEST_CASE("report renders an empty ledger as a header-only CSV") {
  const fs::path dir = scratch("reportempty");
  std::ofstream(dir / "ledger.json") << "[]";
  const auto res = run({"report", "--ledger", (dir / "ledger.json").string()});
  CHECK(res.code == 0);
  CHECK(res.out == "model,epoch,evc_pct,it_pct,mean_pct,stddev,best_layer\n");
}

TEST_CASE("report sorts rows by descending mean and keeps CSV and JSON field-equal") {
  const fs::path dir = scratch("report");
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  auto make_row = [](const std::string& name, int epoch, double evc, double it, double sd) {
    nlohmann::ordered_json r;
    r["model"] = name;
    r["epoch"] = epoch;
    r["evc_pct"] = evc;
    r["it_pct"] = it;
    r["mean_pct"] = (evc + it) / 2.0;
    r["stddev"] = sd;
    r["best_layer"] = "fc";
    return r;
  };
  rows.push_back(make_row("low", 1, 4.25, 6.5, 1.0));
  rows.push_back(make_row("high", 10, 40.125, 44.0, 2.5));
  rows.push_back(make_row("mid", 5, 20.0, 21.5, 2.0));
  std::ofstream(dir / "ledger.json") << rows.dump(2);

  const auto csv = run({"report", "--ledger", (dir / "ledger.json").string(), "--format", "csv"});
  REQUIRE(csv.code == 0);
  std::vector<std::string> lines;
  std::stringstream ss(csv.out);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "model,epoch,evc_pct,it_pct,mean_pct,stddev,best_layer");
  CHECK(lines[1].rfind("high,", 0) == 0);
  CHECK(lines[2].rfind("mid,", 0) == 0);
  CHECK(lines[3].rfind("low,", 0) == 0);

  const auto js = run({"report", "--ledger", (dir / "ledger.json").string(), "--format", "json"});
  REQUIRE(js.code == 0);
  const json parsed = json::parse(js.out);
  REQUIRE(parsed.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    // CSV fields, parsed back, equal the JSON fields exactly.
    std::vector<std::string> cells;
    std::stringstream cs(lines[i + 1]);
    std::string cell;
    while (std::getline(cs, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 7);
    CHECK(cells[0] == parsed[i].at("model"));
    CHECK(std::stoi(cells[1]) == parsed[i].at("epoch").get<int>());
    CHECK(std::stod(cells[2]) == parsed[i].at("evc_pct").get<double>());
    CHECK(std::stod(cells[3]) == parsed[i].at("it_pct").get<double>());
    CHECK(std::stod(cells[4]) == parsed[i].at("mean_pct").get<double>());
    CHECK(std::stod(cells[5]) == parsed[i].at("stddev").get<double>());
    CHECK(cells[6] == parsed[i].at("best_layer"));
  }
}

TEST_CASE("ledger stddev is recomputable from the stored per-subject r lists") {
  const fs::path dir = scratch("stddev");
  const fs::path ckpt = write_tiny_checkpoint(dir, 1);
  const fs::path images_a = write_image_archive(dir, "a_images.rdma", 8, 420);
  const fs::path brain_a = write_brain_fixture(dir, "a_brain.rdma", 8, 520);
  const fs::path images_b = write_image_archive(dir, "b_images.rdma", 9, 620);
  const fs::path brain_b = write_brain_fixture(dir, "b_brain.rdma", 9, 720);
  const fs::path manifest =
      write_manifest(dir, ckpt, {{images_a, brain_a}, {images_b, brain_b}}, "sd");
  REQUIRE(run({"evaluate", "--manifest", manifest.string()}).code == 0);

  const json row = load_json(dir / "results.json").at(0);
  const json detail = row.at("detail");
  std::vector<double> subject_vals;
  std::size_t pairs = 0;
  for (const auto& region : {"EVC", "IT"}) {
    const auto& nc = detail.at(region).at("nc_sq_lower");
    const auto& rs = detail.at(region).at("per_subject_r");
    REQUIRE(nc.size() == rs.size());  // one entry per set
    for (std::size_t set = 0; set < nc.size(); ++set) {
      const double ceiling = nc[set].get<double>();
      if (subject_vals.empty()) subject_vals.resize(rs[set].size(), 0.0);
      for (std::size_t s = 0; s < rs[set].size(); ++s) {
        const double r = rs[set][s].get<double>();
        subject_vals[s] += 100.0 * r * r / ceiling;
      }
      ++pairs;
    }
  }
  double mean = 0.0;
  for (auto& v : subject_vals) {
    v /= static_cast<double>(pairs);
    mean += v;
  }
  mean /= static_cast<double>(subject_vals.size());
  double ss = 0.0;
  for (double v : subject_vals) ss += (v - mean) * (v - mean);
  const double expected = std::sqrt(ss / static_cast<double>(subject_vals.size() - 1));
  CHECK(row.at("stddev").get<double>() == doctest::Approx(expected).epsilon(1e-9));
}
