// Generates the synthetic evaluation fixtures: stimulus image archives,
// subject RDM archives for the EVC and IT regions, and a ready-to-run
// evaluation manifest. Everything is seeded, so the same flags always
// produce byte-identical files.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rsaforge/fixtures.hpp"
#include "rsaforge/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace rsaforge;

int main(int argc, char** argv) {
  CLI::App app{"Generate synthetic stimulus and brain-RDM fixtures"};
  std::string out_dir = "fixtures";
  int classes = 4;
  int subjects = 15;
  std::size_t size = 64;
  double noise = 0.12;
  std::uint64_t seed = 2024;
  std::vector<std::size_t> set_sizes = {92, 118};
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--classes", classes, "Number of stimulus classes");
  app.add_option("--subjects", subjects, "Subjects per region");
  app.add_option("--size", size, "Stimulus image size");
  app.add_option("--noise", noise, "Per-subject RDM noise std");
  app.add_option("--seed", seed, "Generator seed");
  app.add_option("--sets", set_sizes, "Stimulus counts, one archive pair per entry");
  CLI11_PARSE(app, argc, argv);

  try {
    fs::create_directories(out_dir);
    nlohmann::ordered_json manifest;
    manifest["label"] = "resnet20";
    manifest["checkpoint"] = "runs/train/ckpt_epoch_10.rdma";
    manifest["input_size"] = size;
    manifest["out_dir"] = out_dir + "/eval";
    manifest["ledger"] = out_dir + "/results.json";
    manifest["sets"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < set_sizes.size(); ++i) {
      const std::string name = "set" + std::to_string(set_sizes[i]);
      const DemoSet demo = make_demo_set(classes, set_sizes[i], size,
                                         static_cast<std::size_t>(subjects), noise,
                                         seed + 1000 * i);
      Tensor labels({demo.stimuli.labels.size()});
      for (std::size_t k = 0; k < demo.stimuli.labels.size(); ++k)
        labels[k] = static_cast<float>(demo.stimuli.labels[k]);
      write_archive_file(fs::path(out_dir) / (name + "_images.rdma"),
                         {{"images", demo.stimuli.images}, {"labels", labels}});
      write_brain_archive(fs::path(out_dir) / (name + "_brain.rdma"), {demo.evc, demo.it});
      manifest["sets"].push_back({{"name", name},
                                  {"images", out_dir + "/" + name + "_images.rdma"},
                                  {"brain", out_dir + "/" + name + "_brain.rdma"}});
      std::cout << "wrote " << name << " (" << set_sizes[i] << " stimuli, " << subjects
                << " subjects per region)\n";
    }
    std::ofstream os(fs::path(out_dir) / "manifest.json");
    os << manifest.dump(2) << '\n';
    std::cout << "wrote " << out_dir << "/manifest.json\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
