#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsaforge/errors.hpp"
#include "rsaforge/nn.hpp"
#include "rsaforge/random.hpp"
#include "rsaforge/tensor.hpp"
#include "rsaforge/tensor_io.hpp"

// Residual network assembly. The architecture is the familiar four-stage
// basic-block design: a 7x7/2 stem conv + 3x3/2 max pool, four stages of
// two-conv residual blocks, global average pool, and a fully connected
// classifier. The 20-layer variant differs from the 18-layer one only in
// running the first stage three times instead of two.
//
// Weighted layers = 1 stem conv + 2 per block + 1 fc; projection convs on
// stage transitions are not counted, matching the usual ResNet naming.

namespace rsaforge {

struct ArchConfig {
  std::array<int, 4> stage_blocks{3, 2, 2, 2};
  std::array<int, 4> stage_channels{64, 128, 256, 512};
  int input_h = 64;
  int input_w = 64;
  int num_classes = 4;
};

inline ArchConfig resnet20_config(int num_classes = 4, int input = 64) {
  return ArchConfig{{3, 2, 2, 2}, {64, 128, 256, 512}, input, input, num_classes};
}

inline ArchConfig resnet18_config(int num_classes = 4, int input = 64) {
  return ArchConfig{{2, 2, 2, 2}, {64, 128, 256, 512}, input, input, num_classes};
}

inline void validate_config(const ArchConfig& c) {
  for (int b : c.stage_blocks)
    if (b < 1) throw ValueError("ArchConfig: stage_blocks entries must be >= 1");
  for (int ch : c.stage_channels)
    if (ch < 1) throw ValueError("ArchConfig: stage_channels entries must be >= 1");
  if (c.num_classes < 2) throw ValueError("ArchConfig: num_classes must be >= 2");
  if (c.input_h < 1 || c.input_w < 1) throw ValueError("ArchConfig: input size must be >= 1");
}

inline int weighted_layer_count(const ArchConfig& c) {
  int blocks = 0;
  for (int b : c.stage_blocks) blocks += b;
  return 1 + 2 * blocks + 1;
}

struct ConvLayer {
  Tensor weight;  // [Cout,Cin,kh,kw]
  Tensor bias;    // [Cout]
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct ResBlock {
  ConvLayer conv1;
  nn::BatchNormParams bn1;
  ConvLayer conv2;
  nn::BatchNormParams bn2;
  // Downsampling skip path on stage transitions: 1x1 stride-2 conv + BN.
  std::optional<ConvLayer> proj;
  std::optional<nn::BatchNormParams> proj_bn;
};

struct NamedParam {
  std::string name;
  Tensor* tensor;
};

class Model {
public:
  ArchConfig config;
  ConvLayer stem;
  nn::BatchNormParams stem_bn;
  std::vector<std::vector<ResBlock>> stages;  // stages[s][b]
  Tensor fc_weight;  // [num_classes, stage_channels[3]]
  Tensor fc_bias;    // [num_classes]

  // Trainable parameters in a fixed traversal order. Running statistics are
  // deliberately absent; they are state, not parameters.
  std::vector<NamedParam> params() {
    std::vector<NamedParam> out;
    auto add_conv = [&out](const std::string& prefix, ConvLayer& c) {
      out.push_back({prefix + ".weight", &c.weight});
      out.push_back({prefix + ".bias", &c.bias});
    };
    auto add_bn = [&out](const std::string& prefix, nn::BatchNormParams& b) {
      out.push_back({prefix + ".gamma", &b.gamma});
      out.push_back({prefix + ".beta", &b.beta});
    };
    add_conv("stem.conv", stem);
    add_bn("stem.bn", stem_bn);
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        const std::string p = block_name(s, b);
        ResBlock& blk = stages[s][b];
        add_conv(p + ".conv1", blk.conv1);
        add_bn(p + ".bn1", blk.bn1);
        add_conv(p + ".conv2", blk.conv2);
        add_bn(p + ".bn2", blk.bn2);
        if (blk.proj) {
          add_conv(p + ".proj", *blk.proj);
          add_bn(p + ".projbn", *blk.proj_bn);
        }
      }
    out.push_back({"fc.weight", &fc_weight});
    out.push_back({"fc.bias", &fc_bias});
    return out;
  }

  std::vector<std::pair<std::string, nn::BatchNormParams*>> bn_layers() {
    std::vector<std::pair<std::string, nn::BatchNormParams*>> out;
    out.emplace_back("stem.bn", &stem_bn);
    for (std::size_t s = 0; s < stages.size(); ++s)
      for (std::size_t b = 0; b < stages[s].size(); ++b) {
        const std::string p = block_name(s, b);
        out.emplace_back(p + ".bn1", &stages[s][b].bn1);
        out.emplace_back(p + ".bn2", &stages[s][b].bn2);
        if (stages[s][b].proj_bn) out.emplace_back(p + ".projbn", &*stages[s][b].proj_bn);
      }
    return out;
  }

  static std::string block_name(std::size_t stage, std::size_t block) {
    return "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block + 1);
  }

  // Taps exportable by forward_with_taps, in network order.
  static const std::vector<std::string>& tap_order() {
    static const std::vector<std::string> taps = {"stage1", "stage2", "stage3", "stage4",
                                                  "avgpool", "fc", "softmax"};
    return taps;
  }

  static bool is_valid_tap(const std::string& t) {
    for (const auto& k : tap_order())
      if (k == t) return true;
    return false;
  }
};

inline std::size_t count_params(const std::vector<NamedParam>& params) {
  std::size_t n = 0;
  for (const auto& p : params) n += p.tensor->size();
  return n;
}

inline std::size_t count_params(Model& m) { return count_params(m.params()); }

namespace detail {

inline Tensor he_uniform(SplitMix64& rng, std::vector<std::size_t> shape, std::size_t fan_in) {
  Tensor t(std::move(shape));
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_f(-bound, bound);
  return t;
}

inline ConvLayer make_conv(SplitMix64& rng, std::size_t cout, std::size_t cin, std::size_t k,
                           std::size_t stride, std::size_t pad) {
  ConvLayer c;
  c.weight = he_uniform(rng, {cout, cin, k, k}, cin * k * k);
  c.bias = Tensor({cout}, 0.0f);
  c.stride = stride;
  c.pad = pad;
  return c;
}

} // namespace detail

inline Model build_model(const ArchConfig& cfg, std::uint64_t seed) {
  validate_config(cfg);
  Model m;
  m.config = cfg;
  SplitMix64 rng(seed);

  m.stem = detail::make_conv(rng, static_cast<std::size_t>(cfg.stage_channels[0]), 3, 7, 2, 3);
  m.stem_bn = nn::BatchNormParams(static_cast<std::size_t>(cfg.stage_channels[0]));

  std::size_t in_ch = static_cast<std::size_t>(cfg.stage_channels[0]);
  m.stages.resize(4);
  for (std::size_t s = 0; s < 4; ++s) {
    const auto out_ch = static_cast<std::size_t>(cfg.stage_channels[s]);
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      ResBlock blk;
      const bool downsample = (b == 0 && s > 0);
      const std::size_t stride1 = downsample ? 2 : 1;
      blk.conv1 = detail::make_conv(rng, out_ch, in_ch, 3, stride1, 1);
      blk.bn1 = nn::BatchNormParams(out_ch);
      blk.conv2 = detail::make_conv(rng, out_ch, out_ch, 3, 1, 1);
      blk.bn2 = nn::BatchNormParams(out_ch);
      if (downsample) {
        blk.proj = detail::make_conv(rng, out_ch, in_ch, 1, 2, 0);
        blk.proj_bn = nn::BatchNormParams(out_ch);
      }
      m.stages[s].push_back(std::move(blk));
      in_ch = out_ch;
    }
  }
  m.fc_weight = detail::he_uniform(
      rng, {static_cast<std::size_t>(cfg.num_classes), in_ch}, in_ch);
  m.fc_bias = Tensor({static_cast<std::size_t>(cfg.num_classes)}, 0.0f);
  return m;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace detail {

inline Tensor block_forward(ResBlock& blk, const Tensor& x, bool training) {
  Tensor out = nn::conv2d_forward(x, blk.conv1.weight, &blk.conv1.bias, blk.conv1.stride,
                                  blk.conv1.pad);
  out = nn::batchnorm2d_forward(out, blk.bn1, training);
  out = nn::relu_forward(out);
  out = nn::conv2d_forward(out, blk.conv2.weight, &blk.conv2.bias, blk.conv2.stride,
                           blk.conv2.pad);
  out = nn::batchnorm2d_forward(out, blk.bn2, training);
  Tensor skip;
  if (blk.proj) {
    skip = nn::conv2d_forward(x, blk.proj->weight, &blk.proj->bias, blk.proj->stride,
                              blk.proj->pad);
    skip = nn::batchnorm2d_forward(skip, *blk.proj_bn, training);
  } else {
    skip = x;
  }
  return nn::relu_forward(nn::residual_add(out, skip));
}

inline Tensor flatten_rows(const Tensor& t) {
  if (t.rank() == 2) return t;
  std::size_t row = 1;
  for (std::size_t i = 1; i < t.rank(); ++i) row *= t.dim(i);
  return Tensor::from_data({t.dim(0), row}, t.storage());
}

} // namespace detail

// Runs the network in the requested mode and returns the activations at the
// named taps, flattened to one row per input. Tap names: stage1..stage4
// (output of the stage's last block), avgpool, fc, softmax.
inline std::map<std::string, Tensor> forward_with_taps(Model& m, const Tensor& batch,
                                                       const std::vector<std::string>& taps,
                                                       bool training = false) {
  require_rank(batch, 4, "model input");
  if (batch.dim(1) != 3) throw ShapeError("model input must have 3 channels");
  for (const auto& t : taps)
    if (!Model::is_valid_tap(t))
      throw ValueError("unknown tap \"" + t + "\"; valid taps: stage1 stage2 stage3 stage4 "
                       "avgpool fc softmax");

  auto wanted = [&taps](const std::string& name) {
    for (const auto& t : taps)
      if (t == name) return true;
    return false;
  };

  std::map<std::string, Tensor> out;
  Tensor x = nn::conv2d_forward(batch, m.stem.weight, &m.stem.bias, m.stem.stride, m.stem.pad);
  x = nn::batchnorm2d_forward(x, m.stem_bn, training);
  x = nn::relu_forward(x);
  x = nn::maxpool2d_forward(x, 3, 2, 1);
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    for (auto& blk : m.stages[s]) x = detail::block_forward(blk, x, training);
    const std::string name = "stage" + std::to_string(s + 1);
    if (wanted(name)) out[name] = detail::flatten_rows(x);
  }
  Tensor pooled = nn::global_avgpool_forward(x);
  if (wanted("avgpool")) out["avgpool"] = pooled;
  Tensor logits = nn::linear_forward(pooled, m.fc_weight, m.fc_bias);
  if (wanted("fc")) out["fc"] = logits;
  if (wanted("softmax")) {
    std::vector<int> dummy(batch.dim(0), 0);
    out["softmax"] = nn::softmax_xent_forward(logits, dummy).probs;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training forward/backward with a hand-rolled tape.
// ---------------------------------------------------------------------------

struct BlockTape {
  Tensor in, conv1_out, relu1_out, conv2_out, bn2_out, skip_conv_out, skip_out, sum;
};

struct ForwardTape {
  Tensor input, stem_conv, stem_relu_in, stem_relu_out, stem_pool;
  std::vector<std::vector<BlockTape>> blocks;
  Tensor gap_in, gap_out, logits, probs;
  double loss = 0.0;
};

inline double model_forward_train(Model& m, const Tensor& batch, const std::vector<int>& labels,
                                  ForwardTape& tape) {
  tape.input = batch;
  tape.stem_conv =
      nn::conv2d_forward(batch, m.stem.weight, &m.stem.bias, m.stem.stride, m.stem.pad);
  tape.stem_relu_in = nn::batchnorm2d_forward(tape.stem_conv, m.stem_bn, true);
  tape.stem_relu_out = nn::relu_forward(tape.stem_relu_in);
  tape.stem_pool = nn::maxpool2d_forward(tape.stem_relu_out, 3, 2, 1);

  tape.blocks.assign(m.stages.size(), {});
  Tensor x = tape.stem_pool;
  for (std::size_t s = 0; s < m.stages.size(); ++s) {
    for (auto& blk : m.stages[s]) {
      BlockTape bt;
      bt.in = x;
      bt.conv1_out = nn::conv2d_forward(x, blk.conv1.weight, &blk.conv1.bias, blk.conv1.stride,
                                        blk.conv1.pad);
      Tensor n1 = nn::batchnorm2d_forward(bt.conv1_out, blk.bn1, true);
      bt.relu1_out = nn::relu_forward(n1);
      // relu backward needs its input; stash it where the output lived.
      bt.conv2_out = nn::conv2d_forward(bt.relu1_out, blk.conv2.weight, &blk.conv2.bias,
                                        blk.conv2.stride, blk.conv2.pad);
      bt.bn2_out = nn::batchnorm2d_forward(bt.conv2_out, blk.bn2, true);
      if (blk.proj) {
        bt.skip_conv_out = nn::conv2d_forward(x, blk.proj->weight, &blk.proj->bias,
                                              blk.proj->stride, blk.proj->pad);
        bt.skip_out = nn::batchnorm2d_forward(bt.skip_conv_out, *blk.proj_bn, true);
      } else {
        bt.skip_out = x;
      }
      bt.sum = nn::residual_add(bt.bn2_out, bt.skip_out);
      x = nn::relu_forward(bt.sum);
      tape.blocks[s].push_back(std::move(bt));
    }
  }
  tape.gap_in = x;
  tape.gap_out = nn::global_avgpool_forward(x);
  tape.logits = nn::linear_forward(tape.gap_out, m.fc_weight, m.fc_bias);
  auto sm = nn::softmax_xent_forward(tape.logits, labels);
  tape.probs = std::move(sm.probs);
  tape.loss = sm.loss;
  return tape.loss;
}

// Gradients in the same order as Model::params().
inline std::vector<Tensor> model_backward(Model& m, const ForwardTape& tape,
                                          const std::vector<int>& labels) {
  std::map<std::string, Tensor> grads;

  Tensor dlogits = nn::softmax_xent_backward(tape.probs, labels);
  auto fc_g = nn::linear_backward(tape.gap_out, m.fc_weight, dlogits);
  grads["fc.weight"] = std::move(fc_g.d_weight);
  grads["fc.bias"] = std::move(fc_g.d_bias);
  Tensor dx = nn::global_avgpool_backward(tape.gap_in, fc_g.d_input);

  for (std::size_t s = m.stages.size(); s-- > 0;) {
    for (std::size_t b = m.stages[s].size(); b-- > 0;) {
      ResBlock& blk = m.stages[s][b];
      const BlockTape& bt = tape.blocks[s][b];
      const std::string p = Model::block_name(s, b);

      Tensor dsum = nn::relu_backward(bt.sum, dx);

      // Main branch: bn2 <- conv2 <- relu1 <- bn1 <- conv1.
      auto bn2_g = nn::batchnorm2d_backward(bt.conv2_out, blk.bn2, dsum);
      grads[p + ".bn2.gamma"] = std::move(bn2_g.d_gamma);
      grads[p + ".bn2.beta"] = std::move(bn2_g.d_beta);
      auto conv2_g = nn::conv2d_backward(bt.relu1_out, blk.conv2.weight, true, blk.conv2.stride,
                                         blk.conv2.pad, bn2_g.d_input);
      grads[p + ".conv2.weight"] = std::move(conv2_g.d_weight);
      grads[p + ".conv2.bias"] = std::move(conv2_g.d_bias);
      // relu1's input is bn1's output, which was not kept; recompute the mask
      // from relu1_out (x>0 there iff input>0).
      Tensor drelu1(bt.relu1_out.shape());
      for (std::size_t i = 0; i < drelu1.size(); ++i)
        drelu1[i] = bt.relu1_out[i] > 0.0f ? conv2_g.d_input[i] : 0.0f;
      auto bn1_g = nn::batchnorm2d_backward(bt.conv1_out, blk.bn1, drelu1);
      grads[p + ".bn1.gamma"] = std::move(bn1_g.d_gamma);
      grads[p + ".bn1.beta"] = std::move(bn1_g.d_beta);
      auto conv1_g = nn::conv2d_backward(bt.in, blk.conv1.weight, true, blk.conv1.stride,
                                         blk.conv1.pad, bn1_g.d_input);
      grads[p + ".conv1.weight"] = std::move(conv1_g.d_weight);
      grads[p + ".conv1.bias"] = std::move(conv1_g.d_bias);

      // Skip branch.
      Tensor dskip_in;
      if (blk.proj) {
        auto pbn_g = nn::batchnorm2d_backward(bt.skip_conv_out, *blk.proj_bn, dsum);
        grads[p + ".projbn.gamma"] = std::move(pbn_g.d_gamma);
        grads[p + ".projbn.beta"] = std::move(pbn_g.d_beta);
        auto proj_g = nn::conv2d_backward(bt.in, blk.proj->weight, true, blk.proj->stride,
                                          blk.proj->pad, pbn_g.d_input);
        grads[p + ".proj.weight"] = std::move(proj_g.d_weight);
        grads[p + ".proj.bias"] = std::move(proj_g.d_bias);
        dskip_in = std::move(proj_g.d_input);
      } else {
        dskip_in = dsum;
      }

      dx = std::move(conv1_g.d_input);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dskip_in[i];
    }
  }

  dx = nn::maxpool2d_backward(tape.stem_relu_out, 3, 2, 1, dx);
  dx = nn::relu_backward(tape.stem_relu_in, dx);
  auto stem_bn_g = nn::batchnorm2d_backward(tape.stem_conv, m.stem_bn, dx);
  grads["stem.bn.gamma"] = std::move(stem_bn_g.d_gamma);
  grads["stem.bn.beta"] = std::move(stem_bn_g.d_beta);
  // No gradient flows past the stem; skip its input gradient entirely.
  auto stem_g = nn::conv2d_backward(tape.input, m.stem.weight, true, m.stem.stride, m.stem.pad,
                                    stem_bn_g.d_input, /*need_input_grad=*/false);
  grads["stem.conv.weight"] = std::move(stem_g.d_weight);
  grads["stem.conv.bias"] = std::move(stem_g.d_bias);

  std::vector<Tensor> out;
  for (const auto& p : m.params()) {
    auto it = grads.find(p.name);
    if (it == grads.end()) throw Error("internal: missing gradient for " + p.name);
    out.push_back(std::move(it->second));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: an archive of every parameter tensor plus BN running stats,
// names prefixed by layer, plus a [epoch, version] metadata tensor.
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMetaName = "__meta__";
inline constexpr float kCheckpointVersion = 1.0f;

inline std::vector<NamedTensor> checkpoint_records(Model& m, int epoch) {
  std::vector<NamedTensor> records;
  for (const auto& p : m.params()) records.push_back({p.name, *p.tensor});
  for (const auto& [name, bn] : m.bn_layers()) {
    records.push_back({name + ".running_mean", bn->running_mean});
    records.push_back({name + ".running_var", bn->running_var});
  }
  records.push_back(
      {kCheckpointMetaName,
       Tensor::from_data({2}, {static_cast<float>(epoch), kCheckpointVersion})});
  return records;
}

inline void save_checkpoint(std::ostream& os, Model& m, int epoch) {
  write_archive(os, checkpoint_records(m, epoch));
}

inline void save_checkpoint_file(const std::filesystem::path& path, Model& m, int epoch) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open checkpoint for writing: " + path.string());
  save_checkpoint(os, m, epoch);
  if (!os) throw Error("checkpoint write failed: " + path.string());
}

// Loads records into an already-built model; shapes must match exactly.
// Returns the stored epoch.
inline int load_checkpoint(Model& m, const std::vector<NamedTensor>& records) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& r : records) by_name[r.name] = &r.tensor;

  int epoch = 0;
  auto meta = by_name.find(kCheckpointMetaName);
  if (meta == by_name.end()) throw FormatError("checkpoint is missing its metadata tensor");
  if (meta->second->size() != 2) throw FormatError("checkpoint metadata must have 2 entries");
  if ((*meta->second)[1] != kCheckpointVersion)
    throw FormatError("unsupported checkpoint version");
  epoch = static_cast<int>((*meta->second)[0]);

  auto take = [&by_name](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing tensor \"" + name + '"');
    if (it->second->shape() != dst.shape())
      throw ShapeError("checkpoint shape mismatch for \"" + name + "\": file has " +
                       it->second->shape_str() + ", model expects " + dst.shape_str());
    dst = *it->second;
    by_name.erase(it);
  };

  for (const auto& p : m.params()) take(p.name, *p.tensor);
  for (const auto& [name, bn] : m.bn_layers()) {
    take(name + ".running_mean", bn->running_mean);
    take(name + ".running_var", bn->running_var);
  }
  by_name.erase(kCheckpointMetaName);
  if (!by_name.empty())
    throw FormatError("checkpoint has unexpected tensor \"" + by_name.begin()->first + '"');
  return epoch;
}

// Recovers the architecture from a checkpoint's tensor names and shapes so
// the CLI does not need arch flags next to every checkpoint.
inline ArchConfig infer_config(const std::vector<NamedTensor>& records) {
  ArchConfig cfg;
  std::array<int, 4> blocks{0, 0, 0, 0};
  for (const auto& r : records) {
    if (r.name.rfind("stage", 0) != 0) continue;
    const std::size_t dot = r.name.find('.');
    if (dot == std::string::npos) continue;
    const int stage = std::atoi(r.name.substr(5, dot - 5).c_str());
    const std::size_t blk_pos = r.name.find("block", dot);
    if (blk_pos == std::string::npos || stage < 1 || stage > 4) continue;
    const int blk = std::atoi(r.name.substr(blk_pos + 5).c_str());
    blocks[stage - 1] = std::max(blocks[stage - 1], blk);
  }
  for (int b : blocks)
    if (b < 1) throw FormatError("checkpoint does not contain a full four-stage network");
  cfg.stage_blocks = blocks;
  for (const auto& r : records) {
    if (r.name == "fc.bias") cfg.num_classes = static_cast<int>(r.tensor.size());
    for (int s = 0; s < 4; ++s) {
      const std::string key = "stage" + std::to_string(s + 1) + ".block1.conv1.weight";
      if (r.name == key) cfg.stage_channels[s] = static_cast<int>(r.tensor.dim(0));
    }
  }
  return cfg;
}

inline std::pair<Model, int> load_model_file(const std::filesystem::path& path) {
  const auto records = read_archive_file(path);
  Model m = build_model(infer_config(records), 0);
  const int epoch = load_checkpoint(m, records);
  return {std::move(m), epoch};
}

} // namespace rsaforge
