#pragma once

// Scaled-IoU supervision, soft-label binary cross entropy, Adam, and the
// training loop, plus the checkpoint format.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbln/data.hpp"
#include "cbln/errors.hpp"
#include "cbln/layers.hpp"
#include "cbln/model.hpp"
#include "cbln/params.hpp"
#include "cbln/segment.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

// IoU of every cell (s, e) with the ground truth, divided by the maximum.
// Cells with s > e are zero; the ground-truth cell is exactly 1.
inline Matrix build_supervision(const Segment& gt, std::size_t T) {
  if (!gt.valid() || gt.end >= T) {
    throw DataError("ground truth " + gt.str() + " outside a video of " + std::to_string(T) + " frames");
  }
  Matrix O(T, T);
  double peak = 0.0;
  for (std::size_t s = 0; s < T; ++s) {
    for (std::size_t e = s; e < T; ++e) {
      O(s, e) = compute_iou(Segment{s, e}, gt);
      peak = std::max(peak, O(s, e));
    }
  }
  if (!(peak > 0.0)) throw DataError("supervision map has no positive cell");
  for (double& v : O.data) v /= peak;
  return O;
}

struct BceOptions {
  double eps = 1e-7;
  // Average only over s <= e cells instead of the full T x T grid.
  bool mask_invalid = false;
};

// -mean( o log M + (1 - o) log(1 - M) ) with M clamped to [eps, 1 - eps].
inline Tensor bce_loss(const Tensor& scores, const Matrix& targets, const BceOptions& opt = {}) {
  const Matrix& M = scores.value();
  if (M.rows != targets.rows || M.cols != targets.cols) {
    throw DimensionError("bce_loss: scores " + M.shape_str() + " vs targets " + targets.shape_str());
  }
  Tape& tape = scores.tape();
  Matrix complement(targets.rows, targets.cols);
  for (std::size_t i = 0; i < targets.size(); ++i) complement.data[i] = 1.0 - targets.data[i];

  const Tensor clamped = clamp(scores, opt.eps, 1.0 - opt.eps);
  Tensor per_cell = tape.constant(targets) * log(clamped) + tape.constant(complement) * log(affine(clamped, -1.0, 1.0));
  double cells = static_cast<double>(M.size());
  if (opt.mask_invalid) {
    Matrix mask(M.rows, M.cols);
    cells = 0.0;
    for (std::size_t s = 0; s < M.rows; ++s) {
      for (std::size_t e = s; e < M.cols; ++e) {
        mask(s, e) = 1.0;
        cells += 1.0;
      }
    }
    per_cell = per_cell * tape.constant(std::move(mask));
  }
  return scale(sum_all(per_cell), -1.0 / cells);
}

struct AdamConfig {
  double lr = 8e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0,1)");
    }
    if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
  }
};

// One bias-corrected Adam update; grads align with store order.
inline void adam_step(ParameterStore& store, std::span<const Matrix> grads, const AdamConfig& cfg) {
  cfg.validate();
  if (grads.size() != store.size()) {
    throw ContractError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(store.size()) + " parameters");
  }
  for (std::size_t k = 0; k < store.size(); ++k) {
    if (grads[k].size() != store[k].value.size()) {
      throw DimensionError("adam_step: gradient " + grads[k].shape_str() + " for parameter '" + store[k].name +
                           "' " + store[k].value.shape_str());
    }
    if (!all_finite(grads[k])) throw TrainingError("non-finite gradient in parameter '" + store[k].name + "'");
  }
  const long step = store.step() + 1;
  const double correct1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double correct2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t k = 0; k < store.size(); ++k) {
    Parameter& p = store[k];
    const Matrix& g = grads[k];
    for (std::size_t i = 0; i < g.size(); ++i) {
      double& m = p.first_moment.data[i];
      double& v = p.second_moment.data[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g.data[i];
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.data[i] * g.data[i];
      p.value.data[i] -= cfg.lr * (m / correct1) / (std::sqrt(v / correct2) + cfg.eps);
    }
  }
  store.set_step(step);
}

struct TrainConfig {
  AdamConfig adam;
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  BceOptions loss;
  bool shuffle = true;

  void validate() const {
    adam.validate();
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (!(loss.eps > 0.0 && loss.eps < 0.5)) throw ConfigError("log clamp eps must lie in (0, 0.5)");
  }
};

struct TrainResult {
  std::vector<double> step_losses;   // mean loss of each optimizer step
  std::vector<double> epoch_losses;  // mean per-example loss of each epoch
};

inline constexpr std::uint64_t kShuffleStream = 0x5e11;
inline constexpr std::uint64_t kDropoutStream = 0xd201;

// Forward + loss for one example on the binder's tape.
inline Tensor example_loss(const CblnModel& model, ParamBinder& params, const GroundingExample& ex,
                           const ForwardMode& mode, const BceOptions& opt) {
  const Tensor scores = model.forward(params, ex.features, ex.tokens, mode);
  return bce_loss(scores, build_supervision(ex.gt, ex.features.rows), opt);
}

using TrainProgress = std::function<void(std::size_t epoch, double mean_loss)>;

// Mini-batch Adam. Each example runs on its own tape; gradients are summed in
// batch order and averaged before the step, so results depend only on
// (model init, data, config).
inline TrainResult train(CblnModel& model, std::span<const GroundingExample> data, const TrainConfig& cfg,
                         const TrainProgress& progress = {}) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  ParameterStore& store = model.params();
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (cfg.shuffle) {
      std::mt19937_64 rng = derive_rng(cfg.seed, kShuffleStream, epoch);
      std::shuffle(order.begin(), order.end(), rng);
    }
    double epoch_total = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<Matrix> grads = store.zero_grads();
      double batch_total = 0.0;
      for (std::size_t b = begin; b < end; ++b) {
        std::mt19937_64 rng = derive_rng(cfg.seed, kDropoutStream, step, b - begin);
        Tape tape;
        ParamBinder binder(tape, store, true);
        const Tensor loss = example_loss(model, binder, data[order[b]], ForwardMode{true, &rng}, cfg.loss);
        tape.backward(loss);
        binder.accumulate_grads(grads);
        batch_total += loss.item();
      }
      const double inv = 1.0 / static_cast<double>(end - begin);
      for (Matrix& g : grads) {
        for (double& v : g.data) v *= inv;
      }
      adam_step(store, grads, cfg.adam);
      result.step_losses.push_back(batch_total * inv);
      epoch_total += batch_total;
      ++step;
    }
    result.epoch_losses.push_back(epoch_total / static_cast<double>(data.size()));
    if (progress) progress(epoch, result.epoch_losses.back());
  }
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CBLNCKPT" magic, u64-LE header length, JSON header, then every
// parameter as little-endian float64 in header order.

inline constexpr char kCheckpointMagic[8] = {'C', 'B', 'L', 'N', 'C', 'K', 'P', 'T'};

inline void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, nlohmann::json header) {
  nlohmann::json params = nlohmann::json::array();
  for (const Parameter& p : store) params.push_back({{"name", p.name}, {"rows", p.value.rows}, {"cols", p.value.cols}});
  header["format"] = "cbln-checkpoint";
  header["version"] = 1;
  header["step"] = store.step();
  header["params"] = std::move(params);
  const std::string text = header.dump();

  std::string bytes(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t len = text.size();
  for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((len >> (8 * b)) & 0xFFu));
  bytes += text;
  for (const Parameter& p : store) {
    for (double v : p.value.data) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) bytes.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
    }
  }
  detail::write_file(path, bytes);
}

inline nlohmann::json read_checkpoint_header(const std::string& bytes, const std::string& where,
                                             std::size_t* payload_offset = nullptr) {
  if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0) {
    throw FormatError(where + ": not a checkpoint (bad magic at byte 0)");
  }
  std::uint64_t len = 0;
  for (int b = 0; b < 8; ++b) len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + b])) << (8 * b);
  if (16 + len > bytes.size()) throw FormatError(where + ": header length " + std::to_string(len) + " past end of file");
  if (payload_offset != nullptr) *payload_offset = 16 + len;
  return detail::parse_json(bytes.substr(16, len), where + " header");
}

inline nlohmann::json load_checkpoint_header(const std::filesystem::path& path) {
  return read_checkpoint_header(detail::read_file(path), path.string());
}

// Loads values into an existing store whose names and shapes must match.
inline nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterStore& store) {
  const std::string where = path.string();
  const std::string bytes = detail::read_file(path);
  std::size_t offset = 0;
  nlohmann::json header = read_checkpoint_header(bytes, where, &offset);
  const auto& params = header.at("params");
  if (params.size() != store.size()) {
    throw FormatError(where + ": checkpoint has " + std::to_string(params.size()) + " parameters, model has " +
                      std::to_string(store.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = store[k];
    const auto name = params[k].at("name").get<std::string>();
    const auto rows = params[k].at("rows").get<std::size_t>();
    const auto cols = params[k].at("cols").get<std::size_t>();
    if (name != p.name || rows != p.value.rows || cols != p.value.cols) {
      throw FormatError(where + ": parameter " + std::to_string(k) + " is '" + name + "' " + std::to_string(rows) +
                        "x" + std::to_string(cols) + ", model expects '" + p.name + "' " + p.value.shape_str());
    }
    if (offset + 8 * p.value.size() > bytes.size()) {
      throw FormatError(where + ": payload truncated at byte " + std::to_string(offset) + " while reading '" + name + "'");
    }
    for (double& v : p.value.data) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + b])) << (8 * b);
      }
      v = std::bit_cast<double>(bits);
      offset += 8;
    }
  }
  if (offset != bytes.size()) {
    throw FormatError(where + ": " + std::to_string(bytes.size() - offset) + " trailing bytes after byte " +
                      std::to_string(offset));
  }
  if (header.contains("step")) store.set_step(header.at("step").get<long>());
  return header;
}

inline void write_loss_trace(const std::filesystem::path& path, std::span<const double> step_losses) {
  std::string text = "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < step_losses.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, step_losses[i]);
    text += buf;
  }
  detail::write_file(path, text);
}

}  // namespace cbln
