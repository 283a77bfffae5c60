#pragma once

// Full localizer: encoders -> multi-modal self attention -> multi-context
// biaffine scoring.

#include <cstdint>
#include <span>

#include "cbln/encoders.hpp"
#include "cbln/layers.hpp"
#include "cbln/mcbl.hpp"
#include "cbln/mmsa.hpp"
#include "cbln/params.hpp"
#include "cbln/tensor.hpp"

namespace cbln {

struct ModelConfig {
  EncoderConfig encoder;
  McblConfig mcbl;

  // The localization stage inherits d_model and rnn_hidden from the encoders.
  [[nodiscard]] McblConfig localization() const {
    McblConfig c = mcbl;
    c.d_model = encoder.d_model;
    c.rnn_hidden = encoder.rnn_hidden;
    return c;
  }

  void validate() const {
    encoder.validate();
    localization().validate();
  }
};

class CblnModel {
 public:
  CblnModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng = derive_rng(seed, kInitStream);
    add_encoder_params(store_, config_.encoder, rng);
    add_mmsa_params(store_, config_.encoder.d_model, rng);
    add_mcbl_params(store_, config_.localization(), rng);
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  ParameterStore& params() { return store_; }
  [[nodiscard]] const ParameterStore& params() const { return store_; }

  // T x T score map for one video/query pair, recorded on params' tape.
  [[nodiscard]] Tensor forward(ParamBinder& params, const Matrix& features, std::span<const int> tokens,
                               const ForwardMode& mode) const {
    if (features.rows < 2) throw DataError("video needs at least 2 frames, got " + std::to_string(features.rows));
    const Tensor V = encode_video(features, params, config_.encoder);
    const Tensor Q = encode_query(tokens, params, config_.encoder);
    const Tensor fused = mmsa_forward(V, Q, MmsaParams::bind(params));
    return mcbl_forward(fused, params, config_.localization(), mode);
  }

  // Evaluation-mode score map.
  [[nodiscard]] Matrix score(const Matrix& features, std::span<const int> tokens) const {
    Tape tape;
    ParamBinder binder(tape, store_, false);
    return forward(binder, features, tokens, ForwardMode{}).value();
  }

  static constexpr std::uint64_t kInitStream = 0x1417;

 private:
  ModelConfig config_;
  ParameterStore store_;
};

}  // namespace cbln
