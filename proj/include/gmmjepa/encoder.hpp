#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/params.hpp"
#include "gmmjepa/tensor.hpp"
#include "json.hpp"

namespace gmmjepa::encoder {

using tensor::Var;

enum class Frontend { Mel, Waveform };

struct EncoderConfig {
  Frontend frontend = Frontend::Mel;
  std::size_t input_dim = 80;  // mel bins; the waveform frontend reads 1 channel
  std::vector<std::size_t> channels{8, 16, 32};
  std::vector<std::size_t> strides{4, 4, 2};  // waveform frontend only; one per stage
  std::vector<std::size_t> dilations{1, 3, 5};
  std::size_t n_conformer_layers = 2;
  std::size_t latent_dim = 32;
  std::size_t n_heads = 4;
  std::size_t ffn_mult = 4;
  std::size_t conv_kernel = 31;
  std::size_t rel_pos_buckets = 64;
  std::size_t rel_pos_max_distance = 160;
  std::size_t daam_gaussians = 2;
  std::size_t daam_heads = 2;
  std::size_t agg_dim = 32;
  std::size_t cluster_K = 16;
  std::size_t head_hidden = 64;
  std::size_t head_blocks = 2;

  void validate() const;
  std::size_t n_stages() const { return channels.size() - 1; }
  std::size_t total_stride() const;
  std::size_t rel_pos_table_rows() const { return rel_pos_buckets + 1; }
};

nlohmann::json to_json(const EncoderConfig& c);
EncoderConfig encoder_config_from_json(const nlohmann::json& j);

// ------------------------------------------------------------------ blocks

/// x + sin^2(alpha x) / alpha with alpha = softplus(a) + 0.01 per channel.
/// x: [C, T], a: [C].
Var snake_beta(const Var& x, const Var& a);
double snake_alpha(double a);

/// Density-adaptive attention over time. x: [C, T]; delta, scale:
/// [n_heads, n_gaussians]. Channels are split evenly across heads.
Var daam(const Var& x, const Var& delta, const Var& scale, std::size_t n_heads);

/// Log-bucketed relative distance. |d| < B/4 maps to |d|; larger distances
/// are log-interpolated up to B/2 at D_max (clamped). Negative distances use
/// a second bank offset by B/2, so ids span [0, B].
std::size_t rel_pos_bucket(long distance, std::size_t B, std::size_t d_max);
/// Row-major T x T bucket ids for distance i - j.
std::vector<std::size_t> rel_pos_bucket_grid(std::size_t T, std::size_t B, std::size_t d_max);

/// Query-gated relative position bias.
/// q: [H, T, d]; table: [B+1, H]; u, w: [H, d]; s: [1]. Returns [H, T, T].
Var gated_rel_pos_bias(const Var& q, const Var& table, const Var& u, const Var& w, const Var& s,
                       std::span<const std::size_t> buckets);

/// Four residual stages: half FFN, gated-bias MHSA, conv module, half FFN.
/// x: [T, C].
Var conformer_block(const ParamStore& p, const std::string& prefix, const Var& x, const Var& table,
                     const EncoderConfig& cfg);

struct Aggregate {
  Var z;
  Var weights;  // [L+1], softmax over layers
};

/// Attention over time-pooled layer outputs; returns the convex combination of
/// the full layer outputs.
Aggregate layer_aggregate(const ParamStore& p, const std::string& prefix, const std::vector<Var>& layers);

/// [T, C] -> [T, K] logits.
Var cluster_head(const ParamStore& p, const Var& z, const EncoderConfig& cfg);

/// Pointwise projection -> GELU -> one conformer block (sharing the encoder's
/// relative-position table) -> pointwise projection. [T, C] -> [T, C].
Var predictor(const ParamStore& p, const Var& z_tilde, const Var& table, const EncoderConfig& cfg);

// ------------------------------------------------------------------ encoder

struct EncodeOutput {
  Var z;                    // [T, C] aggregated latents
  std::vector<Var> layers;  // conformer input followed by each layer output
  Var layer_weights;
};

/// Channels-first encoder input: [n_mels, T] for mel, [1, L] for waveform.
Var mel_input(const audio::MelFrameSeq& mel);
Var wave_input(const audio::WaveBuffer& wav);

/// Frames produced for an input of `len` (mel frames or samples).
std::size_t output_frames(const EncoderConfig& cfg, std::size_t len);

EncodeOutput encode(const ParamStore& p, const Var& input, const EncoderConfig& cfg);

// ------------------------------------------------------------ parameters

/// Registers encoder.*, head.*, predictor.* and t_mask with the documented
/// initialization.
void init_params(ParamStore& p, const EncoderConfig& cfg, std::uint64_t seed);

inline constexpr const char* kEncoderPrefix = "encoder.";
inline constexpr const char* kRelPosTable = "encoder.rel_pos.table";
inline constexpr const char* kMaskToken = "t_mask";

/// target <- tau * target + (1 - tau) * online for every target parameter.
void ema_update(const ParamStore& online, ParamStore& target, double tau);

}  // namespace gmmjepa::encoder
