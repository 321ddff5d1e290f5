#ifndef CONVREC_MODEL_HPP_
#define CONVREC_MODEL_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "convrec/dataset.hpp"
#include "convrec/numerics.hpp"

namespace convrec {

enum class LayerKind { dense, conv1x1 };

// conv1x1 layers apply a (out_width x in_width) filter to every item row with
// shared weights. `spatial` is set (to the item count n) only on the layer
// that crosses between the flat and the per-item representation: the
// encoder's flattening dense layer and the decoder's expanding dense layer.
struct LayerSpec {
  LayerKind kind = LayerKind::conv1x1;
  int in_width = 0;
  int out_width = 0;
  std::int64_t spatial = 0;
};

// Encoder: conv1x1 layers over the n x (k+1) one-hot input, then dense layers
// down to the bottleneck of width r. The first dense layer flattens.
struct EncoderSpec {
  std::vector<LayerSpec> layers;

  int input_channels() const { return layers.empty() ? 0 : layers.front().in_width; }
  int bottleneck() const { return layers.empty() ? 0 : layers.back().out_width; }
  std::int64_t param_count(bool with_bias) const;  // D1
  void validate(std::int64_t n, int k) const;
};

// Decoder: `fully_connected_count` (L0) dense layers from the bottleneck, the
// last of which expands to the n x K spatial representation, then conv1x1
// layers ending at k+1 output channels.
struct DecoderSpec {
  std::vector<LayerSpec> layers;
  int fully_connected_count = 1;  // L0

  int depth() const { return static_cast<int>(layers.size()); }  // L
  int bottleneck() const { return layers.empty() ? 0 : layers.front().in_width; }
  int output_channels() const { return layers.empty() ? 0 : layers.back().out_width; }
  std::int64_t param_count(bool with_bias) const;  // D2
  void validate(std::int64_t n, int k) const;
};

// The architecture used throughout: encoder = one conv (k+1 -> conv_width)
// plus one flattening dense layer (n*conv_width -> r); decoder = one dense
// expansion (r -> n*conv_width) plus L-1 convs ending at k+1 channels.
EncoderSpec default_encoder(std::int64_t n, int k, int conv_width, int r);
DecoderSpec default_decoder(std::int64_t n, int k, int depth, int r, int conv_width);

// Weights, biases (when enabled) and the initialization snapshot frozen at
// init time. ReLU everywhere except after the final decoder layer.
struct ModelParams {
  EncoderSpec enc_spec;
  DecoderSpec dec_spec;
  RatingScale scale;
  std::int64_t n = 0;
  bool with_bias = false;
  std::uint64_t seed = 0;

  std::vector<Matrix> enc_w;
  std::vector<Matrix> dec_w;
  std::vector<std::vector<double>> enc_b;
  std::vector<std::vector<double>> dec_b;

  std::vector<Matrix> enc_w_init;
  std::vector<Matrix> dec_w_init;
  std::vector<std::vector<double>> enc_b_init;
  std::vector<std::vector<double>> dec_b_init;

  int rating_count() const { return scale.rating_count(); }
  std::int64_t encoder_param_count() const { return enc_spec.param_count(with_bias); }
  std::int64_t decoder_param_count() const { return dec_spec.param_count(with_bias); }
};

ModelParams init_params(const EncoderSpec& enc, const DecoderSpec& dec, const RatingScale& scale,
                        std::int64_t n, std::uint64_t seed, bool with_bias = false);

// Per-layer activations kept for backpropagation. ReLU masks are recovered
// from the sign of the stored post-activation values.
struct ForwardTrace {
  std::vector<std::vector<double>> enc_act;
  std::vector<std::vector<double>> dec_act;  // last entry holds the raw scores
  std::vector<double> embedding;
};

void forward_trace(const ModelParams& params, const UserSlice& slice, ForwardTrace& trace);

struct ForwardOutput {
  Matrix scores;         // n x (k+1)
  Matrix probabilities;  // G, row-stochastic
  Matrix conditional;    // n x k, rating distribution given interaction
  std::vector<double> predicted_rating;          // F, convex combination of the scale
  std::vector<double> interaction_probability;   // 1 - G[:,0]
  std::vector<double> embedding;
};

ForwardOutput forward(const ModelParams& params, const UserSlice& slice);

// Derives conditional, predicted rating and interaction probability from an
// already-known probability tensor (used for checkpoint-averaged prediction).
void derive_from_probabilities(const RatingScale& scale, ForwardOutput& out);

std::vector<double> encoder_forward(const ModelParams& params, const UserSlice& slice);

// Runs a decoder weight set on a raw bottleneck vector, returning the flat
// n x (k+1) scores. Used by probes that perturb weights around a model.
std::vector<double> decoder_forward(const DecoderSpec& spec, std::int64_t n,
                                    const std::vector<Matrix>& weights,
                                    const std::vector<std::vector<double>>& biases,
                                    bool with_bias, std::span<const double> bottleneck);

// Checks that softmax over the rating channels equals the tail of the full
// softmax renormalized, within 1e-12 elementwise.
bool conditional_identity_check(std::span<const double> score_row);

// Empirical chi: max over users of the Euclidean norm of the bottleneck.
double embedding_norm_max(const ModelParams& params, const ObservedDataset& train);

// Self-describing binary checkpoint; write -> read round-trips bit-exactly.
void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace convrec

#endif  // CONVREC_MODEL_HPP_
