#pragma once

#include <string>
#include <utility>
#include <vector>

#include "xlp/tensor.hpp"

namespace xlp {

struct EncoderConfig {
  int num_layers = 2;
  int hidden_size = 64;
  int ffn_size = 256;
  int num_heads = 4;
  int vocab_size = 200;
  int max_positions = 64;
  int universal_layer = 2;   // 1-based; layer whose [CLS] feeds the contrastive head
  int retrieval_layer = 2;   // 1-based; layer whose mean-pooled states feed retrieval
  int projection_dim = 64;

  void validate() const;

  // Scaled analogue of the 12-layer defaults: universal 8/12, retrieval 7/12.
  static int default_universal_layer(int num_layers);
  static int default_retrieval_layer(int num_layers);
};

struct LayerParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln1_gamma, ln1_beta;
  Tensor w1, b1, w2, b2;
  Tensor ln2_gamma, ln2_beta;
};

// All learnable weights of one encoder. The token embedding table doubles as
// the MLM output projection (weight tying); there is no separate output matrix.
struct EncoderParams {
  EncoderConfig config;
  Tensor token_embeddings;     // vocab x hidden
  Tensor position_embeddings;  // max_positions x hidden
  std::vector<LayerParams> layers;
  Tensor projection;           // hidden x projection_dim, no bias

  // Weight matrices and embeddings from U[-0.02, 0.02]; biases zero,
  // layer-norm scales one.
  static EncoderParams init(const EncoderConfig& config, Rng& rng);

  // Stable (name, tensor) enumeration; fixes optimizer/checkpoint order.
  std::vector<std::pair<std::string, Tensor>> named() const;
  size_t num_values() const;
  EncoderParams clone() const;
};

// Per-layer activations: index 0 is the embedding output, index L the final
// layer. seq_len x hidden each.
struct HiddenStates {
  std::vector<Tensor> layers;
  int num_layers() const { return static_cast<int>(layers.size()) - 1; }
  const Tensor& at_layer(int layer) const;  // 0 = embeddings, 1..L = transformer layers
};

// Full forward pass. attention_mask marks real (non-padding) positions;
// padding is excluded from attention. tape == nullptr runs detached.
HiddenStates encode(const EncoderParams& params, const std::vector<int>& tokens,
                    const std::vector<uint8_t>& attention_mask, Tape* tape);

std::vector<uint8_t> all_true_mask(size_t len);

// [CLS] hidden vector at `layer` through the projection head -> 1 x projection_dim.
Tensor sequence_repr(const HiddenStates& hidden, int layer, const EncoderParams& params,
                     Tape* tape);

// Tied-embedding logits for one position of the last layer -> 1 x vocab.
Tensor token_logits(const HiddenStates& hidden, int position, const EncoderParams& params,
                    Tape* tape);

// Mean of hidden[layer] over non-padding positions (evaluation only, detached).
std::vector<double> layer_mean_repr(const HiddenStates& hidden, int layer,
                                    const std::vector<uint8_t>& attention_mask);

}  // namespace xlp
