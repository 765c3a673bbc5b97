#include "xlp/encoder.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "xlp/corpus.hpp"

namespace xlp {

namespace {
constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskBias = -1e9;
constexpr double kInitRange = 0.02;
}  // namespace

int EncoderConfig::default_universal_layer(int num_layers) {
  return static_cast<int>(std::ceil(num_layers * 8.0 / 12.0));
}

int EncoderConfig::default_retrieval_layer(int num_layers) {
  return static_cast<int>(std::ceil(num_layers * 7.0 / 12.0));
}

void EncoderConfig::validate() const {
  if (num_layers < 1) throw std::invalid_argument("encoder config: num_layers must be >= 1");
  if (hidden_size < 1 || ffn_size < 1 || num_heads < 1) {
    throw std::invalid_argument("encoder config: sizes must be positive");
  }
  if (hidden_size % num_heads != 0) {
    throw std::invalid_argument("encoder config: hidden_size " + std::to_string(hidden_size) +
                                " not divisible by num_heads " + std::to_string(num_heads));
  }
  if (vocab_size <= kNumSpecials) {
    throw std::invalid_argument("encoder config: vocab_size must exceed the reserved specials");
  }
  if (max_positions < 2) throw std::invalid_argument("encoder config: max_positions must be >= 2");
  if (universal_layer < 1 || universal_layer > num_layers) {
    throw std::invalid_argument("encoder config: universal_layer out of range");
  }
  if (retrieval_layer < 1 || retrieval_layer > num_layers) {
    throw std::invalid_argument("encoder config: retrieval_layer out of range");
  }
  if (projection_dim < 1) throw std::invalid_argument("encoder config: projection_dim must be >= 1");
}

EncoderParams EncoderParams::init(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  const int h = config.hidden_size;
  const int f = config.ffn_size;
  auto weight = [&](int r, int c) {
    return Tensor::uniform({r, c}, -kInitRange, kInitRange, rng, true);
  };
  auto bias = [&](int c) { return Tensor::zeros({1, c}, true); };
  p.token_embeddings = weight(config.vocab_size, h);
  p.position_embeddings = weight(config.max_positions, h);
  for (int l = 0; l < config.num_layers; ++l) {
    LayerParams lp;
    lp.wq = weight(h, h);
    lp.bq = bias(h);
    lp.wk = weight(h, h);
    lp.bk = bias(h);
    lp.wv = weight(h, h);
    lp.bv = bias(h);
    lp.wo = weight(h, h);
    lp.bo = bias(h);
    lp.ln1_gamma = Tensor::full({1, h}, 1.0, true);
    lp.ln1_beta = bias(h);
    lp.w1 = weight(h, f);
    lp.b1 = bias(f);
    lp.w2 = weight(f, h);
    lp.b2 = bias(h);
    lp.ln2_gamma = Tensor::full({1, h}, 1.0, true);
    lp.ln2_beta = bias(h);
    p.layers.push_back(std::move(lp));
  }
  p.projection = weight(h, config.projection_dim);
  return p;
}

std::vector<std::pair<std::string, Tensor>> EncoderParams::named() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_emb", token_embeddings);
  out.emplace_back("pos_emb", position_embeddings);
  for (size_t l = 0; l < layers.size(); ++l) {
    const std::string prefix = "layer" + std::to_string(l) + ".";
    const LayerParams& lp = layers[l];
    out.emplace_back(prefix + "wq", lp.wq);
    out.emplace_back(prefix + "bq", lp.bq);
    out.emplace_back(prefix + "wk", lp.wk);
    out.emplace_back(prefix + "bk", lp.bk);
    out.emplace_back(prefix + "wv", lp.wv);
    out.emplace_back(prefix + "bv", lp.bv);
    out.emplace_back(prefix + "wo", lp.wo);
    out.emplace_back(prefix + "bo", lp.bo);
    out.emplace_back(prefix + "ln1_gamma", lp.ln1_gamma);
    out.emplace_back(prefix + "ln1_beta", lp.ln1_beta);
    out.emplace_back(prefix + "w1", lp.w1);
    out.emplace_back(prefix + "b1", lp.b1);
    out.emplace_back(prefix + "w2", lp.w2);
    out.emplace_back(prefix + "b2", lp.b2);
    out.emplace_back(prefix + "ln2_gamma", lp.ln2_gamma);
    out.emplace_back(prefix + "ln2_beta", lp.ln2_beta);
  }
  out.emplace_back("proj", projection);
  return out;
}

size_t EncoderParams::num_values() const {
  size_t n = 0;
  for (const auto& [name, t] : named()) n += t.size();
  return n;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams p;
  p.config = config;
  p.token_embeddings = token_embeddings.clone();
  p.position_embeddings = position_embeddings.clone();
  for (const LayerParams& lp : layers) {
    LayerParams c;
    c.wq = lp.wq.clone();
    c.bq = lp.bq.clone();
    c.wk = lp.wk.clone();
    c.bk = lp.bk.clone();
    c.wv = lp.wv.clone();
    c.bv = lp.bv.clone();
    c.wo = lp.wo.clone();
    c.bo = lp.bo.clone();
    c.ln1_gamma = lp.ln1_gamma.clone();
    c.ln1_beta = lp.ln1_beta.clone();
    c.w1 = lp.w1.clone();
    c.b1 = lp.b1.clone();
    c.w2 = lp.w2.clone();
    c.b2 = lp.b2.clone();
    c.ln2_gamma = lp.ln2_gamma.clone();
    c.ln2_beta = lp.ln2_beta.clone();
    p.layers.push_back(std::move(c));
  }
  p.projection = projection.clone();
  return p;
}

const Tensor& HiddenStates::at_layer(int layer) const {
  if (layer < 0 || layer >= static_cast<int>(layers.size())) {
    throw std::out_of_range("hidden states: layer " + std::to_string(layer) +
                            " outside [0, " + std::to_string(layers.size() - 1) + "]");
  }
  return layers[static_cast<size_t>(layer)];
}

std::vector<uint8_t> all_true_mask(size_t len) {
  return std::vector<uint8_t>(len, 1);
}

HiddenStates encode(const EncoderParams& params, const std::vector<int>& tokens,
                    const std::vector<uint8_t>& attention_mask, Tape* tape) {
  const EncoderConfig& cfg = params.config;
  const int len = static_cast<int>(tokens.size());
  if (len == 0) throw std::invalid_argument("encode: empty token sequence");
  if (len > cfg.max_positions) {
    throw std::invalid_argument("encode: sequence of " + std::to_string(len) +
                                " tokens exceeds max_positions " +
                                std::to_string(cfg.max_positions));
  }
  if (attention_mask.size() != tokens.size()) {
    throw std::invalid_argument("encode: attention mask length does not match tokens");
  }
  for (int id : tokens) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw std::out_of_range("encode: unknown token id " + std::to_string(id));
    }
  }
  if (tokens[0] != kClsId) {
    throw std::invalid_argument("encode: sequence must start with [CLS]");
  }

  const int h = cfg.hidden_size;
  const int heads = cfg.num_heads;
  const int dh = h / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Additive attention bias: 0 for real positions, a large negative constant
  // for padding keys. Finite, and exp() underflows to exactly zero weight
  // under the max-subtraction in softmax.
  Tensor att_bias = Tensor::zeros({len, len}, false);
  for (int j = 0; j < len; ++j) {
    if (!attention_mask[j]) {
      for (int i = 0; i < len; ++i) att_bias.data()[i * len + j] = kMaskBias;
    }
  }

  std::vector<int> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), 0);

  HiddenStates hs;
  Tensor x = add(embedding_lookup(params.token_embeddings, tokens, tape),
                 embedding_lookup(params.position_embeddings, positions, tape), tape);
  hs.layers.push_back(x);

  for (const LayerParams& lp : params.layers) {
    Tensor q = add_rowwise(matmul(x, lp.wq, tape), lp.bq, tape);
    Tensor k = add_rowwise(matmul(x, lp.wk, tape), lp.bk, tape);
    Tensor v = add_rowwise(matmul(x, lp.wv, tape), lp.bv, tape);
    std::vector<Tensor> head_outputs;
    head_outputs.reserve(static_cast<size_t>(heads));
    for (int head = 0; head < heads; ++head) {
      Tensor qh = slice(q, 1, head * dh, dh, tape);
      Tensor kh = slice(k, 1, head * dh, dh, tape);
      Tensor vh = slice(v, 1, head * dh, dh, tape);
      Tensor scores = scale(matmul_nt(qh, kh, tape), att_scale, tape);
      scores = add(scores, att_bias, tape);
      Tensor weights = softmax(scores, tape);
      head_outputs.push_back(matmul(weights, vh, tape));
    }
    Tensor attn = concat(head_outputs, 1, tape);
    attn = add_rowwise(matmul(attn, lp.wo, tape), lp.bo, tape);
    x = layer_norm(add(x, attn, tape), lp.ln1_gamma, lp.ln1_beta, kLayerNormEps, tape);

    Tensor ff = gelu(add_rowwise(matmul(x, lp.w1, tape), lp.b1, tape), tape);
    ff = add_rowwise(matmul(ff, lp.w2, tape), lp.b2, tape);
    x = layer_norm(add(x, ff, tape), lp.ln2_gamma, lp.ln2_beta, kLayerNormEps, tape);
    hs.layers.push_back(x);
  }
  return hs;
}

Tensor sequence_repr(const HiddenStates& hidden, int layer, const EncoderParams& params,
                     Tape* tape) {
  const Tensor& states = hidden.at_layer(layer);
  Tensor cls = slice(states, 0, 0, 1, tape);
  return matmul(cls, params.projection, tape);
}

Tensor token_logits(const HiddenStates& hidden, int position, const EncoderParams& params,
                    Tape* tape) {
  const Tensor& last = hidden.layers.back();
  if (position < 0 || position >= last.rows()) {
    throw std::out_of_range("token_logits: position " + std::to_string(position) +
                            " outside sequence of " + std::to_string(last.rows()));
  }
  Tensor row = slice(last, 0, position, 1, tape);
  return matmul_nt(row, params.token_embeddings, tape);
}

std::vector<double> layer_mean_repr(const HiddenStates& hidden, int layer,
                                    const std::vector<uint8_t>& attention_mask) {
  const Tensor& states = hidden.at_layer(layer);
  if (attention_mask.size() != static_cast<size_t>(states.rows())) {
    throw std::invalid_argument("layer_mean_repr: mask length does not match sequence");
  }
  const int h = states.cols();
  std::vector<double> out(static_cast<size_t>(h), 0.0);
  int count = 0;
  for (int i = 0; i < states.rows(); ++i) {
    if (!attention_mask[static_cast<size_t>(i)]) continue;
    ++count;
    for (int j = 0; j < h; ++j) out[static_cast<size_t>(j)] += states.at(i, j);
  }
  if (count == 0) throw std::invalid_argument("layer_mean_repr: all positions are padding");
  for (double& v : out) v /= count;
  return out;
}

}  // namespace xlp
