#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "xlp/corpus.hpp"
#include "xlp/encoder.hpp"

using namespace xlp;

namespace {

EncoderConfig tiny_config() {
  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 16;
  cfg.ffn_size = 32;
  cfg.num_heads = 2;
  cfg.vocab_size = 24;
  cfg.max_positions = 12;
  cfg.universal_layer = 2;
  cfg.retrieval_layer = 1;
  cfg.projection_dim = 8;
  return cfg;
}

std::vector<int> sample_tokens() { return {kClsId, 7, 9, 11, kSepId}; }

}  // namespace

TEST_CASE("config validation") {
  EncoderConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.num_heads = 3;  // 16 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = tiny_config();
  cfg.universal_layer = 3;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  CHECK(EncoderConfig::default_universal_layer(12) == 8);
  CHECK(EncoderConfig::default_retrieval_layer(12) == 7);
  CHECK(EncoderConfig::default_universal_layer(2) == 2);
  CHECK(EncoderConfig::default_retrieval_layer(2) == 2);
}

TEST_CASE("parameter count is a pure function of the config") {
  Rng rng1(1), rng2(99);
  EncoderParams a = EncoderParams::init(tiny_config(), rng1);
  EncoderParams b = EncoderParams::init(tiny_config(), rng2);
  CHECK(a.num_values() == b.num_values());
  CHECK(a.named().size() == b.named().size());
}

TEST_CASE("init ranges: weights within 0.02, layer norm at identity") {
  Rng rng(3);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  for (size_t i = 0; i < p.token_embeddings.size(); ++i) {
    CHECK(std::abs(p.token_embeddings.data()[i]) <= 0.02);
  }
  for (int j = 0; j < 16; ++j) {
    CHECK(p.layers[0].ln1_gamma.data()[j] == 1.0);
    CHECK(p.layers[0].ln1_beta.data()[j] == 0.0);
    CHECK(p.layers[0].bq.data()[j] == 0.0);
  }
}

TEST_CASE("encode shape contract and determinism") {
  Rng rng(5);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  const auto tokens = sample_tokens();
  const auto mask = all_true_mask(tokens.size());
  HiddenStates a = encode(p, tokens, mask, nullptr);
  CHECK(a.layers.size() == 3);
  for (const Tensor& layer : a.layers) {
    CHECK(layer.rows() == static_cast<int>(tokens.size()));
    CHECK(layer.cols() == 16);
    CHECK(layer.all_finite());
  }
  HiddenStates b = encode(p, tokens, mask, nullptr);
  for (size_t l = 0; l < a.layers.size(); ++l) {
    for (size_t i = 0; i < a.layers[l].size(); ++i) {
      CHECK(a.layers[l].data()[i] == b.layers[l].data()[i]);
    }
  }
}

TEST_CASE("encode input validation") {
  Rng rng(6);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  CHECK_THROWS_AS(encode(p, {kClsId, 99, kSepId}, all_true_mask(3), nullptr),
                  std::out_of_range);  // unknown id
  std::vector<int> long_seq(13, 7);
  long_seq[0] = kClsId;
  CHECK_THROWS_AS(encode(p, long_seq, all_true_mask(13), nullptr), std::invalid_argument);
  CHECK_THROWS_AS(encode(p, {7, 9}, all_true_mask(2), nullptr), std::invalid_argument);  // no CLS
}

TEST_CASE("permutation equivariance with zeroed position embeddings") {
  Rng rng(7);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  for (size_t i = 0; i < p.position_embeddings.size(); ++i) {
    p.position_embeddings.data()[i] = 0.0;
  }
  std::vector<int> tokens{kClsId, 6, 7, 8, kSepId};
  std::vector<int> permuted{kClsId, 8, 7, 6, kSepId};  // swap positions 1 and 3
  const auto mask = all_true_mask(tokens.size());
  HiddenStates ha = encode(p, tokens, mask, nullptr);
  HiddenStates hb = encode(p, permuted, mask, nullptr);
  const Tensor& a = ha.layers.back();
  const Tensor& b = hb.layers.back();
  for (int j = 0; j < a.cols(); ++j) {
    CHECK(a.at(1, j) == doctest::Approx(b.at(3, j)).epsilon(1e-12));
    CHECK(a.at(3, j) == doctest::Approx(b.at(1, j)).epsilon(1e-12));
    CHECK(a.at(2, j) == doctest::Approx(b.at(2, j)).epsilon(1e-12));
    CHECK(a.at(0, j) == doctest::Approx(b.at(0, j)).epsilon(1e-12));
  }
}

TEST_CASE("sequence_repr") {
  Rng rng(8);
  EncoderConfig cfg = tiny_config();
  cfg.projection_dim = cfg.hidden_size;
  EncoderParams p = EncoderParams::init(cfg, rng);
  const auto tokens = sample_tokens();
  HiddenStates hidden = encode(p, tokens, all_true_mask(tokens.size()), nullptr);

  SUBCASE("identity projection returns the raw CLS vector") {
    for (int i = 0; i < cfg.hidden_size; ++i) {
      for (int j = 0; j < cfg.hidden_size; ++j) {
        p.projection.data()[i * cfg.hidden_size + j] = i == j ? 1.0 : 0.0;
      }
    }
    Tensor repr = sequence_repr(hidden, 2, p, nullptr);
    for (int j = 0; j < cfg.hidden_size; ++j) {
      CHECK(repr.data()[j] == doctest::Approx(hidden.layers[2].at(0, j)));
    }
  }
  SUBCASE("zero projection returns zeros") {
    for (size_t i = 0; i < p.projection.size(); ++i) p.projection.data()[i] = 0.0;
    Tensor repr = sequence_repr(hidden, 2, p, nullptr);
    for (size_t j = 0; j < repr.size(); ++j) CHECK(repr.data()[j] == 0.0);
  }
  SUBCASE("random projection matches a hand-rolled product") {
    Tensor repr = sequence_repr(hidden, 2, p, nullptr);
    for (int j = 0; j < cfg.hidden_size; ++j) {
      double acc = 0.0;
      for (int i = 0; i < cfg.hidden_size; ++i) {
        acc += hidden.layers[2].at(0, i) * p.projection.at(i, j);
      }
      CHECK(repr.data()[j] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
  SUBCASE("layer out of range") {
    CHECK_THROWS_AS(sequence_repr(hidden, 5, p, nullptr), std::out_of_range);
  }
}

TEST_CASE("token_logits") {
  Rng rng(9);
  EncoderConfig cfg = tiny_config();
  EncoderParams p = EncoderParams::init(cfg, rng);

  SUBCASE("zero hidden vector gives zero logits") {
    HiddenStates hidden;
    hidden.layers.push_back(Tensor::zeros({3, cfg.hidden_size}));
    Tensor logits = token_logits(hidden, 1, p, nullptr);
    CHECK(logits.cols() == cfg.vocab_size);
    for (size_t i = 0; i < logits.size(); ++i) CHECK(logits.data()[i] == 0.0);
  }
  SUBCASE("orthonormal embeddings make the matching token the argmax") {
    for (size_t i = 0; i < p.token_embeddings.size(); ++i) p.token_embeddings.data()[i] = 0.0;
    for (int v = 0; v < cfg.hidden_size; ++v) {
      p.token_embeddings.data()[v * cfg.hidden_size + v] = 1.0;  // e_v = unit vector v
    }
    const int k = 5;
    HiddenStates hidden;
    Tensor row = Tensor::zeros({1, cfg.hidden_size});
    row.data()[k] = 1.0;
    hidden.layers.push_back(row);
    Tensor logits = token_logits(hidden, 0, p, nullptr);
    int argmax = 0;
    for (int v = 1; v < cfg.vocab_size; ++v) {
      if (logits.data()[v] > logits.data()[argmax]) argmax = v;
    }
    CHECK(argmax == k);
  }
  SUBCASE("random vocab matches brute-force dot products") {
    EncoderConfig small = cfg;
    small.vocab_size = 8;
    EncoderParams sp = EncoderParams::init(small, rng);
    const std::vector<int> tokens{kClsId, 6, 7};
    HiddenStates hidden = encode(sp, tokens, all_true_mask(3), nullptr);
    Tensor logits = token_logits(hidden, 2, sp, nullptr);
    const Tensor& last = hidden.layers.back();
    for (int v = 0; v < 8; ++v) {
      double acc = 0.0;
      for (int j = 0; j < small.hidden_size; ++j) {
        acc += last.at(2, j) * sp.token_embeddings.at(v, j);
      }
      CHECK(logits.data()[v] == doctest::Approx(acc).epsilon(1e-12));
    }
  }
  SUBCASE("position out of range") {
    HiddenStates hidden;
    hidden.layers.push_back(Tensor::zeros({3, cfg.hidden_size}));
    CHECK_THROWS_AS(token_logits(hidden, 3, p, nullptr), std::out_of_range);
  }
}

TEST_CASE("weight tying: logits use the embedding table storage") {
  Rng rng(10);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  // There is no separate output matrix anywhere in the parameter set.
  for (const auto& [name, t] : p.named()) {
    if (name != "tok_emb") CHECK(t.storage_id() != p.token_embeddings.storage_id());
  }
  // Gradients reach the table from both the lookup and the logits path.
  const std::vector<int> tokens{kClsId, 7, 9, kSepId};
  Tape tape;
  HiddenStates hidden = encode(p, tokens, all_true_mask(4), &tape);
  Tensor logits = token_logits(hidden, 1, p, &tape);
  tape.backward(mean(log_softmax(logits, &tape), &tape));
  double grad_norm = 0.0;
  for (size_t i = 0; i < p.token_embeddings.size(); ++i) {
    grad_norm += std::abs(p.token_embeddings.grad()[i]);
  }
  CHECK(grad_norm > 0.0);
}

TEST_CASE("layer_mean_repr") {
  Rng rng(11);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);

  SUBCASE("single position returns that hidden vector") {
    HiddenStates hidden;
    Tensor row = Tensor::from_data({1, 2}, {3.0, -1.0});
    hidden.layers.push_back(row);
    auto mean_vec = layer_mean_repr(hidden, 0, {1});
    CHECK(mean_vec[0] == 3.0);
    CHECK(mean_vec[1] == -1.0);
  }
  SUBCASE("identical vectors average to themselves") {
    HiddenStates hidden;
    hidden.layers.push_back(Tensor::from_data({2, 2}, {1.5, 2.5, 1.5, 2.5}));
    auto mean_vec = layer_mean_repr(hidden, 0, {1, 1});
    CHECK(mean_vec[0] == doctest::Approx(1.5));
    CHECK(mean_vec[1] == doctest::Approx(2.5));
  }
  SUBCASE("padding positions are excluded") {
    HiddenStates hidden;
    hidden.layers.push_back(Tensor::from_data({3, 2}, {2.0, 4.0, 100.0, 100.0, 4.0, 8.0}));
    auto mean_vec = layer_mean_repr(hidden, 0, {1, 0, 1});
    CHECK(mean_vec[0] == doctest::Approx(3.0));
    CHECK(mean_vec[1] == doctest::Approx(6.0));
  }
  SUBCASE("all-padding mask errors") {
    HiddenStates hidden;
    hidden.layers.push_back(Tensor::zeros({2, 2}));
    CHECK_THROWS_AS(layer_mean_repr(hidden, 0, {0, 0}), std::invalid_argument);
  }
}

TEST_CASE("padding tokens do not perturb real positions") {
  Rng rng(12);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  const std::vector<int> short_seq{kClsId, 7, 9, kSepId};
  std::vector<int> padded = short_seq;
  padded.push_back(kPadId);
  padded.push_back(kPadId);
  std::vector<uint8_t> mask{1, 1, 1, 1, 0, 0};
  HiddenStates a = encode(p, short_seq, all_true_mask(4), nullptr);
  HiddenStates b = encode(p, padded, mask, nullptr);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 16; ++j) {
      CHECK(a.layers.back().at(i, j) == doctest::Approx(b.layers.back().at(i, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("sequence_repr is differentiable through the whole encoder") {
  Rng rng(13);
  EncoderParams p = EncoderParams::init(tiny_config(), rng);
  const auto tokens = sample_tokens();
  Tape tape;
  HiddenStates hidden = encode(p, tokens, all_true_mask(tokens.size()), &tape);
  Tensor repr = sequence_repr(hidden, 2, p, &tape);
  tape.backward(mean(repr, &tape));
  double layer1_grad = 0.0;
  for (size_t i = 0; i < p.layers[0].wq.size(); ++i) {
    layer1_grad += std::abs(p.layers[0].wq.grad()[i]);
  }
  CHECK(layer1_grad > 0.0);
}
