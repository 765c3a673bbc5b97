#include "xlp/gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "xlp/momentum.hpp"
#include "xlp/objectives.hpp"
#include "xlp/trainer.hpp"

namespace xlp {

JointGradCheckReport joint_gradcheck(double h, double tolerance, uint64_t seed) {
  const auto started = std::chrono::steady_clock::now();

  EncoderConfig cfg;
  cfg.num_layers = 2;
  cfg.hidden_size = 16;
  cfg.ffn_size = 32;
  cfg.num_heads = 2;
  cfg.vocab_size = 32;
  cfg.max_positions = 16;
  cfg.universal_layer = 2;
  cfg.retrieval_layer = 2;
  cfg.projection_dim = 8;

  Rng rng(seed);
  EncoderPair pair = EncoderPair::init(cfg, rng);
  // Decorrelate the key encoder from the query so the contrast loss is not
  // evaluated at the symmetric point.
  for (auto& [name, t] : pair.key.named()) {
    Tensor dst = t;
    for (size_t i = 0; i < dst.size(); ++i) dst.data()[i] += rng.uniform(-0.01, 0.01);
  }

  // Tiny two-language corpora over the toy vocabulary: language 1 is a fixed
  // permutation cipher of language 0.
  Vocab toy_vocab = Vocab::with_specials();
  for (int i = kNumSpecials; i < cfg.vocab_size; ++i) toy_vocab.add("t" + std::to_string(i));
  const int regular = cfg.vocab_size - kNumSpecials;
  std::vector<int> cipher(static_cast<size_t>(regular));
  for (int i = 0; i < regular; ++i) cipher[static_cast<size_t>(i)] = i;
  rng.shuffle(cipher);
  auto random_sentence = [&]() {
    std::vector<int> s(static_cast<size_t>(4 + rng.uniform_int(3)));
    for (int& t : s) t = kNumSpecials + rng.uniform_int(regular);
    return s;
  };
  std::vector<MonoCorpus> mono(2);
  mono[0].lang = "l0";
  mono[1].lang = "l1";
  std::vector<ParallelCorpus> parallel(2);
  parallel[0].src_lang = parallel[1].src_lang = "l0";
  parallel[0].tgt_lang = "l1";
  parallel[1].tgt_lang = "l2";
  for (int i = 0; i < 12; ++i) {
    const auto base = random_sentence();
    std::vector<int> ciphered(base.size());
    for (size_t j = 0; j < base.size(); ++j) {
      ciphered[j] = kNumSpecials + cipher[static_cast<size_t>(base[j] - kNumSpecials)];
    }
    mono[static_cast<size_t>(i % 2)].sentences.push_back(base);
    parallel[static_cast<size_t>(i % 2)].pairs.emplace_back(base, ciphered);
  }

  // Fixed instances: the checked function must be a pure function of params.
  Rng draw_rng(seed + 1);
  std::vector<TrainingInstance> mmlm_batch, tlm_batch, xlco_batch;
  for (int i = 0; i < 2; ++i) {
    mmlm_batch.push_back(draw_mmlm_instance(mono, 0.7, 0.3, toy_vocab, cfg.max_positions,
                                            draw_rng));
    tlm_batch.push_back(draw_tlm_instance(parallel, 0.7, 0.3, toy_vocab, cfg.max_positions,
                                          draw_rng));
    xlco_batch.push_back(draw_xlco_instance(parallel, 0.7, true, cfg.max_positions, draw_rng));
  }

  NegativeQueue queue(8, cfg.projection_dim);
  prefill(queue, parallel, pair.key, 0.7, true, draw_rng);

  auto loss_value = [&]() {
    Tape tape;
    JointLossResult joint = joint_loss(mmlm_batch, tlm_batch, xlco_batch, pair, &queue, 1.0,
                                       &tape);
    return joint.total.value();
  };

  // Analytic gradients from one backward pass.
  for (auto& [name, t] : pair.query.named()) const_cast<Tensor&>(t).zero_grad();
  for (auto& [name, t] : pair.key.named()) const_cast<Tensor&>(t).zero_grad();
  {
    Tape tape;
    JointLossResult joint = joint_loss(mmlm_batch, tlm_batch, xlco_batch, pair, &queue, 1.0,
                                       &tape);
    tape.backward(joint.total);
  }

  std::vector<GradCheckParam> params;
  for (const auto& [name, t] : pair.query.named()) params.push_back({name, t});

  JointGradCheckReport report;
  report.query = finite_difference_check(loss_value, params, h, tolerance);

  report.key_grads_zero = true;
  for (const auto& [name, t] : pair.key.named()) {
    for (size_t i = 0; i < t.size(); ++i) {
      if (t.grad()[i] != 0.0) report.key_grads_zero = false;
    }
  }

  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  report.pass = report.query.pass && report.key_grads_zero;
  return report;
}

std::string format_gradcheck_report(const JointGradCheckReport& report) {
  std::ostringstream os;
  char buf[160];
  for (const auto& entry : report.query.entries) {
    std::snprintf(buf, sizeof(buf), "%-16s max rel err %.3e (analytic %.3e, numeric %.3e)",
                  entry.name.c_str(), entry.max_rel_err, entry.worst_analytic,
                  entry.worst_numeric);
    os << buf << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%.3e", report.query.max_rel_err);
  os << "max relative error: " << buf << " (tolerance " << report.query.tolerance << ")\n";
  os << "key-encoder grads zero: " << (report.key_grads_zero ? "yes" : "no") << "\n";
  std::snprintf(buf, sizeof(buf), "%.1f", report.seconds);
  os << "elapsed: " << buf << " s\n";
  os << (report.pass ? "PASS" : "FAIL") << "\n";
  return os.str();
}

}  // namespace xlp
