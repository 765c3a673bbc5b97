#include "xlp/objectives.hpp"

#include <cmath>
#include <stdexcept>

namespace xlp {

Tensor mmlm_loss(const HiddenStates& hidden, const std::vector<int>& positions,
                 const std::vector<int>& targets, const EncoderParams& params, Tape* tape) {
  if (positions.empty()) throw std::invalid_argument("mmlm_loss: no masked positions");
  if (positions.size() != targets.size()) {
    throw std::invalid_argument("mmlm_loss: positions and targets differ in length");
  }
  const Tensor& last = hidden.layers.back();
  Tensor rows = take_rows(last, positions, tape);
  Tensor logits = matmul_nt(rows, params.token_embeddings, tape);
  Tensor logp = log_softmax(logits, tape);
  Tensor picked = pick_per_row(logp, targets, tape);
  return scale(mean(picked, tape), -1.0, tape);
}

Tensor xlco_scores(const Tensor& query_repr, const Tensor& key_repr,
                   const NegativeQueue& queue, Tape* tape) {
  if (query_repr.rows() != 1 || key_repr.rows() != 1) {
    throw std::invalid_argument("xlco_scores: representations must be row vectors");
  }
  if (query_repr.cols() != key_repr.cols() || query_repr.cols() != queue.dim()) {
    throw std::invalid_argument("xlco_scores: dim mismatch, query " + shape_str(query_repr) +
                                ", key " + shape_str(key_repr) + ", queue dim " +
                                std::to_string(queue.dim()));
  }
  // The key representation enters as data only, so no gradient can reach the
  // key encoder even if the caller passed an attached tensor.
  Tensor key_const = Tensor::from_data({1, key_repr.cols()},
                                       std::vector<double>(key_repr.data(),
                                                           key_repr.data() + key_repr.size()));
  Tensor positive = matmul_nt(query_repr, key_const, tape);
  if (queue.size() == 0) return positive;
  Tensor negatives = matmul_nt(query_repr, queue.as_tensor(), tape);
  return concat({positive, negatives}, 1, tape);
}

Tensor xlco_loss(const Tensor& scores, Tape* tape) {
  if (!scores.defined() || scores.size() == 0) {
    throw std::invalid_argument("xlco_loss: empty score vector");
  }
  if (scores.rows() != 1) {
    throw std::invalid_argument("xlco_loss: scores must be a single row, got " +
                                shape_str(scores));
  }
  Tensor logp = log_softmax(scores, tape);
  Tensor positive = pick_per_row(logp, {0}, tape);
  return scale(positive, -1.0, tape);
}

double infonce_mi_estimate(const std::vector<std::vector<double>>& score_batch) {
  if (score_batch.empty()) throw std::invalid_argument("infonce_mi_estimate: empty batch");
  const size_t candidates = score_batch.front().size();
  if (candidates == 0) throw std::invalid_argument("infonce_mi_estimate: empty score vector");
  double acc = 0.0;
  for (const auto& scores : score_batch) {
    if (scores.size() != candidates) {
      throw std::invalid_argument("infonce_mi_estimate: ragged candidate counts (" +
                                  std::to_string(scores.size()) + " vs " +
                                  std::to_string(candidates) + ")");
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double lse = 0.0;
    for (double s : scores) lse += std::exp(s - mx);
    acc += scores[0] - (mx + std::log(lse));
  }
  return acc / static_cast<double>(score_batch.size()) +
         std::log(static_cast<double>(candidates));
}

namespace {

Tensor batch_mean(std::vector<Tensor> losses, Tape* tape) {
  Tensor sum = losses.front();
  for (size_t i = 1; i < losses.size(); ++i) sum = add(sum, losses[i], tape);
  return scale(sum, 1.0 / static_cast<double>(losses.size()), tape);
}

void check_finite(const Tensor& loss, const char* task) {
  if (!std::isfinite(loss.value())) {
    throw std::runtime_error(std::string("joint_loss: non-finite ") + task + " loss");
  }
}

}  // namespace

JointLossResult joint_loss(const std::vector<TrainingInstance>& mmlm_batch,
                           const std::vector<TrainingInstance>& tlm_batch,
                           const std::vector<TrainingInstance>& xlco_batch,
                           const EncoderPair& pair, const NegativeQueue* queue,
                           double temperature, Tape* tape) {
  if (mmlm_batch.empty() && tlm_batch.empty() && xlco_batch.empty()) {
    throw std::invalid_argument("joint_loss: all task batches are empty");
  }
  JointLossResult result;
  std::vector<Tensor> terms;

  auto masked_prediction = [&](const std::vector<TrainingInstance>& batch) {
    std::vector<Tensor> losses;
    for (const TrainingInstance& inst : batch) {
      HiddenStates hidden = encode(pair.query, inst.input_ids,
                                   all_true_mask(inst.input_ids.size()), tape);
      losses.push_back(mmlm_loss(hidden, inst.masked_positions, inst.target_ids, pair.query,
                                 tape));
    }
    return batch_mean(std::move(losses), tape);
  };

  if (!mmlm_batch.empty()) {
    Tensor loss = masked_prediction(mmlm_batch);
    check_finite(loss, "mmlm");
    result.breakdown.mmlm = loss.value();
    terms.push_back(loss);
  }
  if (!tlm_batch.empty()) {
    Tensor loss = masked_prediction(tlm_batch);
    check_finite(loss, "tlm");
    result.breakdown.tlm = loss.value();
    terms.push_back(loss);
  }
  if (!xlco_batch.empty()) {
    if (!queue) throw std::invalid_argument("joint_loss: contrast batch without a queue");
    std::vector<Tensor> losses;
    for (const TrainingInstance& inst : xlco_batch) {
      XlcoStepResult step = xlco_step(pair, *queue, inst, temperature, tape);
      losses.push_back(step.loss);
      result.xlco_keys.push_back(std::move(step.key));
      result.xlco_scores.push_back(std::move(step.scores));
    }
    Tensor loss = batch_mean(std::move(losses), tape);
    check_finite(loss, "xlco");
    result.breakdown.xlco = loss.value();
    terms.push_back(loss);
  }

  Tensor total = terms.front();
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i], tape);
  result.total = total;
  result.breakdown.total = total.value();
  return result;
}

}  // namespace xlp
