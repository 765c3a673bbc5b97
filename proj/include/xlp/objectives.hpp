#pragma once

#include <optional>
#include <vector>

#include "xlp/corpus.hpp"
#include "xlp/encoder.hpp"
#include "xlp/momentum.hpp"
#include "xlp/tensor.hpp"

namespace xlp {

// Per-task losses of one step. A disabled task is absent, not zero.
struct LossBreakdown {
  std::optional<double> mmlm;
  std::optional<double> tlm;
  std::optional<double> xlco;
  double total = 0.0;
};

// Mean over masked positions of -log softmax(tied logits)[target]. Serves
// both MMLM and TLM; the tasks differ only in how the input was built.
Tensor mmlm_loss(const HiddenStates& hidden, const std::vector<int>& positions,
                 const std::vector<int>& targets, const EncoderParams& params, Tape* tape);

// [dot(q, k+), dot(q, n_1), ..., dot(q, n_|Q|)] as a 1 x (|Q|+1) tensor.
// Gradients flow only through the query representation; the key and the
// queue entries are constants.
Tensor xlco_scores(const Tensor& query_repr, const Tensor& key_repr,
                   const NegativeQueue& queue, Tape* tape);

// -log softmax(scores)[0], the positive at index 0 by convention.
Tensor xlco_loss(const Tensor& scores, Tape* tape);

// InfoNCE lower bound in nats: mean over the batch of log softmax(scores)[0]
// plus log of the candidate count. Candidate counts must agree across the
// batch. Never exceeds log |N|.
double infonce_mi_estimate(const std::vector<std::vector<double>>& score_batch);

struct JointLossResult {
  Tensor total;  // scalar on the tape
  LossBreakdown breakdown;
  // Key-side representations of the contrast batch, for the post-step queue push.
  std::vector<std::vector<double>> xlco_keys;
  std::vector<std::vector<double>> xlco_scores;
};

// Equal-weight sum of the enabled task losses; an empty batch disables its
// task entirely. Per-task value is the batch mean of per-instance losses.
JointLossResult joint_loss(const std::vector<TrainingInstance>& mmlm_batch,
                           const std::vector<TrainingInstance>& tlm_batch,
                           const std::vector<TrainingInstance>& xlco_batch,
                           const EncoderPair& pair, const NegativeQueue* queue,
                           double temperature, Tape* tape);

}  // namespace xlp
