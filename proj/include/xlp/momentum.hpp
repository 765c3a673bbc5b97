#pragma once

#include <string>
#include <vector>

#include "xlp/corpus.hpp"
#include "xlp/encoder.hpp"
#include "xlp/tensor.hpp"

namespace xlp {

// Fixed-capacity FIFO of detached key representations. Grows only during
// prefill; once full its length never changes again.
class NegativeQueue {
 public:
  NegativeQueue(int capacity, int dim);

  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool prefilled() const { return size() == capacity_; }

  // Prefill-phase append; errors once the queue is full.
  void append_initial(const std::vector<double>& key);
  // Steady-state push: pops the oldest entry. Errors before prefill is done.
  void push(const std::vector<double>& key);
  void push_batch(const std::vector<std::vector<double>>& keys);

  // Entries oldest to newest.
  const std::vector<double>& entry(int i) const;
  // size x dim constant tensor snapshot (oldest first).
  Tensor as_tensor() const;

 private:
  void check_dim(const std::vector<double>& key) const;
  int capacity_;
  int dim_;
  std::vector<std::vector<double>> entries_;  // index 0 = oldest
  size_t head_ = 0;                           // ring index of the oldest entry
};

// Query/key encoder pair. Both start from the same parameters; the key side
// only ever moves by EMA towards the query side.
struct EncoderPair {
  EncoderParams query;
  EncoderParams key;
  static EncoderPair init(const EncoderConfig& config, Rng& rng);
};

// Single source of truth for the EMA arithmetic so tests can reproduce the
// update bit for bit.
double ema_combine(double m, double key_value, double query_value);

// key <- m * key + (1 - m) * query, elementwise over every parameter.
void momentum_update(EncoderPair& pair, double m);

enum class MomentumMode { Constant, InverseSqrt };
MomentumMode parse_momentum_mode(const std::string& s);

// Constant mode returns m_const; inverse_sqrt returns min(1 - t^-0.51, m_cap)
// and requires t >= 1.
double momentum_schedule(long t, MomentumMode mode, double m_const, double m_cap);

// Fills an empty queue with key-encoder representations of freshly drawn
// contrast instances. Errors if the corpora hold fewer pairs than capacity.
void prefill(NegativeQueue& queue, const std::vector<ParallelCorpus>& parallel,
             const EncoderParams& key_params, double alpha, bool mixup, Rng& rng);

// One contrastive forward: query side through the query encoder (on tape),
// key side through the key encoder (detached), scores against the queue.
struct XlcoStepResult {
  Tensor loss;                 // scalar, differentiable through the query encoder only
  std::vector<double> key;     // detached key representation, pushed after the optimizer step
  std::vector<double> scores;  // positive first, then queue entries oldest to newest
};

XlcoStepResult xlco_step(const EncoderPair& pair, const NegativeQueue& queue,
                         const TrainingInstance& instance, double temperature, Tape* tape);

}  // namespace xlp
