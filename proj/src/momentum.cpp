#include "xlp/momentum.hpp"

#include <cmath>
#include <stdexcept>

#include "xlp/objectives.hpp"

namespace xlp {

NegativeQueue::NegativeQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
  if (capacity < 1) throw std::invalid_argument("negative queue: capacity must be >= 1");
  if (dim < 1) throw std::invalid_argument("negative queue: dim must be >= 1");
  entries_.reserve(static_cast<size_t>(capacity));
}

void NegativeQueue::check_dim(const std::vector<double>& key) const {
  if (static_cast<int>(key.size()) != dim_) {
    throw std::invalid_argument("negative queue: key of dim " + std::to_string(key.size()) +
                                " does not match queue dim " + std::to_string(dim_));
  }
}

void NegativeQueue::append_initial(const std::vector<double>& key) {
  check_dim(key);
  if (prefilled()) throw std::runtime_error("negative queue: already prefilled");
  entries_.push_back(key);
}

void NegativeQueue::push(const std::vector<double>& key) {
  check_dim(key);
  if (!prefilled()) {
    throw std::runtime_error("negative queue: push before prefill completed (size " +
                             std::to_string(size()) + " of " + std::to_string(capacity_) + ")");
  }
  entries_[head_] = key;
  head_ = (head_ + 1) % static_cast<size_t>(capacity_);
}

void NegativeQueue::push_batch(const std::vector<std::vector<double>>& keys) {
  for (const auto& k : keys) push(k);
}

const std::vector<double>& NegativeQueue::entry(int i) const {
  if (i < 0 || i >= size()) throw std::out_of_range("negative queue: bad entry index");
  return entries_[(head_ + static_cast<size_t>(i)) % entries_.size()];
}

Tensor NegativeQueue::as_tensor() const {
  Tensor t = Tensor::zeros({size(), dim_}, false);
  for (int i = 0; i < size(); ++i) {
    const auto& e = entry(i);
    std::copy(e.begin(), e.end(), t.data() + static_cast<size_t>(i) * dim_);
  }
  return t;
}

EncoderPair EncoderPair::init(const EncoderConfig& config, Rng& rng) {
  EncoderPair pair;
  pair.query = EncoderParams::init(config, rng);
  pair.key = pair.query.clone();
  return pair;
}

double ema_combine(double m, double key_value, double query_value) {
  return m * key_value + (1.0 - m) * query_value;
}

void momentum_update(EncoderPair& pair, double m) {
  if (m < 0.0 || m > 1.0) throw std::invalid_argument("momentum_update: m must be in [0, 1]");
  const auto key_named = pair.key.named();
  const auto query_named = pair.query.named();
  if (key_named.size() != query_named.size()) {
    throw std::runtime_error("momentum_update: parameter sets differ in structure");
  }
  for (size_t p = 0; p < key_named.size(); ++p) {
    Tensor key = key_named[p].second;
    const Tensor& query = query_named[p].second;
    if (key.shape() != query.shape()) {
      throw std::runtime_error("momentum_update: shape mismatch for " + key_named[p].first +
                               ": " + shape_str(key) + " vs " + shape_str(query));
    }
    double* kd = key.data();
    const double* qd = query.data();
    for (size_t i = 0; i < key.size(); ++i) kd[i] = ema_combine(m, kd[i], qd[i]);
  }
}

MomentumMode parse_momentum_mode(const std::string& s) {
  if (s == "constant") return MomentumMode::Constant;
  if (s == "inverse_sqrt") return MomentumMode::InverseSqrt;
  throw std::invalid_argument("unknown momentum mode '" + s + "' (constant|inverse_sqrt)");
}

double momentum_schedule(long t, MomentumMode mode, double m_const, double m_cap) {
  if (mode == MomentumMode::Constant) return m_const;
  if (t < 1) {
    throw std::invalid_argument("momentum_schedule: inverse_sqrt needs t >= 1, got " +
                                std::to_string(t));
  }
  return std::min(1.0 - std::pow(static_cast<double>(t), -0.51), m_cap);
}

void prefill(NegativeQueue& queue, const std::vector<ParallelCorpus>& parallel,
             const EncoderParams& key_params, double alpha, bool mixup, Rng& rng) {
  if (queue.size() != 0) throw std::runtime_error("prefill: queue is not empty");
  long total = 0;
  for (const auto& p : parallel) total += static_cast<long>(p.pairs.size());
  if (total < queue.capacity()) {
    throw std::runtime_error("prefill: corpora hold " + std::to_string(total) +
                             " pairs, fewer than queue capacity " +
                             std::to_string(queue.capacity()));
  }
  const int max_positions = key_params.config.max_positions;
  while (!queue.prefilled()) {
    const TrainingInstance inst = draw_xlco_instance(parallel, alpha, mixup, max_positions, rng);
    HiddenStates hidden = encode(key_params, inst.key_ids, all_true_mask(inst.key_ids.size()),
                                 nullptr);
    Tensor repr = sequence_repr(hidden, key_params.config.universal_layer, key_params, nullptr);
    queue.append_initial(std::vector<double>(repr.data(), repr.data() + repr.size()));
  }
}

XlcoStepResult xlco_step(const EncoderPair& pair, const NegativeQueue& queue,
                         const TrainingInstance& instance, double temperature, Tape* tape) {
  if (instance.task != TaskKind::Xlco) {
    throw std::invalid_argument("xlco_step: instance is not a contrast instance");
  }
  if (!queue.prefilled()) {
    throw std::runtime_error("xlco_step: queue not prefilled (size " +
                             std::to_string(queue.size()) + " of " +
                             std::to_string(queue.capacity()) + ")");
  }
  const int layer = pair.query.config.universal_layer;

  HiddenStates q_hidden = encode(pair.query, instance.query_ids,
                                 all_true_mask(instance.query_ids.size()), tape);
  Tensor q = sequence_repr(q_hidden, layer, pair.query, tape);

  HiddenStates k_hidden = encode(pair.key, instance.key_ids,
                                 all_true_mask(instance.key_ids.size()), nullptr);
  Tensor k = sequence_repr(k_hidden, layer, pair.key, nullptr);

  Tensor scores = xlco_scores(q, k, queue, tape);
  if (temperature != 1.0) scores = scale(scores, 1.0 / temperature, tape);

  XlcoStepResult result;
  result.loss = xlco_loss(scores, tape);
  result.key.assign(k.data(), k.data() + k.size());
  result.scores.assign(scores.data(), scores.data() + scores.size());
  return result;
}

}  // namespace xlp
