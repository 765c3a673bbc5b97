#pragma once

#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "xlp/corpus.hpp"
#include "xlp/encoder.hpp"
#include "xlp/momentum.hpp"
#include "xlp/objectives.hpp"

namespace xlp {

// Every tunable of a run in one validated record. Files are flat
// "key = value" lines with '#' comments; unknown keys are errors.
struct RunConfig {
  // model
  int num_layers = 2;
  int hidden_size = 64;
  int ffn_size = 256;
  int num_heads = 4;
  int vocab_size = 200;
  int max_positions = 64;
  int universal_layer = 0;  // 0 = auto: ceil(num_layers * 8 / 12)
  int retrieval_layer = 0;  // 0 = auto: ceil(num_layers * 7 / 12)
  int projection_dim = 64;
  // data
  std::string data_dir = "data";
  std::string pivot_lang = "l0";
  double sampling_alpha = 0.7;
  double mask_rate = 0.15;
  // optimization
  int batch_size = 8;
  long total_steps = 1000;
  long warmup_steps = 100;
  double peak_lr = 2e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-6;
  double weight_decay = 0.01;
  double grad_clip = 1.0;
  // task toggles
  bool mmlm = true;
  bool tlm = true;
  bool xlco = true;
  bool mixup = true;
  // contrast
  int queue_capacity = 1024;
  std::string momentum_mode = "inverse_sqrt";
  double momentum = 0.9999;
  double momentum_cap = 0.9995;
  long key_warmup_steps = 0;
  double xlco_temperature = 1.0;
  // bookkeeping
  uint64_t seed = 42;
  long log_interval = 10;
  long checkpoint_interval = 0;  // 0 = final checkpoint only
  std::string resume;            // checkpoint path to continue from
  // evaluation commands
  std::string checkpoint;
  std::string eval_dir;
  std::string eval_layers;  // comma-separated; empty = all transformer layers
  // synthetic data generation
  int gen_num_langs = 2;
  int gen_mono_sentences = 2000;
  int gen_train_pairs = 2000;
  int gen_eval_pairs = 200;
  int gen_min_len = 4;
  int gen_max_len = 8;

  static RunConfig load(const std::string& path);
  static RunConfig from_text(const std::string& text);
  void set(const std::string& key, const std::string& value);
  // Resolves auto layer indices and validates everything.
  void finalize();
  std::string serialize() const;
  EncoderConfig encoder_config() const;
};

// Linear ramp 0 -> peak over the warmup, then linear decay to 0 at total.
double lr_schedule(long t, long warmup, double peak, long total);

struct OptimizerState {
  std::vector<std::vector<double>> m, v;  // parallel to the named-parameter order
  long step = 0;
};

// Global-norm clipping, then Adam with bias correction and decoupled weight
// decay. Errors on non-finite gradients, naming the parameter.
void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
               double lr, double beta1, double beta2, double eps, double weight_decay,
               double clip_norm);

// ---------------------------------------------------------------------------
// checkpoints: versioned binary, byte-exact round trip

struct CheckpointData {
  std::string config_text;
  long step = 0;
  std::string rng_state;
  int queue_dim = 0;
  std::vector<std::vector<double>> queue_entries;  // oldest first
  std::map<std::string, Tensor> params;            // "query.*" and "key.*"
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> adam;
  long adam_step = 0;
};

void save_checkpoint(const std::string& path, const EncoderPair& pair,
                     const OptimizerState& opt, const NegativeQueue& queue,
                     const std::string& rng_state, const std::string& config_text, long step);
CheckpointData load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// training loop

struct StepInfo {
  long step = 0;
  LossBreakdown losses;
  double lr = 0.0;
  double momentum = 0.0;
  double mi_estimate = 0.0;
  bool xlco_active = false;
  const EncoderPair* pair = nullptr;
  const NegativeQueue* queue = nullptr;
};

struct TrainHooks {
  // Runs right before the EMA update with the coefficient about to be applied.
  std::function<void(long step, const EncoderPair&, double m)> before_momentum_update;
  std::function<void(const StepInfo&)> after_step;
};

struct TrainResult {
  LossBreakdown final_losses;
  long steps_run = 0;
  std::string checkpoint_path;
  std::string metrics_path;
};

class Trainer {
 public:
  Trainer(RunConfig config, Dataset dataset, std::string out_dir);
  void set_hooks(TrainHooks hooks) { hooks_ = std::move(hooks); }
  TrainResult run();

  const EncoderPair& pair() const { return pair_; }
  const NegativeQueue& queue() const { return queue_; }
  const RunConfig& config() const { return config_; }

 private:
  void restore_from_checkpoint();
  std::vector<TrainingInstance> draw_batch(TaskKind task);
  void log_line(long step, const std::string& key, double value);

  RunConfig config_;
  Dataset dataset_;
  std::string out_dir_;
  TrainHooks hooks_;
  EncoderPair pair_;
  NegativeQueue queue_;
  OptimizerState opt_;
  Rng data_rng_;
  long start_step_ = 0;
  std::string metrics_path_;
  std::ofstream metrics_;
};

}  // namespace xlp
