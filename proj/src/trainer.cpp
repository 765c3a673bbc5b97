#include "xlp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace xlp {

namespace {

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "on" || value == "true" || value == "1" || value == "yes") return true;
  if (value == "off" || value == "false" || value == "0" || value == "no") return false;
  throw std::invalid_argument("config: bad boolean for " + key + ": '" + value + "'");
}

std::string bool_str(bool b) { return b ? "on" : "off"; }

std::string double_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

long parse_long(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    long v = std::stol(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t pos = 0;
    double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": '" + value + "'");
  }
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  if (key == "num_layers") num_layers = static_cast<int>(parse_long(key, value));
  else if (key == "hidden_size") hidden_size = static_cast<int>(parse_long(key, value));
  else if (key == "ffn_size") ffn_size = static_cast<int>(parse_long(key, value));
  else if (key == "num_heads") num_heads = static_cast<int>(parse_long(key, value));
  else if (key == "vocab_size") vocab_size = static_cast<int>(parse_long(key, value));
  else if (key == "max_positions") max_positions = static_cast<int>(parse_long(key, value));
  else if (key == "universal_layer") universal_layer = static_cast<int>(parse_long(key, value));
  else if (key == "retrieval_layer") retrieval_layer = static_cast<int>(parse_long(key, value));
  else if (key == "projection_dim") projection_dim = static_cast<int>(parse_long(key, value));
  else if (key == "data_dir") data_dir = value;
  else if (key == "pivot_lang") pivot_lang = value;
  else if (key == "sampling_alpha") sampling_alpha = parse_double(key, value);
  else if (key == "mask_rate") mask_rate = parse_double(key, value);
  else if (key == "batch_size") batch_size = static_cast<int>(parse_long(key, value));
  else if (key == "total_steps") total_steps = parse_long(key, value);
  else if (key == "warmup_steps") warmup_steps = parse_long(key, value);
  else if (key == "peak_lr") peak_lr = parse_double(key, value);
  else if (key == "adam_beta1") adam_beta1 = parse_double(key, value);
  else if (key == "adam_beta2") adam_beta2 = parse_double(key, value);
  else if (key == "adam_eps") adam_eps = parse_double(key, value);
  else if (key == "weight_decay") weight_decay = parse_double(key, value);
  else if (key == "grad_clip") grad_clip = parse_double(key, value);
  else if (key == "mmlm") mmlm = parse_bool(key, value);
  else if (key == "tlm") tlm = parse_bool(key, value);
  else if (key == "xlco") xlco = parse_bool(key, value);
  else if (key == "mixup") mixup = parse_bool(key, value);
  else if (key == "queue_capacity") queue_capacity = static_cast<int>(parse_long(key, value));
  else if (key == "momentum_mode") momentum_mode = value;
  else if (key == "momentum") momentum = parse_double(key, value);
  else if (key == "momentum_cap") momentum_cap = parse_double(key, value);
  else if (key == "key_warmup_steps") key_warmup_steps = parse_long(key, value);
  else if (key == "xlco_temperature") xlco_temperature = parse_double(key, value);
  else if (key == "seed") seed = static_cast<uint64_t>(parse_long(key, value));
  else if (key == "log_interval") log_interval = parse_long(key, value);
  else if (key == "checkpoint_interval") checkpoint_interval = parse_long(key, value);
  else if (key == "resume") resume = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "eval_dir") eval_dir = value;
  else if (key == "eval_layers") eval_layers = value;
  else if (key == "gen_num_langs") gen_num_langs = static_cast<int>(parse_long(key, value));
  else if (key == "gen_mono_sentences") gen_mono_sentences = static_cast<int>(parse_long(key, value));
  else if (key == "gen_train_pairs") gen_train_pairs = static_cast<int>(parse_long(key, value));
  else if (key == "gen_eval_pairs") gen_eval_pairs = static_cast<int>(parse_long(key, value));
  else if (key == "gen_min_len") gen_min_len = static_cast<int>(parse_long(key, value));
  else if (key == "gen_max_len") gen_max_len = static_cast<int>(parse_long(key, value));
  else throw std::invalid_argument("config: unknown key '" + key + "'");
}

namespace {
RunConfig parse_config_stream(std::istream& is, const std::string& origin) {
  RunConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected 'key = value', got '" + line + "'");
    }
    cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}
}  // namespace

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("config: cannot read " + path);
  return parse_config_stream(is, path);
}

RunConfig RunConfig::from_text(const std::string& text) {
  std::istringstream is(text);
  return parse_config_stream(is, "<config text>");
}

void RunConfig::finalize() {
  if (universal_layer == 0) universal_layer = EncoderConfig::default_universal_layer(num_layers);
  if (retrieval_layer == 0) retrieval_layer = EncoderConfig::default_retrieval_layer(num_layers);
  encoder_config().validate();
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (total_steps < 1) throw std::invalid_argument("config: total_steps must be >= 1");
  if (warmup_steps < 0 || warmup_steps > total_steps) {
    throw std::invalid_argument("config: warmup_steps must be in [0, total_steps]");
  }
  if (mask_rate <= 0.0 || mask_rate >= 1.0) {
    throw std::invalid_argument("config: mask_rate must be in (0, 1)");
  }
  if (sampling_alpha < 0.0) throw std::invalid_argument("config: sampling_alpha must be >= 0");
  if (queue_capacity < 1) throw std::invalid_argument("config: queue_capacity must be >= 1");
  if (momentum < 0.0 || momentum > 1.0) {
    throw std::invalid_argument("config: momentum must be in [0, 1]");
  }
  if (key_warmup_steps < 0) throw std::invalid_argument("config: key_warmup_steps must be >= 0");
  if (xlco_temperature <= 0.0) throw std::invalid_argument("config: xlco_temperature must be > 0");
  if (log_interval < 1) throw std::invalid_argument("config: log_interval must be >= 1");
  parse_momentum_mode(momentum_mode);
  if (!mmlm && !tlm && !xlco) {
    throw std::invalid_argument("config: at least one task must be enabled");
  }
}

std::string RunConfig::serialize() const {
  std::ostringstream os;
  os << "num_layers = " << num_layers << "\n";
  os << "hidden_size = " << hidden_size << "\n";
  os << "ffn_size = " << ffn_size << "\n";
  os << "num_heads = " << num_heads << "\n";
  os << "vocab_size = " << vocab_size << "\n";
  os << "max_positions = " << max_positions << "\n";
  os << "universal_layer = " << universal_layer << "\n";
  os << "retrieval_layer = " << retrieval_layer << "\n";
  os << "projection_dim = " << projection_dim << "\n";
  os << "data_dir = " << data_dir << "\n";
  os << "pivot_lang = " << pivot_lang << "\n";
  os << "sampling_alpha = " << double_str(sampling_alpha) << "\n";
  os << "mask_rate = " << double_str(mask_rate) << "\n";
  os << "batch_size = " << batch_size << "\n";
  os << "total_steps = " << total_steps << "\n";
  os << "warmup_steps = " << warmup_steps << "\n";
  os << "peak_lr = " << double_str(peak_lr) << "\n";
  os << "adam_beta1 = " << double_str(adam_beta1) << "\n";
  os << "adam_beta2 = " << double_str(adam_beta2) << "\n";
  os << "adam_eps = " << double_str(adam_eps) << "\n";
  os << "weight_decay = " << double_str(weight_decay) << "\n";
  os << "grad_clip = " << double_str(grad_clip) << "\n";
  os << "mmlm = " << bool_str(mmlm) << "\n";
  os << "tlm = " << bool_str(tlm) << "\n";
  os << "xlco = " << bool_str(xlco) << "\n";
  os << "mixup = " << bool_str(mixup) << "\n";
  os << "queue_capacity = " << queue_capacity << "\n";
  os << "momentum_mode = " << momentum_mode << "\n";
  os << "momentum = " << double_str(momentum) << "\n";
  os << "momentum_cap = " << double_str(momentum_cap) << "\n";
  os << "key_warmup_steps = " << key_warmup_steps << "\n";
  os << "xlco_temperature = " << double_str(xlco_temperature) << "\n";
  os << "seed = " << seed << "\n";
  os << "log_interval = " << log_interval << "\n";
  os << "checkpoint_interval = " << checkpoint_interval << "\n";
  os << "gen_num_langs = " << gen_num_langs << "\n";
  os << "gen_mono_sentences = " << gen_mono_sentences << "\n";
  os << "gen_train_pairs = " << gen_train_pairs << "\n";
  os << "gen_eval_pairs = " << gen_eval_pairs << "\n";
  os << "gen_min_len = " << gen_min_len << "\n";
  os << "gen_max_len = " << gen_max_len << "\n";
  return os.str();
}

EncoderConfig RunConfig::encoder_config() const {
  EncoderConfig cfg;
  cfg.num_layers = num_layers;
  cfg.hidden_size = hidden_size;
  cfg.ffn_size = ffn_size;
  cfg.num_heads = num_heads;
  cfg.vocab_size = vocab_size;
  cfg.max_positions = max_positions;
  cfg.universal_layer = universal_layer == 0
                            ? EncoderConfig::default_universal_layer(num_layers)
                            : universal_layer;
  cfg.retrieval_layer = retrieval_layer == 0
                            ? EncoderConfig::default_retrieval_layer(num_layers)
                            : retrieval_layer;
  cfg.projection_dim = projection_dim;
  return cfg;
}

double lr_schedule(long t, long warmup, double peak, long total) {
  if (t < 0 || t > total) {
    throw std::invalid_argument("lr_schedule: step " + std::to_string(t) +
                                " outside [0, " + std::to_string(total) + "]");
  }
  if (t < warmup) return peak * static_cast<double>(t) / static_cast<double>(warmup);
  if (total == warmup) return peak;
  return peak * static_cast<double>(total - t) / static_cast<double>(total - warmup);
}

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, OptimizerState& state,
               double lr, double beta1, double beta2, double eps, double weight_decay,
               double clip_norm) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (size_t p = 0; p < params.size(); ++p) {
      state.m[p].assign(params[p].second.size(), 0.0);
      state.v[p].assign(params[p].second.size(), 0.0);
    }
  }
  if (state.m.size() != params.size()) {
    throw std::runtime_error("adam_step: state does not match parameter count");
  }

  double sq_norm = 0.0;
  for (const auto& [name, t] : params) {
    const double* g = t.grad();
    for (size_t i = 0; i < t.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw std::runtime_error("adam_step: non-finite gradient in " + name + " at index " +
                                 std::to_string(i) + " (step " +
                                 std::to_string(state.step + 1) + ")");
      }
      sq_norm += g[i] * g[i];
    }
  }
  const double norm = std::sqrt(sq_norm);
  const double factor = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

  state.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  for (size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    double* values = t.data();
    const double* g = t.grad();
    std::vector<double>& m = state.m[p];
    std::vector<double>& v = state.v[p];
    if (m.size() != t.size()) {
      throw std::runtime_error("adam_step: state shape mismatch for " + params[p].first);
    }
    for (size_t i = 0; i < t.size(); ++i) {
      const double gi = g[i] * factor;
      m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
      v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      values[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * values[i]);
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoint io

namespace {

constexpr char kMagic[8] = {'X', 'L', 'P', 'C', 'K', 'P', 'T', '1'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ofstream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ofstream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_string(std::ofstream& os, const std::string& s) {
  write_u64(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
void write_doubles(std::ofstream& os, const double* d, size_t n) {
  os.write(reinterpret_cast<const char*>(d), static_cast<std::streamsize>(n * sizeof(double)));
}

uint32_t read_u32(std::ifstream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
uint64_t read_u64(std::ifstream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}
std::string read_string(std::ifstream& is) {
  const uint64_t n = read_u64(is);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return s;
}
std::vector<double> read_doubles(std::ifstream& is, size_t n) {
  std::vector<double> d(n);
  is.read(reinterpret_cast<char*>(d.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return d;
}

void write_named_tensor(std::ofstream& os, const std::string& name, const Tensor& t) {
  write_string(os, name);
  write_u32(os, static_cast<uint32_t>(t.ndim()));
  for (int d : t.shape()) write_u64(os, static_cast<uint64_t>(d));
  write_doubles(os, t.data(), t.size());
}

}  // namespace

void save_checkpoint(const std::string& path, const EncoderPair& pair,
                     const OptimizerState& opt, const NegativeQueue& queue,
                     const std::string& rng_state, const std::string& config_text, long step) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  write_string(os, config_text);
  write_u64(os, static_cast<uint64_t>(step));
  write_string(os, rng_state);

  write_u32(os, static_cast<uint32_t>(queue.dim()));
  write_u64(os, static_cast<uint64_t>(queue.size()));
  for (int i = 0; i < queue.size(); ++i) {
    write_doubles(os, queue.entry(i).data(), queue.entry(i).size());
  }

  const auto query_named = pair.query.named();
  const auto key_named = pair.key.named();
  write_u64(os, query_named.size() + key_named.size());
  for (const auto& [name, t] : query_named) write_named_tensor(os, "query." + name, t);
  for (const auto& [name, t] : key_named) write_named_tensor(os, "key." + name, t);

  write_u64(os, static_cast<uint64_t>(opt.step));
  write_u64(os, opt.m.size());
  for (size_t p = 0; p < opt.m.size(); ++p) {
    write_string(os, query_named[p].first);
    write_u64(os, opt.m[p].size());
    write_doubles(os, opt.m[p].data(), opt.m[p].size());
    write_doubles(os, opt.v[p].data(), opt.v[p].size());
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[8] = {};
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: bad magic bytes in " + path);
  }
  const uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("checkpoint: unsupported format version " +
                             std::to_string(version));
  }
  CheckpointData data;
  data.config_text = read_string(is);
  data.step = static_cast<long>(read_u64(is));
  data.rng_state = read_string(is);

  data.queue_dim = static_cast<int>(read_u32(is));
  const uint64_t queue_count = read_u64(is);
  for (uint64_t i = 0; i < queue_count; ++i) {
    data.queue_entries.push_back(read_doubles(is, static_cast<size_t>(data.queue_dim)));
  }

  const uint64_t tensor_count = read_u64(is);
  for (uint64_t i = 0; i < tensor_count; ++i) {
    const std::string name = read_string(is);
    const uint32_t ndim = read_u32(is);
    std::vector<int> shape;
    size_t numel = 1;
    for (uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<int>(read_u64(is)));
      numel *= static_cast<size_t>(shape.back());
    }
    data.params.emplace(name, Tensor::from_data(shape, read_doubles(is, numel)));
  }

  data.adam_step = static_cast<long>(read_u64(is));
  const uint64_t adam_count = read_u64(is);
  for (uint64_t i = 0; i < adam_count; ++i) {
    const std::string name = read_string(is);
    const uint64_t n = read_u64(is);
    auto m = read_doubles(is, static_cast<size_t>(n));
    auto v = read_doubles(is, static_cast<size_t>(n));
    data.adam.emplace(name, std::make_pair(std::move(m), std::move(v)));
  }
  return data;
}

// ---------------------------------------------------------------------------
// trainer

Trainer::Trainer(RunConfig config, Dataset dataset, std::string out_dir)
    : config_(std::move(config)),
      dataset_(std::move(dataset)),
      out_dir_(std::move(out_dir)),
      pair_{},
      queue_(std::max(config_.queue_capacity, 1), std::max(config_.projection_dim, 1)),
      data_rng_(config_.seed + 1) {
  config_.finalize();
  if (dataset_.vocab.size() != config_.vocab_size) {
    throw std::runtime_error("trainer: dataset vocab has " + std::to_string(dataset_.vocab.size()) +
                             " entries but config expects vocab_size " +
                             std::to_string(config_.vocab_size));
  }
  if (config_.mmlm && dataset_.mono.empty()) {
    throw std::runtime_error("trainer: mmlm enabled but no monolingual corpora found");
  }
  if ((config_.tlm || config_.xlco) && dataset_.parallel.empty()) {
    throw std::runtime_error("trainer: tlm/xlco enabled but no parallel corpora found");
  }

  Rng init_rng(config_.seed);
  pair_ = EncoderPair::init(config_.encoder_config(), init_rng);

  fs::create_directories(out_dir_);
  metrics_path_ = (fs::path(out_dir_) / "metrics.log").string();

  if (!config_.resume.empty()) {
    restore_from_checkpoint();
    metrics_.open(metrics_path_, std::ios::app);
  } else {
    metrics_.open(metrics_path_, std::ios::trunc);
  }
  if (!metrics_) throw std::runtime_error("trainer: cannot open " + metrics_path_);
}

void Trainer::restore_from_checkpoint() {
  CheckpointData data = load_checkpoint(config_.resume);
  RunConfig resumed = config_;
  resumed.resume.clear();
  if (data.config_text != resumed.serialize()) {
    throw std::runtime_error("trainer: checkpoint config does not match the current config");
  }
  auto restore = [&](const std::string& prefix, const EncoderParams& params) {
    for (auto& [name, tensor] : params.named()) {
      auto it = data.params.find(prefix + name);
      if (it == data.params.end()) {
        throw std::runtime_error("trainer: checkpoint missing parameter " + prefix + name);
      }
      if (it->second.shape() != tensor.shape()) {
        throw std::runtime_error("trainer: checkpoint shape mismatch for " + prefix + name);
      }
      Tensor dst = tensor;
      std::copy(it->second.data(), it->second.data() + it->second.size(), dst.data());
    }
  };
  restore("query.", pair_.query);
  restore("key.", pair_.key);

  const auto named = pair_.query.named();
  opt_.step = data.adam_step;
  opt_.m.assign(named.size(), {});
  opt_.v.assign(named.size(), {});
  for (size_t p = 0; p < named.size(); ++p) {
    auto it = data.adam.find(named[p].first);
    if (it == data.adam.end()) {
      // Fresh optimizer state is only legal when none was saved at all.
      if (!data.adam.empty()) {
        throw std::runtime_error("trainer: checkpoint missing optimizer state for " +
                                 named[p].first);
      }
      opt_.m[p].assign(named[p].second.size(), 0.0);
      opt_.v[p].assign(named[p].second.size(), 0.0);
    } else {
      opt_.m[p] = it->second.first;
      opt_.v[p] = it->second.second;
    }
  }

  if (data.queue_dim != queue_.dim()) {
    throw std::runtime_error("trainer: checkpoint queue dim mismatch");
  }
  for (const auto& entry : data.queue_entries) queue_.append_initial(entry);
  data_rng_.load_state(data.rng_state);
  start_step_ = data.step;
  if (start_step_ > config_.total_steps) {
    throw std::runtime_error("trainer: checkpoint step " + std::to_string(start_step_) +
                             " beyond total_steps " + std::to_string(config_.total_steps));
  }
}

std::vector<TrainingInstance> Trainer::draw_batch(TaskKind task) {
  std::vector<TrainingInstance> batch;
  batch.reserve(static_cast<size_t>(config_.batch_size));
  for (int i = 0; i < config_.batch_size; ++i) {
    switch (task) {
      case TaskKind::Mmlm:
        batch.push_back(draw_mmlm_instance(dataset_.mono, config_.sampling_alpha,
                                           config_.mask_rate, dataset_.vocab,
                                           config_.max_positions, data_rng_));
        break;
      case TaskKind::Tlm:
        batch.push_back(draw_tlm_instance(dataset_.parallel, config_.sampling_alpha,
                                          config_.mask_rate, dataset_.vocab,
                                          config_.max_positions, data_rng_));
        break;
      case TaskKind::Xlco:
        batch.push_back(draw_xlco_instance(dataset_.parallel, config_.sampling_alpha,
                                           config_.mixup, config_.max_positions, data_rng_));
        break;
    }
  }
  return batch;
}

void Trainer::log_line(long step, const std::string& key, double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", value);
  metrics_ << step << '\t' << key << '\t' << buf << '\n';
}

TrainResult Trainer::run() {
  const MomentumMode mode = parse_momentum_mode(config_.momentum_mode);
  const auto query_named = pair_.query.named();
  TrainResult result;

  for (long step = start_step_ + 1; step <= config_.total_steps; ++step) {
    const bool xlco_active = config_.xlco && step > config_.key_warmup_steps;
    try {
      if (xlco_active && !queue_.prefilled()) {
        prefill(queue_, dataset_.parallel, pair_.key, config_.sampling_alpha, config_.mixup,
                data_rng_);
      }

      std::vector<TrainingInstance> mmlm_batch, tlm_batch, xlco_batch;
      if (config_.mmlm) mmlm_batch = draw_batch(TaskKind::Mmlm);
      if (config_.tlm) tlm_batch = draw_batch(TaskKind::Tlm);
      if (xlco_active) xlco_batch = draw_batch(TaskKind::Xlco);

      Tape tape;
      JointLossResult joint = joint_loss(mmlm_batch, tlm_batch, xlco_batch, pair_, &queue_,
                                         config_.xlco_temperature, &tape);
      tape.backward(joint.total);

      const double lr = lr_schedule(step, config_.warmup_steps, config_.peak_lr,
                                    config_.total_steps);
      adam_step(query_named, opt_, lr, config_.adam_beta1, config_.adam_beta2, config_.adam_eps,
                config_.weight_decay, config_.grad_clip);
      for (const auto& [name, t] : query_named) const_cast<Tensor&>(t).zero_grad();

      double m = 0.0;
      if (xlco_active) {
        queue_.push_batch(joint.xlco_keys);
      }
      if (config_.xlco) {
        m = momentum_schedule(step, mode, config_.momentum, config_.momentum_cap);
        if (hooks_.before_momentum_update) hooks_.before_momentum_update(step, pair_, m);
        momentum_update(pair_, m);
      }

      const double mi = xlco_active ? infonce_mi_estimate(joint.xlco_scores) : 0.0;
      if (step % config_.log_interval == 0 || step == 1 || step == config_.total_steps) {
        log_line(step, "lr", lr);
        if (joint.breakdown.mmlm) log_line(step, "mmlm", *joint.breakdown.mmlm);
        if (joint.breakdown.tlm) log_line(step, "tlm", *joint.breakdown.tlm);
        if (joint.breakdown.xlco) log_line(step, "xlco", *joint.breakdown.xlco);
        if (xlco_active) log_line(step, "mi_estimate", mi);
        if (config_.xlco) log_line(step, "momentum", m);
        log_line(step, "total", joint.breakdown.total);
        metrics_.flush();
      }

      if (config_.checkpoint_interval > 0 && step % config_.checkpoint_interval == 0 &&
          step != config_.total_steps) {
        const std::string path =
            (fs::path(out_dir_) / ("checkpoint_" + std::to_string(step) + ".bin")).string();
        RunConfig saved = config_;
        saved.resume.clear();
        save_checkpoint(path, pair_, opt_, queue_, data_rng_.save_state(), saved.serialize(),
                        step);
      }

      result.final_losses = joint.breakdown;
      result.steps_run = step - start_step_;

      if (hooks_.after_step) {
        StepInfo info;
        info.step = step;
        info.losses = joint.breakdown;
        info.lr = lr;
        info.momentum = m;
        info.mi_estimate = mi;
        info.xlco_active = xlco_active;
        info.pair = &pair_;
        info.queue = &queue_;
        hooks_.after_step(info);
      }
    } catch (const std::exception& e) {
      throw std::runtime_error("training aborted at step " + std::to_string(step) + ": " +
                               e.what());
    }
  }

  result.checkpoint_path = (fs::path(out_dir_) / "checkpoint_final.bin").string();
  RunConfig saved = config_;
  saved.resume.clear();
  save_checkpoint(result.checkpoint_path, pair_, opt_, queue_, data_rng_.save_state(),
                  saved.serialize(), config_.total_steps);
  result.metrics_path = metrics_path_;
  metrics_.flush();
  return result;
}

}  // namespace xlp
