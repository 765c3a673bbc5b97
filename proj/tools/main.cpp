// Command-line entry point: synthetic data generation, pretraining,
// retrieval evaluation, layer sweeps, MI estimation, and gradient checking.
// Everything that affects results comes from the config file and --set
// overrides; no environment variables are consulted.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "xlp/corpus.hpp"
#include "xlp/evaluation.hpp"
#include "xlp/gradcheck.hpp"
#include "xlp/momentum.hpp"
#include "xlp/objectives.hpp"
#include "xlp/trainer.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonOpts {
  std::string config_path;
  std::vector<std::string> sets;
  std::string out = "out";
  long seed = -1;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "config file (key = value lines)");
  cmd->add_option("--set", opts.sets, "override, KEY=VALUE (repeatable)");
  cmd->add_option("--out", opts.out, "output directory");
  cmd->add_option("--seed", opts.seed, "override the config seed");
}

xlp::RunConfig resolve_config(const CommonOpts& opts) {
  xlp::RunConfig cfg;
  if (!opts.config_path.empty()) cfg = xlp::RunConfig::load(opts.config_path);
  for (const std::string& kv : opts.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
    }
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (opts.seed >= 0) cfg.seed = static_cast<uint64_t>(opts.seed);
  cfg.finalize();
  return cfg;
}

// Removes this run's outputs if the command fails partway.
class OutputTracker {
 public:
  void add(const fs::path& p) { files_.push_back(p); }
  void discard_all() {
    std::error_code ec;
    for (const auto& p : files_) fs::remove(p, ec);
  }

 private:
  std::vector<fs::path> files_;
};

void write_resolved_config(const xlp::RunConfig& cfg, const std::string& out_dir,
                           OutputTracker& tracker) {
  fs::create_directories(out_dir);
  const fs::path path = fs::path(out_dir) / "config.resolved.txt";
  tracker.add(path);
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << cfg.serialize();
  std::cout << "# effective config\n" << cfg.serialize();
}

xlp::EncoderParams params_from_checkpoint(const xlp::CheckpointData& data,
                                          const std::string& prefix) {
  xlp::RunConfig cfg = xlp::RunConfig::from_text(data.config_text);
  cfg.finalize();
  xlp::Rng dummy(0);
  xlp::EncoderParams params = xlp::EncoderParams::init(cfg.encoder_config(), dummy);
  for (auto& [name, tensor] : params.named()) {
    auto it = data.params.find(prefix + name);
    if (it == data.params.end()) {
      throw std::runtime_error("checkpoint missing parameter " + prefix + name);
    }
    xlp::Tensor dst = tensor;
    std::copy(it->second.data(), it->second.data() + it->second.size(), dst.data());
  }
  return params;
}

std::vector<int> sweep_layers(const xlp::RunConfig& cfg) {
  std::vector<int> layers;
  if (cfg.eval_layers.empty()) {
    for (int l = 1; l <= cfg.num_layers; ++l) layers.push_back(l);
    return layers;
  }
  std::string token;
  std::istringstream is(cfg.eval_layers);
  while (std::getline(is, token, ',')) layers.push_back(std::stoi(token));
  return layers;
}

std::string eval_dir_of(const xlp::RunConfig& cfg) {
  return cfg.eval_dir.empty() ? cfg.data_dir : cfg.eval_dir;
}

int run_gen_data(const CommonOpts& opts) {
  OutputTracker tracker;
  try {
    xlp::RunConfig cfg = resolve_config(opts);
    write_resolved_config(cfg, opts.out, tracker);

    xlp::SyntheticSpec spec;
    if (cfg.gen_num_langs < 2) throw std::invalid_argument("gen_num_langs must be >= 2");
    spec.base_vocab_size = (cfg.vocab_size - xlp::kNumSpecials) / cfg.gen_num_langs;
    spec.num_langs = cfg.gen_num_langs;
    spec.mono_sentences = cfg.gen_mono_sentences;
    spec.train_pairs = cfg.gen_train_pairs;
    spec.eval_pairs = cfg.gen_eval_pairs;
    spec.min_len = cfg.gen_min_len;
    spec.max_len = cfg.gen_max_len;
    spec.seed = cfg.seed;
    spec.total_vocab_cap = cfg.vocab_size;
    xlp::SyntheticData data = xlp::gen_synthetic_languages(spec);

    const fs::path train_dir = fs::path(opts.out) / "train";
    const fs::path eval_dir = fs::path(opts.out) / "eval";
    fs::create_directories(train_dir);
    fs::create_directories(eval_dir);
    tracker.add(train_dir / "vocab.txt");
    tracker.add(eval_dir / "vocab.txt");
    data.vocab.save((train_dir / "vocab.txt").string());
    data.vocab.save((eval_dir / "vocab.txt").string());
    for (const auto& mono : data.mono) {
      tracker.add(train_dir / ("mono." + mono.lang + ".txt"));
      xlp::save_mono(train_dir.string(), mono, data.vocab);
    }
    for (const auto& para : data.train_pairs) {
      tracker.add(train_dir / ("para." + para.tag() + ".tsv"));
      xlp::save_parallel(train_dir.string(), para, data.vocab);
    }
    for (const auto& para : data.eval_pairs) {
      tracker.add(eval_dir / ("para." + para.tag() + ".tsv"));
      xlp::save_parallel(eval_dir.string(), para, data.vocab);
    }
    std::cout << "wrote " << data.mono.size() << " monolingual and " << data.train_pairs.size()
              << " parallel corpora under " << opts.out << "\n";
    return 0;
  } catch (const std::exception& e) {
    tracker.discard_all();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_pretrain(const CommonOpts& opts) {
  OutputTracker tracker;
  try {
    xlp::RunConfig cfg = resolve_config(opts);
    write_resolved_config(cfg, opts.out, tracker);
    tracker.add(fs::path(opts.out) / "metrics.log");
    tracker.add(fs::path(opts.out) / "checkpoint_final.bin");

    xlp::Dataset dataset = xlp::load_dataset(cfg.data_dir, cfg.pivot_lang);
    xlp::Trainer trainer(cfg, std::move(dataset), opts.out);
    xlp::TrainResult result = trainer.run();
    std::cout << "trained " << result.steps_run << " steps; final total loss "
              << result.final_losses.total << "\n";
    std::cout << "checkpoint: " << result.checkpoint_path << "\n";
    std::cout << "metrics: " << result.metrics_path << "\n";
    return 0;
  } catch (const std::exception& e) {
    tracker.discard_all();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_eval_retrieval(const CommonOpts& opts) {
  OutputTracker tracker;
  try {
    xlp::RunConfig cfg = resolve_config(opts);
    write_resolved_config(cfg, opts.out, tracker);
    if (cfg.checkpoint.empty()) throw std::invalid_argument("eval-retrieval needs checkpoint=PATH");

    xlp::CheckpointData ckpt = xlp::load_checkpoint(cfg.checkpoint);
    xlp::EncoderParams params = params_from_checkpoint(ckpt, "query.");
    xlp::Dataset dataset = xlp::load_dataset(eval_dir_of(cfg), cfg.pivot_lang);
    if (dataset.parallel.empty()) throw std::runtime_error("no parallel eval corpora found");

    const int layer = params.config.retrieval_layer;
    std::vector<xlp::RetrievalResult> results;
    std::map<std::string, double> lang_scores;
    for (const auto& corpus : dataset.parallel) {
      auto swept = xlp::layer_sweep(params, corpus, {layer});
      double mean_acc = 0.0;
      for (auto& r : swept) {
        mean_acc += r.top1_accuracy / static_cast<double>(swept.size());
        results.push_back(std::move(r));
      }
      const std::string other =
          corpus.src_lang == cfg.pivot_lang ? corpus.tgt_lang : corpus.src_lang;
      lang_scores[other] = mean_acc;
    }
    // Desk-scale stand-in for the pivot-language test score: retrieval of the
    // pivot sentences against themselves.
    {
      const auto& corpus = dataset.parallel.front();
      xlp::ParallelCorpus self;
      self.src_lang = self.tgt_lang = cfg.pivot_lang;
      for (const auto& [src, tgt] : corpus.pairs) {
        const auto& sent = corpus.src_lang == cfg.pivot_lang ? src : tgt;
        self.pairs.emplace_back(sent, sent);
      }
      auto self_results = xlp::layer_sweep(params, self, {layer});
      lang_scores[cfg.pivot_lang] = self_results.front().top1_accuracy;
    }
    const double gap = xlp::transfer_gap(lang_scores, cfg.pivot_lang);
    xlp::RetrievalResult gap_row;
    gap_row.direction = "transfer_gap";
    gap_row.layer = layer;
    gap_row.top1_accuracy = gap;
    results.push_back(gap_row);

    const fs::path report = fs::path(opts.out) / "report.tsv";
    tracker.add(report);
    xlp::write_report(report.string(), results);
    std::cout << "wrote " << report.string() << "\n";
    for (const auto& r : results) {
      std::cout << r.direction << "\tlayer " << r.layer << "\t" << r.top1_accuracy << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    tracker.discard_all();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_layer_sweep(const CommonOpts& opts) {
  OutputTracker tracker;
  try {
    xlp::RunConfig cfg = resolve_config(opts);
    write_resolved_config(cfg, opts.out, tracker);
    if (cfg.checkpoint.empty()) throw std::invalid_argument("layer-sweep needs checkpoint=PATH");

    xlp::CheckpointData ckpt = xlp::load_checkpoint(cfg.checkpoint);
    xlp::EncoderParams params = params_from_checkpoint(ckpt, "query.");
    xlp::Dataset dataset = xlp::load_dataset(eval_dir_of(cfg), cfg.pivot_lang);
    if (dataset.parallel.empty()) throw std::runtime_error("no parallel eval corpora found");

    const std::vector<int> layers = sweep_layers(cfg);
    std::vector<xlp::RetrievalResult> results;
    for (const auto& corpus : dataset.parallel) {
      for (auto& r : xlp::layer_sweep(params, corpus, layers)) results.push_back(std::move(r));
    }
    const fs::path report = fs::path(opts.out) / "layer_sweep.tsv";
    tracker.add(report);
    xlp::write_report(report.string(), results);
    std::cout << "wrote " << report.string() << "\n";
    for (const auto& r : results) {
      std::cout << r.direction << "\tlayer " << r.layer << "\t" << r.top1_accuracy << "\n";
    }
    return 0;
  } catch (const std::exception& e) {
    tracker.discard_all();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_estimate_mi(const CommonOpts& opts) {
  OutputTracker tracker;
  try {
    xlp::RunConfig cfg = resolve_config(opts);
    write_resolved_config(cfg, opts.out, tracker);
    if (cfg.checkpoint.empty()) throw std::invalid_argument("estimate-mi needs checkpoint=PATH");

    xlp::CheckpointData ckpt = xlp::load_checkpoint(cfg.checkpoint);
    if (ckpt.queue_entries.empty()) {
      throw std::runtime_error("checkpoint has no negative queue (was xlco enabled?)");
    }
    xlp::EncoderParams query = params_from_checkpoint(ckpt, "query.");
    xlp::EncoderParams key = params_from_checkpoint(ckpt, "key.");
    xlp::NegativeQueue queue(static_cast<int>(ckpt.queue_entries.size()), ckpt.queue_dim);
    for (const auto& e : ckpt.queue_entries) queue.append_initial(e);

    xlp::Dataset dataset = xlp::load_dataset(eval_dir_of(cfg), cfg.pivot_lang);
    if (dataset.parallel.empty()) throw std::runtime_error("no parallel eval corpora found");

    const int layer = query.config.universal_layer;
    std::vector<std::vector<double>> score_batch;
    for (const auto& corpus : dataset.parallel) {
      for (const auto& [src, tgt] : corpus.pairs) {
        auto wrap = [&](const std::vector<int>& sent) {
          std::vector<int> ids{xlp::kClsId};
          const size_t limit = static_cast<size_t>(query.config.max_positions - 2);
          for (size_t i = 0; i < sent.size() && i < limit; ++i) ids.push_back(sent[i]);
          ids.push_back(xlp::kSepId);
          return ids;
        };
        const auto q_ids = wrap(src), k_ids = wrap(tgt);
        auto q_hidden = xlp::encode(query, q_ids, xlp::all_true_mask(q_ids.size()), nullptr);
        auto k_hidden = xlp::encode(key, k_ids, xlp::all_true_mask(k_ids.size()), nullptr);
        xlp::Tensor q = xlp::sequence_repr(q_hidden, layer, query, nullptr);
        xlp::Tensor k = xlp::sequence_repr(k_hidden, layer, key, nullptr);
        xlp::Tensor scores = xlp::xlco_scores(q, k, queue, nullptr);
        score_batch.emplace_back(scores.data(), scores.data() + scores.size());
      }
    }
    const double estimate = xlp::infonce_mi_estimate(score_batch);
    const double bound = std::log(static_cast<double>(score_batch.front().size()));
    char line[128];
    std::snprintf(line, sizeof(line), "mi_estimate\t%.6g\nlog_candidates\t%.6g\n", estimate,
                  bound);
    const fs::path out_file = fs::path(opts.out) / "mi.txt";
    tracker.add(out_file);
    std::ofstream os(out_file);
    os << line;
    std::cout << line;
    return 0;
  } catch (const std::exception& e) {
    tracker.discard_all();
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run_grad_check(const CommonOpts& opts) {
  try {
    (void)opts;
    xlp::JointGradCheckReport report = xlp::joint_gradcheck();
    std::cout << xlp::format_gradcheck_report(report);
    return report.pass ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cross-lingual pretraining with contrastive alignment"};
  app.require_subcommand(1);

  CommonOpts gen_opts, pre_opts, eval_opts, sweep_opts, mi_opts, grad_opts;
  CLI::App* gen = app.add_subcommand("gen-data", "generate synthetic cipher-language corpora");
  add_common(gen, gen_opts);
  CLI::App* pre = app.add_subcommand("pretrain", "run joint MMLM/TLM/XLCO pretraining");
  add_common(pre, pre_opts);
  CLI::App* evalr = app.add_subcommand("eval-retrieval", "cross-lingual sentence retrieval");
  add_common(evalr, eval_opts);
  CLI::App* sweep = app.add_subcommand("layer-sweep", "retrieval accuracy per encoder layer");
  add_common(sweep, sweep_opts);
  CLI::App* mi = app.add_subcommand("estimate-mi", "InfoNCE lower-bound estimate for a checkpoint");
  add_common(mi, mi_opts);
  CLI::App* grad = app.add_subcommand("grad-check", "finite-difference check of the joint loss");
  add_common(grad, grad_opts);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) return run_gen_data(gen_opts);
  if (pre->parsed()) return run_pretrain(pre_opts);
  if (evalr->parsed()) return run_eval_retrieval(eval_opts);
  if (sweep->parsed()) return run_layer_sweep(sweep_opts);
  if (mi->parsed()) return run_estimate_mi(mi_opts);
  if (grad->parsed()) return run_grad_check(grad_opts);
  return 1;
}
