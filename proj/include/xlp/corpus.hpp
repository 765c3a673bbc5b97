#pragma once

#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xlp/rng.hpp"

namespace xlp {

// Reserved token ids, fixed by convention at the head of every vocabulary.
constexpr int kClsId = 0;
constexpr int kSepId = 1;
constexpr int kMaskId = 2;
constexpr int kPadId = 3;
constexpr int kUnkId = 4;
constexpr int kNumSpecials = 5;

class Vocab {
 public:
  // Vocabulary containing just the five reserved specials.
  static Vocab with_specials();

  int add(const std::string& token);           // error on duplicates
  int lookup(const std::string& token) const;  // [UNK] for out-of-vocabulary
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(tokens_.size()); }

  std::vector<int> encode_line(const std::string& line) const;  // whitespace tokens
  std::string decode(const std::vector<int>& ids) const;

  void save(const std::string& path) const;
  // Validates that the first five lines are the reserved specials.
  static Vocab load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct MonoCorpus {
  std::string lang;
  std::vector<std::vector<int>> sentences;
};

struct ParallelCorpus {
  std::string src_lang, tgt_lang;
  std::vector<std::pair<std::vector<int>, std::vector<int>>> pairs;
  std::string tag() const { return src_lang + "-" + tgt_lang; }
};

enum class TaskKind { Mmlm, Tlm, Xlco };

struct TrainingInstance {
  TaskKind task = TaskKind::Mmlm;
  // MMLM / TLM
  std::vector<int> input_ids;
  std::vector<int> masked_positions;
  std::vector<int> target_ids;
  // XLCO: the two sides, each starting with [CLS]
  std::vector<int> query_ids;
  std::vector<int> key_ids;
};

// Draw proportional to (n_l / n)^alpha.
std::string sample_language(const std::map<std::string, long>& counts, double alpha, Rng& rng);
std::map<std::string, double> language_probabilities(const std::map<std::string, long>& counts,
                                                     double alpha);

struct MaskResult {
  std::vector<int> ids;
  std::vector<int> positions;
  std::vector<int> targets;
};

// Independently masks each non-special position with probability mask_rate;
// selected positions become [MASK] 80% of the time, a random regular token
// 10%, unchanged 10%. Guarantees at least one masked position.
MaskResult mask_sequence(const std::vector<int>& ids, double mask_rate, Rng& rng,
                         const Vocab& vocab);

TrainingInstance make_mmlm_instance(const std::vector<int>& sentence, double mask_rate,
                                    Rng& rng, const Vocab& vocab, int max_positions);

// [CLS] src [SEP] tgt [SEP], masked across both sides. Over-long pairs are
// truncated proportionally.
TrainingInstance make_tlm_instance(const std::pair<std::vector<int>, std::vector<int>>& pair,
                                   double mask_rate, Rng& rng, const Vocab& vocab,
                                   int max_positions);

// Mixup contrast: sides built from one member of each pair so that the two
// sides are mutual translations as bags of segments. Fair coins pick the
// pairing (aligned/crossed), the segment order, and the query/key roles.
// The two pairs must come from different parallel corpora.
TrainingInstance make_xlco_instance(
    const std::pair<std::vector<int>, std::vector<int>>& pair_c, const std::string& corpus_c,
    const std::pair<std::vector<int>, std::vector<int>>& pair_d, const std::string& corpus_d,
    Rng& rng, int max_positions);

// Single-pair contrast (mixup disabled, or only one parallel corpus exists).
TrainingInstance make_xlco_instance_plain(
    const std::pair<std::vector<int>, std::vector<int>>& pair, Rng& rng, int max_positions);

// ---------------------------------------------------------------------------
// Synthetic cipher languages for verification. Language 0 is the base (and
// pivot); language k >= 1 owns a disjoint id block and a fixed random
// bijection from the base token space into it, so parallel pairs are exact
// ciphers of each other and languages share nothing but the specials.

struct SyntheticSpec {
  int base_vocab_size = 97;  // tokens per language block, >= 50
  int num_langs = 2;
  int mono_sentences = 2000;  // per language
  int train_pairs = 2000;     // per pivot-X corpus
  int eval_pairs = 200;
  int min_len = 4;
  int max_len = 8;
  uint64_t seed = 1;
  // When nonzero, 5 + num_langs * base_vocab_size must fit; the vocabulary is
  // padded with unused filler tokens up to exactly this size.
  int total_vocab_cap = 0;
};

struct SyntheticData {
  Vocab vocab;
  std::vector<MonoCorpus> mono;
  std::vector<ParallelCorpus> train_pairs;
  std::vector<ParallelCorpus> eval_pairs;
  // ciphers[k][i]: vocab id in language k of base token i (k = 0 is identity
  // into the base block).
  std::vector<std::vector<int>> ciphers;
};

SyntheticData gen_synthetic_languages(const SyntheticSpec& spec);

// ---------------------------------------------------------------------------
// File formats: mono.<lang>.txt one sentence per line; para.<src>-<tgt>.tsv
// one "src<TAB>tgt" per line; vocab.txt one token per line, line number = id.

void save_mono(const std::string& dir, const MonoCorpus& corpus, const Vocab& vocab);
void save_parallel(const std::string& dir, const ParallelCorpus& corpus, const Vocab& vocab);
MonoCorpus load_mono(const std::string& path, const Vocab& vocab);
ParallelCorpus load_parallel(const std::string& path, const Vocab& vocab);

struct Dataset {
  Vocab vocab;
  std::vector<MonoCorpus> mono;
  std::vector<ParallelCorpus> parallel;
  std::map<std::string, long> mono_counts() const;
  std::map<std::string, long> pair_counts() const;
  long total_pairs() const;
};

// Reads vocab.txt plus every mono.*.txt and para.*.tsv under dir; checks that
// every parallel corpus involves the pivot language.
Dataset load_dataset(const std::string& dir, const std::string& pivot_lang);

// Shared per-task instance draws (used by the trainer and queue prefill; one
// rng stream keeps runs reproducible).
TrainingInstance draw_mmlm_instance(const std::vector<MonoCorpus>& mono, double alpha,
                                    double mask_rate, const Vocab& vocab, int max_positions,
                                    Rng& rng);
TrainingInstance draw_tlm_instance(const std::vector<ParallelCorpus>& parallel, double alpha,
                                   double mask_rate, const Vocab& vocab, int max_positions,
                                   Rng& rng);
TrainingInstance draw_xlco_instance(const std::vector<ParallelCorpus>& parallel, double alpha,
                                    bool mixup, int max_positions, Rng& rng);

}  // namespace xlp
