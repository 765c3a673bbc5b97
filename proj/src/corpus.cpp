#include "xlp/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;

namespace xlp {

namespace {
const char* kSpecialTokens[kNumSpecials] = {"[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"};
constexpr int kMaskResampleRounds = 100;
}  // namespace

Vocab Vocab::with_specials() {
  Vocab v;
  for (const char* t : kSpecialTokens) v.add(t);
  return v;
}

int Vocab::add(const std::string& token) {
  if (token.empty()) throw std::invalid_argument("vocab: empty token");
  if (ids_.count(token)) throw std::invalid_argument("vocab: duplicate token '" + token + "'");
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  ids_[token] = id;
  return id;
}

int Vocab::lookup(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocab::token(int id) const {
  if (id < 0 || id >= size()) {
    throw std::out_of_range("vocab: id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(size()));
  }
  return tokens_[static_cast<size_t>(id)];
}

std::vector<int> Vocab::encode_line(const std::string& line) const {
  std::vector<int> out;
  std::istringstream is(line);
  std::string tok;
  while (is >> tok) out.push_back(lookup(tok));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("vocab: cannot write " + path);
  for (const std::string& t : tokens_) os << t << '\n';
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("vocab: cannot read " + path);
  Vocab v;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    if (lineno < kNumSpecials && line != kSpecialTokens[lineno]) {
      throw std::runtime_error("vocab: line " + std::to_string(lineno) + " of " + path +
                               " must be the reserved special " +
                               std::string(kSpecialTokens[lineno]) + ", got '" + line + "'");
    }
    v.add(line);
    ++lineno;
  }
  if (lineno < kNumSpecials) {
    throw std::runtime_error("vocab: " + path + " is missing the reserved specials");
  }
  return v;
}

std::map<std::string, double> language_probabilities(const std::map<std::string, long>& counts,
                                                     double alpha) {
  if (counts.empty()) throw std::invalid_argument("sample_language: empty count map");
  double total = 0.0;
  for (const auto& [lang, n] : counts) {
    if (n <= 0) throw std::invalid_argument("sample_language: non-positive count for " + lang);
    total += static_cast<double>(n);
  }
  std::map<std::string, double> probs;
  double norm = 0.0;
  for (const auto& [lang, n] : counts) {
    const double w = std::pow(static_cast<double>(n) / total, alpha);
    probs[lang] = w;
    norm += w;
  }
  for (auto& [lang, p] : probs) p /= norm;
  return probs;
}

std::string sample_language(const std::map<std::string, long>& counts, double alpha, Rng& rng) {
  const auto probs = language_probabilities(counts, alpha);
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [lang, p] : probs) {
    acc += p;
    if (u < acc) return lang;
  }
  return probs.rbegin()->first;
}

MaskResult mask_sequence(const std::vector<int>& ids, double mask_rate, Rng& rng,
                         const Vocab& vocab) {
  if (mask_rate <= 0.0 || mask_rate >= 1.0) {
    throw std::invalid_argument("mask_sequence: mask_rate must be in (0, 1)");
  }
  std::vector<int> maskable;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= kNumSpecials) maskable.push_back(static_cast<int>(i));
  }
  if (maskable.empty()) {
    throw std::invalid_argument("mask_sequence: sequence has no maskable positions");
  }

  std::vector<int> selected;
  for (int round = 0; round < kMaskResampleRounds && selected.empty(); ++round) {
    for (int pos : maskable) {
      if (rng.uniform() < mask_rate) selected.push_back(pos);
    }
  }
  // Forced minimum: every instance must contribute at least one loss term.
  if (selected.empty()) {
    selected.push_back(maskable[static_cast<size_t>(rng.uniform_int(
        static_cast<int>(maskable.size())))]);
  }

  const int num_regular = vocab.size() - kNumSpecials;
  if (num_regular <= 0) throw std::invalid_argument("mask_sequence: vocabulary has no regular tokens");

  MaskResult result;
  result.ids = ids;
  for (int pos : selected) {
    result.positions.push_back(pos);
    result.targets.push_back(ids[static_cast<size_t>(pos)]);
    const double u = rng.uniform();
    if (u < 0.8) {
      result.ids[static_cast<size_t>(pos)] = kMaskId;
    } else if (u < 0.9) {
      result.ids[static_cast<size_t>(pos)] = kNumSpecials + rng.uniform_int(num_regular);
    }  // else: keep the original token
  }
  return result;
}

namespace {

std::vector<int> truncate_to(const std::vector<int>& ids, int limit) {
  if (static_cast<int>(ids.size()) <= limit) return ids;
  return std::vector<int>(ids.begin(), ids.begin() + limit);
}

// Split `budget` positions between two segments proportionally to their
// lengths, each side keeping at least one token.
std::pair<int, int> proportional_budget(size_t a, size_t b, int budget) {
  if (budget < 2) {
    throw std::invalid_argument("instance construction: cannot fit two segments into " +
                                std::to_string(budget) + " positions");
  }
  const long total = static_cast<long>(a) + static_cast<long>(b);
  if (total <= budget) return {static_cast<int>(a), static_cast<int>(b)};
  int keep_a = static_cast<int>(static_cast<long>(a) * budget / total);
  keep_a = std::clamp(keep_a, 1, budget - 1);
  return {keep_a, budget - keep_a};
}

std::vector<int> concat_with_specials(const std::vector<int>& a, const std::vector<int>& b,
                                      int max_positions) {
  const auto [ka, kb] = proportional_budget(a.size(), b.size(), max_positions - 3);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(ka + kb + 3));
  out.push_back(kClsId);
  const auto ta = truncate_to(a, ka);
  out.insert(out.end(), ta.begin(), ta.end());
  out.push_back(kSepId);
  const auto tb = truncate_to(b, kb);
  out.insert(out.end(), tb.begin(), tb.end());
  out.push_back(kSepId);
  return out;
}

}  // namespace

TrainingInstance make_mmlm_instance(const std::vector<int>& sentence, double mask_rate,
                                    Rng& rng, const Vocab& vocab, int max_positions) {
  if (sentence.empty()) throw std::invalid_argument("mmlm instance: empty sentence");
  std::vector<int> ids;
  ids.reserve(sentence.size() + 2);
  ids.push_back(kClsId);
  const auto body = truncate_to(sentence, max_positions - 2);
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(kSepId);

  MaskResult masked = mask_sequence(ids, mask_rate, rng, vocab);
  TrainingInstance inst;
  inst.task = TaskKind::Mmlm;
  inst.input_ids = std::move(masked.ids);
  inst.masked_positions = std::move(masked.positions);
  inst.target_ids = std::move(masked.targets);
  return inst;
}

TrainingInstance make_tlm_instance(const std::pair<std::vector<int>, std::vector<int>>& pair,
                                   double mask_rate, Rng& rng, const Vocab& vocab,
                                   int max_positions) {
  if (pair.first.empty() || pair.second.empty()) {
    throw std::invalid_argument("tlm instance: both sides must be nonempty");
  }
  std::vector<int> ids = concat_with_specials(pair.first, pair.second, max_positions);
  MaskResult masked = mask_sequence(ids, mask_rate, rng, vocab);
  TrainingInstance inst;
  inst.task = TaskKind::Tlm;
  inst.input_ids = std::move(masked.ids);
  inst.masked_positions = std::move(masked.positions);
  inst.target_ids = std::move(masked.targets);
  return inst;
}

TrainingInstance make_xlco_instance(
    const std::pair<std::vector<int>, std::vector<int>>& pair_c, const std::string& corpus_c,
    const std::pair<std::vector<int>, std::vector<int>>& pair_d, const std::string& corpus_d,
    Rng& rng, int max_positions) {
  if (corpus_c == corpus_d) {
    throw std::invalid_argument("xlco instance: mixup partner must come from a different "
                                "parallel corpus than " + corpus_c);
  }
  if (pair_c.first.empty() || pair_c.second.empty() || pair_d.first.empty() ||
      pair_d.second.empty()) {
    throw std::invalid_argument("xlco instance: empty segment");
  }
  const bool crossed = rng.bernoulli(0.5);
  const bool d_first = rng.bernoulli(0.5);
  const bool swap_roles = rng.bernoulli(0.5);

  // Aligned: <c1 d1, c2 d2>; crossed: <c1 d2, d1 c2>. Each side holds exactly
  // one member of each pair, so the sides are translations as segment bags.
  std::vector<int> s1a = pair_c.first, s1b, s2a, s2b;
  if (!crossed) {
    s1b = pair_d.first;
    s2a = pair_c.second;
    s2b = pair_d.second;
  } else {
    s1b = pair_d.second;
    s2a = pair_d.first;
    s2b = pair_c.second;
  }
  if (d_first) {
    std::swap(s1a, s1b);
    std::swap(s2a, s2b);
  }
  std::vector<int> side1 = concat_with_specials(s1a, s1b, max_positions);
  std::vector<int> side2 = concat_with_specials(s2a, s2b, max_positions);

  TrainingInstance inst;
  inst.task = TaskKind::Xlco;
  inst.query_ids = swap_roles ? side2 : side1;
  inst.key_ids = swap_roles ? side1 : side2;
  return inst;
}

TrainingInstance make_xlco_instance_plain(
    const std::pair<std::vector<int>, std::vector<int>>& pair, Rng& rng, int max_positions) {
  if (pair.first.empty() || pair.second.empty()) {
    throw std::invalid_argument("xlco instance: both sides must be nonempty");
  }
  auto wrap = [max_positions](const std::vector<int>& seg) {
    std::vector<int> out;
    out.push_back(kClsId);
    const auto body = truncate_to(seg, max_positions - 2);
    out.insert(out.end(), body.begin(), body.end());
    out.push_back(kSepId);
    return out;
  };
  const bool swap_roles = rng.bernoulli(0.5);
  TrainingInstance inst;
  inst.task = TaskKind::Xlco;
  inst.query_ids = wrap(swap_roles ? pair.second : pair.first);
  inst.key_ids = wrap(swap_roles ? pair.first : pair.second);
  return inst;
}

// ---------------------------------------------------------------------------
// synthetic languages

namespace {

std::string lang_name(int k) { return "l" + std::to_string(k); }

// Zipf-ish unigram law over the base token space; heavy enough that the
// relabeling histogram check is informative.
std::vector<double> base_token_cdf(int base_size) {
  std::vector<double> cdf(static_cast<size_t>(base_size));
  double acc = 0.0;
  for (int i = 0; i < base_size; ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), 0.8);
    cdf[static_cast<size_t>(i)] = acc;
  }
  for (double& v : cdf) v /= acc;
  return cdf;
}

int draw_base_token(const std::vector<double>& cdf, Rng& rng) {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<int>(std::min<size_t>(static_cast<size_t>(it - cdf.begin()), cdf.size() - 1));
}

std::vector<int> draw_base_sentence(const std::vector<double>& cdf, int min_len, int max_len,
                                    Rng& rng) {
  const int len = min_len + rng.uniform_int(max_len - min_len + 1);
  std::vector<int> out(static_cast<size_t>(len));
  for (int& t : out) t = draw_base_token(cdf, rng);
  return out;
}

}  // namespace

SyntheticData gen_synthetic_languages(const SyntheticSpec& spec) {
  if (spec.base_vocab_size < 50) {
    throw std::invalid_argument("synthetic data: base_vocab_size must be >= 50");
  }
  if (spec.num_langs < 2) {
    throw std::invalid_argument("synthetic data: need at least two languages");
  }
  if (spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw std::invalid_argument("synthetic data: bad sentence length range");
  }
  const int total = kNumSpecials + spec.num_langs * spec.base_vocab_size;
  if (spec.total_vocab_cap > 0 && total > spec.total_vocab_cap) {
    throw std::invalid_argument(
        "synthetic data: " + std::to_string(spec.num_langs) +
        " languages exceed the vocab partition capacity of " +
        std::to_string(spec.total_vocab_cap) + " (need " + std::to_string(total) + ")");
  }

  Rng rng(spec.seed);
  SyntheticData data;
  data.vocab = Vocab::with_specials();
  for (int k = 0; k < spec.num_langs; ++k) {
    for (int i = 0; i < spec.base_vocab_size; ++i) {
      data.vocab.add(lang_name(k) + "_" + std::to_string(i));
    }
  }
  for (int f = data.vocab.size(); f < spec.total_vocab_cap; ++f) {
    data.vocab.add("~filler" + std::to_string(f));
  }

  // Language 0 is the base itself; other languages get a random bijection.
  for (int k = 0; k < spec.num_langs; ++k) {
    std::vector<int> perm(static_cast<size_t>(spec.base_vocab_size));
    std::iota(perm.begin(), perm.end(), 0);
    if (k > 0) rng.shuffle(perm);
    std::vector<int> cipher(static_cast<size_t>(spec.base_vocab_size));
    for (int i = 0; i < spec.base_vocab_size; ++i) {
      cipher[static_cast<size_t>(i)] = kNumSpecials + k * spec.base_vocab_size + perm[static_cast<size_t>(i)];
    }
    data.ciphers.push_back(std::move(cipher));
  }

  const auto cdf = base_token_cdf(spec.base_vocab_size);
  auto apply_cipher = [&](const std::vector<int>& base, int k) {
    std::vector<int> out(base.size());
    for (size_t i = 0; i < base.size(); ++i) out[i] = data.ciphers[static_cast<size_t>(k)][static_cast<size_t>(base[i])];
    return out;
  };

  for (int k = 1; k < spec.num_langs; ++k) {
    ParallelCorpus train, eval;
    train.src_lang = eval.src_lang = lang_name(0);
    train.tgt_lang = eval.tgt_lang = lang_name(k);
    for (int i = 0; i < spec.train_pairs + spec.eval_pairs; ++i) {
      const auto base = draw_base_sentence(cdf, spec.min_len, spec.max_len, rng);
      auto pair = std::make_pair(apply_cipher(base, 0), apply_cipher(base, k));
      if (i < spec.train_pairs) {
        train.pairs.push_back(std::move(pair));
      } else {
        eval.pairs.push_back(std::move(pair));
      }
    }
    data.train_pairs.push_back(std::move(train));
    data.eval_pairs.push_back(std::move(eval));
  }

  for (int k = 0; k < spec.num_langs; ++k) {
    MonoCorpus mono;
    mono.lang = lang_name(k);
    for (int i = 0; i < spec.mono_sentences; ++i) {
      mono.sentences.push_back(apply_cipher(draw_base_sentence(cdf, spec.min_len, spec.max_len, rng), k));
    }
    data.mono.push_back(std::move(mono));
  }
  return data;
}

// ---------------------------------------------------------------------------
// files

void save_mono(const std::string& dir, const MonoCorpus& corpus, const Vocab& vocab) {
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / ("mono." + corpus.lang + ".txt")).string();
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const auto& sent : corpus.sentences) os << vocab.decode(sent) << '\n';
}

void save_parallel(const std::string& dir, const ParallelCorpus& corpus, const Vocab& vocab) {
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / ("para." + corpus.tag() + ".tsv")).string();
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const auto& [src, tgt] : corpus.pairs) {
    os << vocab.decode(src) << '\t' << vocab.decode(tgt) << '\n';
  }
}

MonoCorpus load_mono(const std::string& path, const Vocab& vocab) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  const std::string name = fs::path(path).filename().string();
  // mono.<lang>.txt
  if (name.size() < 10 || name.substr(0, 5) != "mono." || name.substr(name.size() - 4) != ".txt") {
    throw std::runtime_error("monolingual file must be named mono.<lang>.txt, got " + name);
  }
  MonoCorpus corpus;
  corpus.lang = name.substr(5, name.size() - 9);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto ids = vocab.encode_line(line);
    if (ids.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty sentence");
    }
    corpus.sentences.push_back(std::move(ids));
  }
  return corpus;
}

ParallelCorpus load_parallel(const std::string& path, const Vocab& vocab) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path);
  const std::string name = fs::path(path).filename().string();
  // para.<src>-<tgt>.tsv
  if (name.size() < 12 || name.substr(0, 5) != "para." || name.substr(name.size() - 4) != ".tsv") {
    throw std::runtime_error("parallel file must be named para.<src>-<tgt>.tsv, got " + name);
  }
  const std::string tag = name.substr(5, name.size() - 9);
  const auto dash = tag.find('-');
  if (dash == std::string::npos) {
    throw std::runtime_error("parallel file name missing <src>-<tgt> pair: " + name);
  }
  ParallelCorpus corpus;
  corpus.src_lang = tag.substr(0, dash);
  corpus.tgt_lang = tag.substr(dash + 1);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": missing tab separator");
    }
    auto src = vocab.encode_line(line.substr(0, tab));
    auto tgt = vocab.encode_line(line.substr(tab + 1));
    if (src.empty() || tgt.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty pair side");
    }
    corpus.pairs.emplace_back(std::move(src), std::move(tgt));
  }
  return corpus;
}

std::map<std::string, long> Dataset::mono_counts() const {
  std::map<std::string, long> counts;
  for (const auto& m : mono) counts[m.lang] = static_cast<long>(m.sentences.size());
  return counts;
}

std::map<std::string, long> Dataset::pair_counts() const {
  std::map<std::string, long> counts;
  for (const auto& p : parallel) counts[p.tag()] = static_cast<long>(p.pairs.size());
  return counts;
}

long Dataset::total_pairs() const {
  long n = 0;
  for (const auto& p : parallel) n += static_cast<long>(p.pairs.size());
  return n;
}

Dataset load_dataset(const std::string& dir, const std::string& pivot_lang) {
  const fs::path root(dir);
  if (!fs::is_directory(root)) throw std::runtime_error("data directory not found: " + dir);
  const fs::path vocab_path = root / "vocab.txt";
  Dataset data;
  data.vocab = Vocab::load(vocab_path.string());

  std::vector<std::string> mono_files, para_files;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.rfind("mono.", 0) == 0) mono_files.push_back(entry.path().string());
    if (name.rfind("para.", 0) == 0) para_files.push_back(entry.path().string());
  }
  std::sort(mono_files.begin(), mono_files.end());
  std::sort(para_files.begin(), para_files.end());
  for (const auto& f : mono_files) data.mono.push_back(load_mono(f, data.vocab));
  for (const auto& f : para_files) data.parallel.push_back(load_parallel(f, data.vocab));

  for (const auto& p : data.parallel) {
    if (p.src_lang != pivot_lang && p.tgt_lang != pivot_lang) {
      throw std::runtime_error("parallel corpus " + p.tag() + " does not involve the pivot language " +
                               pivot_lang);
    }
  }
  return data;
}

// ---------------------------------------------------------------------------
// per-task instance draws

TrainingInstance draw_mmlm_instance(const std::vector<MonoCorpus>& mono, double alpha,
                                    double mask_rate, const Vocab& vocab, int max_positions,
                                    Rng& rng) {
  if (mono.empty()) throw std::runtime_error("mmlm draw: no monolingual corpora");
  std::map<std::string, long> counts;
  for (const auto& m : mono) counts[m.lang] = static_cast<long>(m.sentences.size());
  const std::string lang = sample_language(counts, alpha, rng);
  const MonoCorpus* corpus = nullptr;
  for (const auto& m : mono) {
    if (m.lang == lang) corpus = &m;
  }
  const auto& sent = corpus->sentences[static_cast<size_t>(
      rng.uniform_int(static_cast<int>(corpus->sentences.size())))];
  return make_mmlm_instance(sent, mask_rate, rng, vocab, max_positions);
}

namespace {
const ParallelCorpus& pick_parallel(const std::vector<ParallelCorpus>& parallel, double alpha,
                                    Rng& rng, const std::string& exclude_tag = "") {
  std::map<std::string, long> counts;
  for (const auto& p : parallel) {
    if (p.tag() != exclude_tag) counts[p.tag()] = static_cast<long>(p.pairs.size());
  }
  const std::string tag = sample_language(counts, alpha, rng);
  for (const auto& p : parallel) {
    if (p.tag() == tag) return p;
  }
  throw std::logic_error("pick_parallel: tag not found");
}
}  // namespace

TrainingInstance draw_tlm_instance(const std::vector<ParallelCorpus>& parallel, double alpha,
                                   double mask_rate, const Vocab& vocab, int max_positions,
                                   Rng& rng) {
  if (parallel.empty()) throw std::runtime_error("tlm draw: no parallel corpora");
  const ParallelCorpus& corpus = pick_parallel(parallel, alpha, rng);
  const auto& pair = corpus.pairs[static_cast<size_t>(
      rng.uniform_int(static_cast<int>(corpus.pairs.size())))];
  return make_tlm_instance(pair, mask_rate, rng, vocab, max_positions);
}

TrainingInstance draw_xlco_instance(const std::vector<ParallelCorpus>& parallel, double alpha,
                                    bool mixup, int max_positions, Rng& rng) {
  if (parallel.empty()) throw std::runtime_error("xlco draw: no parallel corpora");
  const ParallelCorpus& corpus = pick_parallel(parallel, alpha, rng);
  const auto& pair = corpus.pairs[static_cast<size_t>(
      rng.uniform_int(static_cast<int>(corpus.pairs.size())))];
  // Mixup needs a partner from a different corpus; with a single corpus the
  // instance falls back to the bare pair.
  if (!mixup || parallel.size() < 2) {
    return make_xlco_instance_plain(pair, rng, max_positions);
  }
  const ParallelCorpus& partner = pick_parallel(parallel, alpha, rng, corpus.tag());
  const auto& pair_d = partner.pairs[static_cast<size_t>(
      rng.uniform_int(static_cast<int>(partner.pairs.size())))];
  return make_xlco_instance(pair, corpus.tag(), pair_d, partner.tag(), rng, max_positions);
}

}  // namespace xlp
