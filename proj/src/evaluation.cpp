#include "xlp/evaluation.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace xlp {

namespace {

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::sqrt(na * nb);
}

void check_nonzero(const std::vector<std::vector<double>>& reprs, const char* side) {
  for (size_t i = 0; i < reprs.size(); ++i) {
    double norm = 0.0;
    for (double v : reprs[i]) norm += v * v;
    if (norm == 0.0) {
      throw std::invalid_argument("retrieve: zero vector at " + std::string(side) + " index " +
                                  std::to_string(i) + " (cosine undefined)");
    }
  }
}

// One encode per sentence; the mean of every requested layer in one pass.
std::map<int, std::vector<double>> encoded_means(const EncoderParams& params,
                                                 const std::vector<int>& sentence,
                                                 const std::vector<int>& layers) {
  std::vector<int> ids;
  ids.reserve(sentence.size() + 2);
  ids.push_back(kClsId);
  // Keep within the position table; retrieval never truncates in practice.
  const size_t limit = static_cast<size_t>(params.config.max_positions - 2);
  for (size_t i = 0; i < sentence.size() && i < limit; ++i) ids.push_back(sentence[i]);
  ids.push_back(kSepId);
  const auto mask = all_true_mask(ids.size());
  HiddenStates hidden = encode(params, ids, mask, nullptr);
  std::map<int, std::vector<double>> means;
  for (int layer : layers) means[layer] = layer_mean_repr(hidden, layer, mask);
  return means;
}

}  // namespace

RetrievalResult retrieve(const std::vector<std::vector<double>>& src_reprs,
                         const std::vector<std::vector<double>>& tgt_reprs) {
  if (src_reprs.size() != tgt_reprs.size()) {
    throw std::invalid_argument("retrieve: source and target lists differ in length");
  }
  if (src_reprs.empty()) throw std::invalid_argument("retrieve: empty representation lists");
  const size_t dim = src_reprs[0].size();
  for (const auto& v : src_reprs) {
    if (v.size() != dim) throw std::invalid_argument("retrieve: ragged source dimensions");
  }
  for (const auto& v : tgt_reprs) {
    if (v.size() != dim) throw std::invalid_argument("retrieve: ragged target dimensions");
  }
  check_nonzero(src_reprs, "source");
  check_nonzero(tgt_reprs, "target");

  RetrievalResult result;
  const int n = static_cast<int>(src_reprs.size());
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    std::vector<double> sims(static_cast<size_t>(n));
    for (int j = 0; j < n; ++j) {
      sims[static_cast<size_t>(j)] = cosine(src_reprs[static_cast<size_t>(i)],
                                            tgt_reprs[static_cast<size_t>(j)]);
    }
    const double aligned = sims[static_cast<size_t>(i)];
    // Rank of the aligned target under "ties break to the lower index".
    int rank = 1;
    for (int j = 0; j < n; ++j) {
      if (j == i) continue;
      if (sims[static_cast<size_t>(j)] > aligned || (sims[static_cast<size_t>(j)] == aligned && j < i)) {
        ++rank;
      }
    }
    result.ranks.push_back(rank);
    if (rank == 1) ++hits;
  }
  result.top1_accuracy = static_cast<double>(hits) / static_cast<double>(n);
  return result;
}

std::vector<RetrievalResult> layer_sweep(const EncoderParams& params,
                                         const ParallelCorpus& eval_pairs,
                                         const std::vector<int>& layers) {
  if (eval_pairs.pairs.empty()) throw std::invalid_argument("layer_sweep: empty eval set");
  for (int layer : layers) {
    if (layer < 0 || layer > params.config.num_layers) {
      throw std::out_of_range("layer_sweep: layer " + std::to_string(layer) + " outside [0, " +
                              std::to_string(params.config.num_layers) + "]");
    }
  }
  std::map<int, std::vector<std::vector<double>>> src_by_layer, tgt_by_layer;
  for (const auto& [src, tgt] : eval_pairs.pairs) {
    for (auto& [layer, mean] : encoded_means(params, src, layers)) {
      src_by_layer[layer].push_back(std::move(mean));
    }
    for (auto& [layer, mean] : encoded_means(params, tgt, layers)) {
      tgt_by_layer[layer].push_back(std::move(mean));
    }
  }
  std::vector<RetrievalResult> results;
  for (int layer : layers) {
    RetrievalResult to_src = retrieve(tgt_by_layer[layer], src_by_layer[layer]);
    to_src.direction = eval_pairs.tgt_lang + "->" + eval_pairs.src_lang;
    to_src.layer = layer;
    results.push_back(std::move(to_src));

    RetrievalResult to_tgt = retrieve(src_by_layer[layer], tgt_by_layer[layer]);
    to_tgt.direction = eval_pairs.src_lang + "->" + eval_pairs.tgt_lang;
    to_tgt.layer = layer;
    results.push_back(std::move(to_tgt));
  }
  return results;
}

double transfer_gap(const std::map<std::string, double>& scores, const std::string& pivot) {
  auto it = scores.find(pivot);
  if (it == scores.end()) {
    throw std::invalid_argument("transfer_gap: pivot language '" + pivot + "' has no score");
  }
  double sum = 0.0;
  int count = 0;
  for (const auto& [lang, score] : scores) {
    if (lang == pivot) continue;
    sum += score;
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("transfer_gap: need at least one non-pivot language");
  }
  return it->second - sum / static_cast<double>(count);
}

void write_report(const std::string& path, const std::vector<RetrievalResult>& results) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write report " + path);
  for (const auto& r : results) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", r.top1_accuracy);
    os << r.direction << '\t' << r.layer << '\t' << buf << '\n';
  }
}

}  // namespace xlp
