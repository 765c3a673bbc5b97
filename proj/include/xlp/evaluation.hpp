#pragma once

#include <map>
#include <string>
#include <vector>

#include "xlp/corpus.hpp"
#include "xlp/encoder.hpp"

namespace xlp {

struct RetrievalResult {
  std::string direction;        // "src->tgt"
  int layer = 0;
  double top1_accuracy = 0.0;
  std::vector<int> ranks;       // 1-based rank of the aligned target per query
};

// Ranks every target by cosine similarity for each source; index i is aligned
// with index i. Ties break toward the lower candidate index.
RetrievalResult retrieve(const std::vector<std::vector<double>>& src_reprs,
                         const std::vector<std::vector<double>>& tgt_reprs);

// Mean-pooled retrieval per requested layer, both directions
// (tgt->src first, mirroring the xx->en convention).
std::vector<RetrievalResult> layer_sweep(const EncoderParams& params,
                                         const ParallelCorpus& eval_pairs,
                                         const std::vector<int>& layers);

// Pivot score minus the mean score of every other language.
double transfer_gap(const std::map<std::string, double>& scores, const std::string& pivot);

// One "direction<TAB>layer<TAB>accuracy" line per result.
void write_report(const std::string& path, const std::vector<RetrievalResult>& results);

}  // namespace xlp
