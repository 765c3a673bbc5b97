#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "xlp/corpus.hpp"

using namespace xlp;
namespace fs = std::filesystem;

namespace {

Vocab test_vocab(int regular = 20) {
  Vocab v = Vocab::with_specials();
  for (int i = 0; i < regular; ++i) v.add("w" + std::to_string(i));
  return v;
}

std::vector<int> seq(std::initializer_list<int> ids) { return std::vector<int>(ids); }

}  // namespace

TEST_CASE("language sampling law") {
  SUBCASE("symmetric counts give symmetric probabilities") {
    auto probs = language_probabilities({{"a", 5}, {"b", 5}}, 0.7);
    CHECK(probs["a"] == doctest::Approx(0.5));
    CHECK(probs["b"] == doctest::Approx(0.5));
  }
  SUBCASE("alpha 1 is exactly proportional") {
    auto probs = language_probabilities({{"a", 9}, {"b", 1}}, 1.0);
    CHECK(probs["a"] == doctest::Approx(0.9));
    Rng rng(11);
    int hits = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
      if (sample_language({{"a", 9}, {"b", 1}}, 1.0, rng) == "a") ++hits;
    }
    CHECK(std::abs(hits / static_cast<double>(draws) - 0.9) < 0.01);
  }
  SUBCASE("9:1 at alpha 0.7 matches the closed form") {
    // p_a = 0.9^0.7 / (0.9^0.7 + 0.1^0.7) = 0.823187...
    const double expected = std::pow(0.9, 0.7) / (std::pow(0.9, 0.7) + std::pow(0.1, 0.7));
    CHECK(expected == doctest::Approx(0.8232).epsilon(1e-4));
    auto probs = language_probabilities({{"a", 9}, {"b", 1}}, 0.7);
    CHECK(probs["a"] == doctest::Approx(expected).epsilon(1e-12));
    Rng rng(12);
    int hits = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
      if (sample_language({{"a", 9}, {"b", 1}}, 0.7, rng) == "a") ++hits;
    }
    CHECK(std::abs(hits / static_cast<double>(draws) - expected) < 0.01);
  }
  SUBCASE("empirical distribution converges: KL below 1e-3 at 1e6 draws") {
    const std::map<std::string, long> counts{
        {"de", 310}, {"en", 5000}, {"sw", 17}, {"ur", 88}, {"vi", 940}};
    const auto probs = language_probabilities(counts, 0.7);
    std::map<std::string, long> hits;
    Rng rng(13);
    const int draws = 1000000;
    for (int i = 0; i < draws; ++i) hits[sample_language(counts, 0.7, rng)]++;
    double kl = 0.0;
    for (const auto& [lang, n] : hits) {
      const double p = n / static_cast<double>(draws);
      kl += p * std::log(p / probs.at(lang));
    }
    CHECK(kl >= 0.0);
    CHECK(kl < 1e-3);
  }
  SUBCASE("errors") {
    Rng rng(1);
    CHECK_THROWS_AS(sample_language({}, 0.7, rng), std::invalid_argument);
    CHECK_THROWS_AS(sample_language({{"a", 0}}, 0.7, rng), std::invalid_argument);
  }
}

TEST_CASE("mask_sequence") {
  const Vocab vocab = test_vocab();
  const std::vector<int> ids{kClsId, 7, 8, 9, 10, kSepId};

  SUBCASE("seeded masking is deterministic") {
    Rng a(21), b(21);
    const auto ra = mask_sequence(ids, 0.3, a, vocab);
    const auto rb = mask_sequence(ids, 0.3, b, vocab);
    CHECK(ra.ids == rb.ids);
    CHECK(ra.positions == rb.positions);
    CHECK(ra.targets == rb.targets);
  }
  SUBCASE("vanishing rate still masks exactly one position") {
    Rng rng(22);
    const auto result = mask_sequence(ids, 1e-12, rng, vocab);
    CHECK(result.positions.size() == 1);
  }
  SUBCASE("positions point at maskable slots and targets are the originals") {
    Rng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
      const auto result = mask_sequence(ids, 0.4, rng, vocab);
      CHECK(!result.positions.empty());
      for (size_t i = 0; i < result.positions.size(); ++i) {
        const int pos = result.positions[i];
        CHECK(ids[static_cast<size_t>(pos)] >= kNumSpecials);
        CHECK(result.targets[i] == ids[static_cast<size_t>(pos)]);
      }
      // Non-selected positions are untouched.
      std::set<int> selected(result.positions.begin(), result.positions.end());
      for (size_t p = 0; p < ids.size(); ++p) {
        if (!selected.count(static_cast<int>(p))) CHECK(result.ids[p] == ids[p]);
      }
    }
  }
  SUBCASE("mean masked count matches the binomial mean") {
    std::vector<int> twenty{kClsId};
    for (int i = 0; i < 20; ++i) twenty.push_back(kNumSpecials + i % 15);
    twenty.push_back(kSepId);
    Rng rng(24);
    long total = 0;
    const int trials = 10000;
    for (int t = 0; t < trials; ++t) {
      total += static_cast<long>(mask_sequence(twenty, 0.15, rng, vocab).positions.size());
    }
    const double mean_count = total / static_cast<double>(trials);
    CHECK(mean_count > 2.7);
    CHECK(mean_count < 3.3);
  }
  SUBCASE("80/10/10 replacement frequencies") {
    std::vector<int> long_seq{kClsId};
    for (int i = 0; i < 30; ++i) long_seq.push_back(kNumSpecials + i % 18);
    Rng rng(25);
    long masked = 0, kept = 0, changed = 0, selected = 0;
    for (int t = 0; t < 4000; ++t) {
      const auto result = mask_sequence(long_seq, 0.2, rng, vocab);
      for (size_t i = 0; i < result.positions.size(); ++i) {
        ++selected;
        const int now = result.ids[static_cast<size_t>(result.positions[i])];
        if (now == kMaskId) ++masked;
        else if (now == result.targets[i]) ++kept;
        else ++changed;
      }
    }
    CHECK(std::abs(masked / static_cast<double>(selected) - 0.8) < 0.02);
    // The random branch redraws the same token 1/R of the time, which lands
    // in "kept"; both corrections are far below the tolerance.
    CHECK(std::abs(kept / static_cast<double>(selected) - 0.1) < 0.02);
    CHECK(std::abs(changed / static_cast<double>(selected) - 0.1) < 0.02);
  }
  SUBCASE("no maskable positions errors") {
    Rng rng(26);
    CHECK_THROWS_AS(mask_sequence({kClsId, kSepId}, 0.15, rng, vocab), std::invalid_argument);
  }
}

TEST_CASE("mmlm and tlm instances") {
  const Vocab vocab = test_vocab();

  SUBCASE("tlm layout before masking") {
    // Masking must keep layout; check the unmasked skeleton via targets.
    Rng rng(31);
    const auto inst = make_tlm_instance({seq({7}), seq({8})}, 0.15, rng, vocab, 16);
    CHECK(inst.task == TaskKind::Tlm);
    CHECK(inst.input_ids.size() == 5);
    std::vector<int> restored = inst.input_ids;
    for (size_t i = 0; i < inst.masked_positions.size(); ++i) {
      restored[static_cast<size_t>(inst.masked_positions[i])] = inst.target_ids[i];
    }
    CHECK(restored == seq({kClsId, 7, kSepId, 8, kSepId}));
  }
  SUBCASE("target-side masked positions carry target-sentence ids") {
    Rng rng(32);
    for (int trial = 0; trial < 50; ++trial) {
      const std::vector<int> src{5, 6, 7}, tgt{15, 16, 17};
      const auto inst = make_tlm_instance({src, tgt}, 0.4, rng, vocab, 16);
      // layout: [CLS] 5 6 7 [SEP] 15 16 17 [SEP]
      for (size_t i = 0; i < inst.masked_positions.size(); ++i) {
        const int pos = inst.masked_positions[i];
        if (pos >= 5 && pos <= 7) CHECK(inst.target_ids[i] == tgt[static_cast<size_t>(pos - 5)]);
        if (pos >= 1 && pos <= 3) CHECK(inst.target_ids[i] == src[static_cast<size_t>(pos - 1)]);
      }
    }
  }
  SUBCASE("seeded 6+6 construction matches a replay of the documented recipe") {
    const std::vector<int> src{5, 6, 7, 8, 9, 10}, tgt{11, 12, 13, 14, 15, 16};
    Rng impl_rng(33);
    const auto inst = make_tlm_instance({src, tgt}, 0.25, impl_rng, vocab, 32);

    // Oracle: layout, then the documented masking consumption order.
    std::vector<int> expect{kClsId};
    expect.insert(expect.end(), src.begin(), src.end());
    expect.push_back(kSepId);
    expect.insert(expect.end(), tgt.begin(), tgt.end());
    expect.push_back(kSepId);
    Rng replay(33);
    std::vector<int> positions;
    while (positions.empty()) {
      for (size_t i = 0; i < expect.size(); ++i) {
        if (expect[i] >= kNumSpecials && replay.uniform() < 0.25) {
          positions.push_back(static_cast<int>(i));
        }
      }
    }
    std::vector<int> masked = expect, targets;
    for (int pos : positions) {
      targets.push_back(expect[static_cast<size_t>(pos)]);
      const double u = replay.uniform();
      if (u < 0.8) masked[static_cast<size_t>(pos)] = kMaskId;
      else if (u < 0.9) masked[static_cast<size_t>(pos)] = kNumSpecials + replay.uniform_int(20);
    }
    CHECK(inst.input_ids == masked);
    CHECK(inst.masked_positions == positions);
    CHECK(inst.target_ids == targets);
  }
  SUBCASE("over-long pairs truncate proportionally") {
    Rng rng(34);
    std::vector<int> src(20, 7), tgt(10, 8);
    const auto inst = make_tlm_instance({src, tgt}, 0.15, rng, vocab, 18);
    CHECK(inst.input_ids.size() == 18);
    // budget 15 split 2:1 -> 10 and 5
    CHECK(std::count(inst.input_ids.begin(), inst.input_ids.end(), kSepId) >= 2);
    CHECK_THROWS_AS(make_tlm_instance({src, tgt}, 0.15, rng, vocab, 4), std::invalid_argument);
  }
  SUBCASE("mmlm instances round-trip") {
    Rng rng(35);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<int> sentence;
      for (int i = 0, n = 3 + rng.uniform_int(8); i < n; ++i) {
        sentence.push_back(kNumSpecials + rng.uniform_int(20));
      }
      const auto inst = make_mmlm_instance(sentence, 0.15, rng, vocab, 32);
      std::vector<int> restored = inst.input_ids;
      for (size_t i = 0; i < inst.masked_positions.size(); ++i) {
        restored[static_cast<size_t>(inst.masked_positions[i])] = inst.target_ids[i];
      }
      std::vector<int> expect{kClsId};
      expect.insert(expect.end(), sentence.begin(), sentence.end());
      expect.push_back(kSepId);
      CHECK(restored == expect);
    }
  }
}

TEST_CASE("mixup contrast instances") {
  const std::pair<std::vector<int>, std::vector<int>> pair_c{seq({5}), seq({6})};
  const std::pair<std::vector<int>, std::vector<int>> pair_d{seq({7}), seq({8})};

  auto side = [](std::initializer_list<int> a, std::initializer_list<int> b) {
    std::vector<int> out{kClsId};
    out.insert(out.end(), a);
    out.push_back(kSepId);
    out.insert(out.end(), b);
    out.push_back(kSepId);
    return out;
  };
  // Aligned <c1 d1, c2 d2> and crossed <c1 d2, d1 c2>, each with segment-order
  // and query/key role flips.
  using Sides = std::pair<std::vector<int>, std::vector<int>>;
  std::set<Sides> legal;
  const Sides aligned{side({5}, {7}), side({6}, {8})};
  const Sides aligned_flip{side({7}, {5}), side({8}, {6})};
  const Sides crossed{side({5}, {8}), side({7}, {6})};
  const Sides crossed_flip{side({8}, {5}), side({6}, {7})};
  for (const Sides& s : {aligned, aligned_flip, crossed, crossed_flip}) {
    legal.insert(s);
    legal.insert({s.second, s.first});
  }

  SUBCASE("only legal arrangements occur; the pairing coin is fair") {
    Rng rng(41);
    std::map<bool, int> pairing_counts;  // true = crossed
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      const auto inst = make_xlco_instance(pair_c, "l0-l1", pair_d, "l0-l2", rng, 16);
      const Sides got{inst.query_ids, inst.key_ids};
      REQUIRE(legal.count(got) == 1);
      const bool is_crossed = got == crossed || got == crossed_flip ||
                              got == Sides{crossed.second, crossed.first} ||
                              got == Sides{crossed_flip.second, crossed_flip.first};
      pairing_counts[is_crossed]++;
    }
    CHECK(std::abs(pairing_counts[true] / static_cast<double>(draws) - 0.5) < 0.02);
    CHECK(std::abs(pairing_counts[false] / static_cast<double>(draws) - 0.5) < 0.02);
  }
  SUBCASE("both sides start with CLS and are translations as segment bags") {
    Rng rng(42);
    const auto inst = make_xlco_instance(pair_c, "l0-l1", pair_d, "l0-l2", rng, 16);
    CHECK(inst.query_ids.front() == kClsId);
    CHECK(inst.key_ids.front() == kClsId);
    // Exactly one member of each pair per side.
    auto members = [](const std::vector<int>& ids) {
      std::set<int> got;
      for (int id : ids) {
        if (id >= kNumSpecials) got.insert(id);
      }
      return got;
    };
    const auto q = members(inst.query_ids), k = members(inst.key_ids);
    CHECK(q.size() == 2);
    CHECK(k.size() == 2);
    CHECK((q.count(5) + q.count(6)) == 1);
    CHECK((q.count(7) + q.count(8)) == 1);
    CHECK((k.count(5) + k.count(6)) == 1);
    CHECK((k.count(7) + k.count(8)) == 1);
  }
  SUBCASE("degenerate single-token pairs build the documented 5-token sides") {
    Rng rng(43);
    const auto inst = make_xlco_instance(pair_c, "l0-l1", pair_d, "l0-l2", rng, 16);
    CHECK(inst.query_ids.size() == 5);  // CLS seg SEP seg SEP
    CHECK(inst.key_ids.size() == 5);
  }
  SUBCASE("same corpus partner errors") {
    Rng rng(44);
    CHECK_THROWS_AS(make_xlco_instance(pair_c, "l0-l1", pair_d, "l0-l1", rng, 16),
                    std::invalid_argument);
  }
  SUBCASE("plain contrast instance assigns roles by coin flip") {
    Rng rng(45);
    int swapped = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
      const auto inst = make_xlco_instance_plain({seq({5, 6}), seq({7, 8})}, rng, 16);
      CHECK(inst.query_ids.front() == kClsId);
      if (inst.query_ids[1] == 7) ++swapped;
    }
    CHECK(std::abs(swapped / static_cast<double>(draws) - 0.5) < 0.02);
  }
}

TEST_CASE("synthetic cipher languages") {
  SyntheticSpec spec;
  spec.base_vocab_size = 60;
  spec.num_langs = 3;
  spec.mono_sentences = 1500;
  spec.train_pairs = 120;
  spec.eval_pairs = 20;
  spec.seed = 9;
  const SyntheticData data = gen_synthetic_languages(spec);

  SUBCASE("structure") {
    CHECK(data.vocab.size() == kNumSpecials + 3 * 60);
    CHECK(data.mono.size() == 3);
    CHECK(data.train_pairs.size() == 2);  // l0-l1 and l0-l2
    CHECK(data.eval_pairs.size() == 2);
    CHECK(data.train_pairs[0].pairs.size() == 120);
    CHECK(data.eval_pairs[0].pairs.size() == 20);
  }
  SUBCASE("ciphers are bijections and pairs are exact ciphers") {
    for (int k = 0; k < 3; ++k) {
      std::set<int> image(data.ciphers[static_cast<size_t>(k)].begin(),
                          data.ciphers[static_cast<size_t>(k)].end());
      CHECK(image.size() == 60);
    }
    for (size_t c = 0; c < data.train_pairs.size(); ++c) {
      const auto& cipher = data.ciphers[c + 1];
      for (const auto& [src, tgt] : data.train_pairs[c].pairs) {
        REQUIRE(src.size() == tgt.size());
        for (size_t i = 0; i < src.size(); ++i) {
          const int base = src[i] - kNumSpecials;  // language 0 is the identity cipher
          CHECK(tgt[i] == cipher[static_cast<size_t>(base)]);
        }
      }
    }
  }
  SUBCASE("unigram distribution is preserved up to relabeling") {
    auto histogram = [&](const MonoCorpus& corpus, const std::vector<int>& cipher) {
      std::map<int, double> inverse;  // vocab id -> base id
      for (size_t i = 0; i < cipher.size(); ++i) inverse[cipher[i]] = static_cast<double>(i);
      std::vector<double> hist(60, 0.0);
      double total = 0.0;
      for (const auto& sent : corpus.sentences) {
        for (int id : sent) {
          hist[static_cast<size_t>(inverse.at(id))] += 1.0;
          total += 1.0;
        }
      }
      for (double& h : hist) h /= total;
      return hist;
    };
    const auto base_hist = histogram(data.mono[0], data.ciphers[0]);
    const auto relabeled = histogram(data.mono[1], data.ciphers[1]);
    double l1 = 0.0;
    for (size_t i = 0; i < base_hist.size(); ++i) l1 += std::abs(base_hist[i] - relabeled[i]);
    CHECK(l1 < 0.25);
  }
  SUBCASE("determinism per seed") {
    const SyntheticData again = gen_synthetic_languages(spec);
    CHECK(again.train_pairs[0].pairs == data.train_pairs[0].pairs);
    CHECK(again.mono[2].sentences == data.mono[2].sentences);
  }
  SUBCASE("partition capacity errors") {
    SyntheticSpec bad = spec;
    bad.total_vocab_cap = 100;  // needs 185
    CHECK_THROWS_AS(gen_synthetic_languages(bad), std::invalid_argument);
    bad = spec;
    bad.base_vocab_size = 30;
    CHECK_THROWS_AS(gen_synthetic_languages(bad), std::invalid_argument);
  }
}

TEST_CASE("vocab and corpus files") {
  const fs::path dir = fs::temp_directory_path() / "xlp_corpus_test";
  fs::remove_all(dir);
  fs::create_directories(dir);

  SUBCASE("vocab round trip and validation") {
    Vocab v = test_vocab(8);
    v.save((dir / "vocab.txt").string());
    const Vocab loaded = Vocab::load((dir / "vocab.txt").string());
    CHECK(loaded.size() == v.size());
    CHECK(loaded.lookup("w3") == v.lookup("w3"));
    CHECK(loaded.lookup("missing") == kUnkId);

    std::ofstream bad((dir / "bad.txt").string());
    bad << "[CLS]\n[SEP]\nnot_mask\n[PAD]\n[UNK]\n";
    bad.close();
    CHECK_THROWS_AS(Vocab::load((dir / "bad.txt").string()), std::runtime_error);
  }
  SUBCASE("mono and parallel round trip") {
    Vocab v = test_vocab(8);
    MonoCorpus mono{"xx", {seq({5, 6, 7}), seq({8})}};
    save_mono(dir.string(), mono, v);
    const MonoCorpus loaded = load_mono((dir / "mono.xx.txt").string(), v);
    CHECK(loaded.lang == "xx");
    CHECK(loaded.sentences == mono.sentences);

    ParallelCorpus para{"xx", "yy", {{seq({5, 6}), seq({7, 8})}}};
    save_parallel(dir.string(), para, v);
    const ParallelCorpus ploaded = load_parallel((dir / "para.xx-yy.tsv").string(), v);
    CHECK(ploaded.src_lang == "xx");
    CHECK(ploaded.tgt_lang == "yy");
    CHECK(ploaded.pairs == para.pairs);
  }
  SUBCASE("load_dataset enforces the pivot") {
    SyntheticSpec spec;
    spec.base_vocab_size = 50;
    spec.num_langs = 2;
    spec.mono_sentences = 5;
    spec.train_pairs = 5;
    spec.eval_pairs = 0;
    const SyntheticData data = gen_synthetic_languages(spec);
    const fs::path ddir = dir / "ds";
    fs::create_directories(ddir);
    data.vocab.save((ddir / "vocab.txt").string());
    for (const auto& m : data.mono) save_mono(ddir.string(), m, data.vocab);
    for (const auto& p : data.train_pairs) save_parallel(ddir.string(), p, data.vocab);
    const Dataset ds = load_dataset(ddir.string(), "l0");
    CHECK(ds.mono.size() == 2);
    CHECK(ds.parallel.size() == 1);
    CHECK(ds.total_pairs() == 5);
    CHECK_THROWS_AS(load_dataset(ddir.string(), "l9"), std::runtime_error);
  }
  fs::remove_all(dir);
}

TEST_CASE("instance draws sample every enabled corpus") {
  SyntheticSpec spec;
  spec.base_vocab_size = 50;
  spec.num_langs = 3;
  spec.mono_sentences = 30;
  spec.train_pairs = 30;
  spec.eval_pairs = 0;
  const SyntheticData data = gen_synthetic_languages(spec);
  Rng rng(55);
  for (int i = 0; i < 50; ++i) {
    const auto mmlm = draw_mmlm_instance(data.mono, 0.7, 0.15, data.vocab, 32, rng);
    CHECK(mmlm.task == TaskKind::Mmlm);
    CHECK(!mmlm.masked_positions.empty());
    const auto tlm = draw_tlm_instance(data.train_pairs, 0.7, 0.15, data.vocab, 32, rng);
    CHECK(tlm.task == TaskKind::Tlm);
    const auto xlco = draw_xlco_instance(data.train_pairs, 0.7, true, 32, rng);
    CHECK(xlco.task == TaskKind::Xlco);
    CHECK(xlco.query_ids.front() == kClsId);
    // Mixup sides hold two segments: CLS seg SEP seg SEP has exactly 3 specials.
    CHECK(std::count_if(xlco.query_ids.begin(), xlco.query_ids.end(),
                        [](int id) { return id < kNumSpecials; }) == 3);
  }
  // Single corpus: mixup falls back to the bare pair.
  std::vector<ParallelCorpus> one{data.train_pairs[0]};
  const auto plain = draw_xlco_instance(one, 0.7, true, 32, rng);
  CHECK(std::count_if(plain.query_ids.begin(), plain.query_ids.end(),
                      [](int id) { return id < kNumSpecials; }) == 2);
}
