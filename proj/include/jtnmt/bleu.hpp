#pragma once

// Corpus-level BLEU-4: clipped n-gram counts summed over the corpus, closest
// reference length for the brevity penalty (ties to the shorter), case-folded
// tokens, no smoothing.

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "jtnmt/data.hpp"

namespace jtnmt::bleu {

struct BleuReport {
  double bleu = 0.0;  // 0..100
  std::array<double, 4> precisions{};
  std::array<std::size_t, 4> matches{};
  std::array<std::size_t, 4> totals{};
  double brevity_penalty = 1.0;
  std::size_t hyp_length = 0;
  std::size_t ref_length = 0;

  /// Single-line JSON record.
  std::string to_json() const;
};

/// references[i] holds one or more references for hypotheses[i].
BleuReport corpus_bleu(const std::vector<data::Sentence>& hypotheses,
                       const std::vector<std::vector<data::Sentence>>& references);

/// Single-reference convenience overload.
BleuReport corpus_bleu(const std::vector<data::Sentence>& hypotheses,
                       const std::vector<data::Sentence>& references);

/// Token ids compared as symbols; single reference each.
BleuReport corpus_bleu_ids(const std::vector<data::TokenIds>& hypotheses,
                           const std::vector<data::TokenIds>& references);

/// Index of the highest score; the earliest one on ties.
std::size_t select_best(const std::vector<double>& history);

}  // namespace jtnmt::bleu
