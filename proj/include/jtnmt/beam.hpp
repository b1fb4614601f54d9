#pragma once

// Beam search with n-best extraction. Pruning uses accumulated log-probability;
// the final ranking uses the length-normalized score. Ties are broken by the
// lexicographic order of token ids.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "jtnmt/model.hpp"

namespace jtnmt::beam {

struct Hypothesis {
  data::TokenIds token_ids;  // ends with EOS once finished
  double log_prob = 0.0;
  bool finished = false;
  /// EOS was appended after max_len because nothing finished on its own.
  bool forced = false;

  /// Tokens without the trailing EOS.
  data::TokenIds output() const;
};

/// log_prob / token count, EOS included. Throws for an empty hypothesis.
double normalized_score(const Hypothesis& h);

struct NBestList {
  std::vector<Hypothesis> hypotheses;  // sorted by normalized score, descending
  bool forced = false;                 // every hypothesis was force-finished
};

/// `max_len` bounds the number of generated tokens including EOS.
NBestList beam_search(const model::ModelParams& params, std::span<const int> source_ids,
                      int beam_size, int n_best, int max_len);

/// min(cap, 2 * source_length + 5).
int default_max_len(std::size_t source_length, int cap = 60);

struct TranslationResult {
  std::optional<NBestList> nbest;
  std::string error;  // set when nbest is empty
};

/// Decodes every source (length-sorted internally) with max_len from
/// default_max_len capped by the model's max_len. Results are returned in
/// input order; a failing sentence only fails its own entry.
std::vector<TranslationResult> batch_translate(const model::ModelParams& params,
                                               std::span<const data::TokenIds> sources,
                                               int beam_size, int n_best);

}  // namespace jtnmt::beam
