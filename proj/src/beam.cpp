#include "jtnmt/beam.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace jtnmt::beam {

using numerics::Tensor;

data::TokenIds Hypothesis::output() const {
  data::TokenIds out = token_ids;
  if (!out.empty() && out.back() == data::kEos) out.pop_back();
  return out;
}

double normalized_score(const Hypothesis& h) {
  if (h.token_ids.empty()) throw std::invalid_argument("normalized_score: empty hypothesis");
  return h.log_prob / static_cast<double>(h.token_ids.size());
}

namespace {

struct Partial {
  data::TokenIds tokens;
  double log_prob = 0.0;
  Eigen::Index state_row = 0;
};

struct Candidate {
  std::size_t parent = 0;
  int token = 0;
  double log_prob = 0.0;
};

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  const double sa = normalized_score(a);
  const double sb = normalized_score(b);
  if (sa != sb) return sa > sb;
  return a.token_ids < b.token_ids;
}

}  // namespace

NBestList beam_search(const model::ModelParams& params, std::span<const int> source_ids,
                      int beam_size, int n_best, int max_len) {
  if (n_best < 1 || beam_size < n_best) {
    throw std::invalid_argument("beam_search: need beam_size >= n_best >= 1");
  }
  if (max_len < 1) throw std::invalid_argument("beam_search: max_len must be >= 1");
  const model::EncodedSource enc = model::encode(params, source_ids);
  const int vocab = params.config.tgt_vocab;
  const auto beam = static_cast<std::size_t>(beam_size);

  std::vector<Partial> alive(1);
  Tensor states = enc.initial_state;
  std::vector<Hypothesis> pool;
  std::vector<Candidate> cands;
  std::vector<int> prev;

  for (int step = 0; step < max_len && !alive.empty() && pool.size() < beam; ++step) {
    prev.clear();
    Tensor in_states(static_cast<Eigen::Index>(alive.size()), states.cols());
    for (std::size_t i = 0; i < alive.size(); ++i) {
      prev.push_back(alive[i].tokens.empty() ? data::kBos : alive[i].tokens.back());
      in_states.row(static_cast<Eigen::Index>(i)) = states.row(alive[i].state_row);
    }
    model::StepOutput out = model::decode_step(params, in_states, prev, enc);

    cands.clear();
    for (std::size_t i = 0; i < alive.size(); ++i) {
      for (int v = data::kEos; v < vocab; ++v) {
        cands.push_back({i, v, alive[i].log_prob + out.log_probs(static_cast<Eigen::Index>(i), v)});
      }
    }
    // Order by accumulated log-prob, then by the token sequence.
    auto before = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const data::TokenIds& pa = alive[a.parent].tokens;
      const data::TokenIds& pb = alive[b.parent].tokens;
      if (a.parent != b.parent) return pa < pb;
      return a.token < b.token;
    };
    // At most one EOS per parent precedes the beam-th unfinished candidate.
    const std::size_t need = std::min(cands.size(), beam + alive.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(need), cands.end(),
                      before);
    cands.resize(need);

    std::vector<Partial> next;
    for (const Candidate& c : cands) {
      if (next.size() == beam) break;
      data::TokenIds tokens = alive[c.parent].tokens;
      tokens.push_back(c.token);
      if (c.token == data::kEos) {
        pool.push_back({std::move(tokens), c.log_prob, true, false});
      } else {
        next.push_back({std::move(tokens), c.log_prob, static_cast<Eigen::Index>(c.parent)});
      }
    }
    states = std::move(out.state);
    alive = std::move(next);
  }

  NBestList result;
  if (pool.empty()) {
    // Nothing emitted EOS within max_len: score an explicit EOS after each
    // surviving hypothesis.
    prev.clear();
    Tensor in_states(static_cast<Eigen::Index>(alive.size()), states.cols());
    for (std::size_t i = 0; i < alive.size(); ++i) {
      prev.push_back(alive[i].tokens.back());
      in_states.row(static_cast<Eigen::Index>(i)) = states.row(alive[i].state_row);
    }
    const model::StepOutput out = model::decode_step(params, in_states, prev, enc);
    for (std::size_t i = 0; i < alive.size(); ++i) {
      data::TokenIds tokens = alive[i].tokens;
      tokens.push_back(data::kEos);
      pool.push_back({std::move(tokens),
                      alive[i].log_prob + out.log_probs(static_cast<Eigen::Index>(i), data::kEos),
                      true, true});
    }
    result.forced = true;
  }
  std::sort(pool.begin(), pool.end(), ranks_before);
  if (pool.size() > static_cast<std::size_t>(n_best)) pool.resize(static_cast<std::size_t>(n_best));
  result.hypotheses = std::move(pool);
  return result;
}

int default_max_len(std::size_t source_length, int cap) {
  return static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(cap),
                                                2 * source_length + 5));
}

std::vector<TranslationResult> batch_translate(const model::ModelParams& params,
                                               std::span<const data::TokenIds> sources,
                                               int beam_size, int n_best) {
  numerics::keep_heap_resident();
  std::vector<std::size_t> order(sources.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return sources[a].size() < sources[b].size();
  });
  std::vector<TranslationResult> results(sources.size());
  for (std::size_t i : order) {
    try {
      results[i].nbest = beam_search(params, sources[i], beam_size, n_best,
                                     default_max_len(sources[i].size(), params.config.max_len));
    } catch (const std::exception& e) {
      results[i].error = e.what();
    }
  }
  return results;
}

}  // namespace jtnmt::beam
