#include "jtnmt/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace jtnmt::bleu {

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, std::size_t> count_ngrams(const data::Sentence& s, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= s.size(); ++i) {
    ++counts[Ngram(s.begin() + static_cast<std::ptrdiff_t>(i),
                   s.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

data::Sentence fold(const data::Sentence& s) {
  data::Sentence out;
  out.reserve(s.size());
  for (const std::string& w : s) {
    std::string l = w;
    std::transform(l.begin(), l.end(), l.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace

std::string BleuReport::to_json() const {
  nlohmann::json j = {{"bleu", bleu},
                      {"precisions", precisions},
                      {"matches", matches},
                      {"totals", totals},
                      {"brevity_penalty", brevity_penalty},
                      {"hyp_length", hyp_length},
                      {"ref_length", ref_length}};
  return j.dump();
}

BleuReport corpus_bleu(const std::vector<data::Sentence>& hypotheses,
                       const std::vector<std::vector<data::Sentence>>& references) {
  if (hypotheses.empty()) throw std::invalid_argument("corpus_bleu: no hypotheses");
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("corpus_bleu: " + std::to_string(hypotheses.size()) +
                                " hypotheses but " + std::to_string(references.size()) +
                                " reference sets");
  }
  BleuReport r;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    if (references[i].empty()) {
      throw std::invalid_argument("corpus_bleu: no reference for sentence " + std::to_string(i));
    }
    const data::Sentence hyp = fold(hypotheses[i]);
    std::vector<data::Sentence> refs;
    for (const data::Sentence& ref : references[i]) refs.push_back(fold(ref));

    r.hyp_length += hyp.size();
    std::size_t closest = refs.front().size();
    for (const data::Sentence& ref : refs) {
      const auto d = [&](std::size_t len) {
        return len > hyp.size() ? len - hyp.size() : hyp.size() - len;
      };
      if (d(ref.size()) < d(closest) || (d(ref.size()) == d(closest) && ref.size() < closest)) {
        closest = ref.size();
      }
    }
    r.ref_length += closest;

    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<Ngram, std::size_t> max_ref;
      for (const data::Sentence& ref : refs) {
        for (const auto& [g, c] : count_ngrams(ref, n)) max_ref[g] = std::max(max_ref[g], c);
      }
      for (const auto& [g, c] : count_ngrams(hyp, n)) {
        const auto it = max_ref.find(g);
        r.matches[n - 1] += std::min(c, it == max_ref.end() ? std::size_t{0} : it->second);
      }
      r.totals[n - 1] += hyp.size() >= n ? hyp.size() - n + 1 : 0;
    }
  }

  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < 4; ++n) {
    r.precisions[n] = r.totals[n] == 0 ? 0.0
                                       : static_cast<double>(r.matches[n]) /
                                             static_cast<double>(r.totals[n]);
    if (r.matches[n] == 0) zero = true;
    else log_sum += std::log(r.precisions[n]);
  }
  if (r.hyp_length == 0) {
    r.brevity_penalty = 0.0;
  } else if (r.hyp_length < r.ref_length) {
    r.brevity_penalty = std::exp(1.0 - static_cast<double>(r.ref_length) /
                                           static_cast<double>(r.hyp_length));
  }
  r.bleu = zero ? 0.0 : 100.0 * r.brevity_penalty * std::exp(log_sum / 4.0);
  return r;
}

BleuReport corpus_bleu(const std::vector<data::Sentence>& hypotheses,
                       const std::vector<data::Sentence>& references) {
  std::vector<std::vector<data::Sentence>> refs;
  refs.reserve(references.size());
  for (const data::Sentence& r : references) refs.push_back({r});
  return corpus_bleu(hypotheses, refs);
}

BleuReport corpus_bleu_ids(const std::vector<data::TokenIds>& hypotheses,
                           const std::vector<data::TokenIds>& references) {
  auto words = [](const data::TokenIds& ids) {
    data::Sentence s;
    s.reserve(ids.size());
    for (int id : ids) s.push_back(std::to_string(id));
    return s;
  };
  std::vector<data::Sentence> h;
  std::vector<data::Sentence> r;
  for (const auto& ids : hypotheses) h.push_back(words(ids));
  for (const auto& ids : references) r.push_back(words(ids));
  return corpus_bleu(h, r);
}

std::size_t select_best(const std::vector<double>& history) {
  if (history.empty()) throw std::invalid_argument("select_best: empty history");
  std::size_t best = 0;
  for (std::size_t i = 1; i < history.size(); ++i) {
    if (history[i] > history[best]) best = i;
  }
  return best;
}

}  // namespace jtnmt::bleu
