#include "jtnmt/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace jtnmt::data {

namespace {

const std::vector<std::string> kReserved = {"<pad>", "<s>", "</s>", "<unk>"};

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return out;
}

}  // namespace

Sentence tokenize(std::string_view line) {
  Sentence out;
  std::string cur;
  for (char c : line) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::string join(const Sentence& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out.push_back(' ');
    out += s[i];
  }
  return out;
}

// ---- Vocabulary -------------------------------------------------------------

Vocabulary::Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  for (const auto& t : kReserved) {
    token_to_id_.emplace(t, static_cast<int>(id_to_token_.size()));
    id_to_token_.push_back(t);
  }
  for (const auto& t : tokens) {
    if (!token_to_id_.emplace(t, static_cast<int>(id_to_token_.size())).second) {
      throw std::invalid_argument("duplicate vocabulary entry '" + t + "'");
    }
    id_to_token_.push_back(t);
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  return id_to_token_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const {
  return token_to_id_.count(std::string(token)) > 0;
}

TokenIds Vocabulary::encode(const Sentence& s) const {
  TokenIds ids;
  ids.reserve(s.size());
  for (const auto& t : s) ids.push_back(id(t));
  return ids;
}

Sentence Vocabulary::decode(const TokenIds& ids) const {
  Sentence out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kBos) continue;
    out.push_back(token(id));
  }
  return out;
}

std::vector<std::string> Vocabulary::words() const {
  return {id_to_token_.begin() + kNumReserved, id_to_token_.end()};
}

void Vocabulary::save(const std::filesystem::path& path) const {
  auto out = open_out(path);
  for (const auto& w : words()) out << w << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) words.push_back(line);
  }
  return Vocabulary(words);
}

Vocabulary build_vocab(const std::vector<Sentence>& corpus, std::size_t max_size) {
  if (corpus.empty()) throw std::invalid_argument("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& s : corpus) {
    for (const auto& t : s) {
      if (std::find(kReserved.begin(), kReserved.end(), t) == kReserved.end()) ++counts[t];
    }
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  // map order is lexicographic, so a stable sort by count keeps ties lexicographic.
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  if (ranked.size() > max_size) ranked.resize(max_size);
  std::vector<std::string> tokens;
  tokens.reserve(ranked.size());
  for (auto& [t, c] : ranked) tokens.push_back(t);
  return Vocabulary(tokens);
}

// ---- filtering and batching -------------------------------------------------

ParallelCorpus filter_by_length(const ParallelCorpus& corpus, std::size_t max_len,
                                FilterReport* report) {
  ParallelCorpus out;
  out.source_lang = corpus.source_lang;
  out.target_lang = corpus.target_lang;
  FilterReport r;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus.source[i].size() > max_len || corpus.target[i].size() > max_len) {
      ++r.dropped;
      continue;
    }
    out.source.push_back(corpus.source[i]);
    out.target.push_back(corpus.target[i]);
    ++r.kept;
  }
  if (report) *report = r;
  return out;
}

std::vector<Sentence> filter_by_length(const std::vector<Sentence>& corpus, std::size_t max_len,
                                       FilterReport* report) {
  std::vector<Sentence> out;
  FilterReport r;
  for (const auto& s : corpus) {
    if (s.size() > max_len) {
      ++r.dropped;
    } else {
      out.push_back(s);
      ++r.kept;
    }
  }
  if (report) *report = r;
  return out;
}

std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t at = 0; at < count; at += batch_size) {
    const std::size_t end = std::min(count, at + batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

std::vector<Batch> make_batches(const std::vector<TokenIds>& sentences, std::size_t batch_size,
                                std::uint64_t seed, bool sort_by_length) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  std::vector<std::size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  if (sort_by_length) {
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return sentences[a].size() < sentences[b].size();
    });
  } else {
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<Batch> out;
  for (std::size_t at = 0; at < order.size(); at += batch_size) {
    Batch b;
    const std::size_t end = std::min(order.size(), at + batch_size);
    for (std::size_t k = at; k < end; ++k) {
      b.indices.push_back(order[k]);
      b.lengths.push_back(sentences[order[k]].size());
      b.max_len = std::max(b.max_len, sentences[order[k]].size());
    }
    b.ids.assign(b.indices.size() * b.max_len, kPad);
    for (std::size_t r = 0; r < b.indices.size(); ++r) {
      const auto& s = sentences[b.indices[r]];
      std::copy(s.begin(), s.end(), b.ids.begin() + static_cast<std::ptrdiff_t>(r * b.max_len));
    }
    out.push_back(std::move(b));
  }
  return out;
}

// ---- files ------------------------------------------------------------------

std::vector<Sentence> read_sentences(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<Sentence> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(tokenize(line));
  return out;
}

void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences) {
  auto out = open_out(path);
  for (const auto& s : sentences) out << join(s) << '\n';
}

std::string format_weighted(const WeightedLine& line) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", line.weight);
  return std::string(buf) + '\t' + join(line.source) + '\t' + join(line.target);
}

WeightedLine parse_weighted(std::string_view line) {
  const auto t1 = line.find('\t');
  const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
  if (t2 == std::string_view::npos) {
    throw std::invalid_argument("weighted line needs 3 tab-separated fields: '" +
                                std::string(line) + "'");
  }
  WeightedLine out;
  const std::string w(line.substr(0, t1));
  std::size_t used = 0;
  out.weight = std::stod(w, &used);
  if (used != w.size() || !(out.weight > 0.0 && out.weight <= 1.0)) {
    throw std::invalid_argument("weight must be a number in (0,1]: '" + w + "'");
  }
  out.source = tokenize(line.substr(t1 + 1, t2 - t1 - 1));
  out.target = tokenize(line.substr(t2 + 1));
  return out;
}

std::vector<WeightedLine> read_weighted(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::vector<WeightedLine> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(parse_weighted(line));
  }
  return out;
}

void write_weighted(const std::filesystem::path& path, const std::vector<WeightedLine>& lines) {
  auto out = open_out(path);
  for (const auto& l : lines) out << format_weighted(l) << '\n';
}

// ---- toy languages ----------------------------------------------------------

std::string to_string(Transform t) {
  return t == Transform::kCipher ? "cipher" : "cipher-reorder";
}

Transform parse_transform(std::string_view s) {
  if (s == "cipher") return Transform::kCipher;
  if (s == "cipher-reorder") return Transform::kCipherReorder;
  throw std::invalid_argument("unknown transform '" + std::string(s) + "'");
}

ToyLanguagePair::ToyLanguagePair(const ToySpec& spec) : spec_(spec) {
  if (spec.vocab_size < 4) {
    throw std::invalid_argument("toy vocab_size " + std::to_string(spec.vocab_size) +
                                " too small for a bijective cipher (need >= 4)");
  }
  if (spec.min_len < 1 || spec.min_len > spec.max_len) {
    throw std::invalid_argument("toy length range must satisfy 1 <= min_len <= max_len");
  }
  if (spec.noise_rate < 0.0 || spec.noise_rate >= 1.0) {
    throw std::invalid_argument("toy noise_rate must be in [0,1)");
  }
  std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
  cipher_.resize(spec.vocab_size);
  std::iota(cipher_.begin(), cipher_.end(), 0);
  std::shuffle(cipher_.begin(), cipher_.end(), rng);

  cdf_.resize(spec.vocab_size);
  double acc = 0.0;
  for (std::size_t k = 0; k < spec.vocab_size; ++k) {
    acc += 1.0 / std::pow(static_cast<double>(k + 1), spec.zipf_exponent);
    cdf_[k] = acc;
  }
  for (double& c : cdf_) c /= acc;
}

std::string ToyLanguagePair::source_word(std::size_t k) const { return "x" + std::to_string(k); }
std::string ToyLanguagePair::target_word(std::size_t k) const { return "y" + std::to_string(k); }

Sentence ToyLanguagePair::sample_source(std::mt19937_64& rng) const {
  std::uniform_int_distribution<std::size_t> len(spec_.min_len, spec_.max_len);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = len(rng);
  Sentence s;
  s.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = u(rng);
    const auto k = static_cast<std::size_t>(std::lower_bound(cdf_.begin(), cdf_.end(), r) -
                                            cdf_.begin());
    s.push_back(source_word(std::min(k, spec_.vocab_size - 1)));
  }
  return s;
}

Sentence ToyLanguagePair::translate(const Sentence& source) const {
  Sentence out;
  out.reserve(source.size());
  for (const auto& w : source) {
    std::size_t k = spec_.vocab_size;
    if (w.size() > 1 && w[0] == 'x') {
      try {
        k = std::stoul(w.substr(1));
      } catch (const std::exception&) {
        k = spec_.vocab_size;
      }
    }
    out.push_back(k < spec_.vocab_size ? target_word(cipher_[k]) : "<unk>");
  }
  if (spec_.transform == Transform::kCipherReorder) {
    for (std::size_t i = 0; i + 1 < out.size(); i += 2) std::swap(out[i], out[i + 1]);
  }
  return out;
}

ToyCorpora generate_toy_corpus(const ToySpec& spec, std::size_t n_parallel,
                               std::size_t n_mono_src, std::size_t n_mono_tgt, std::size_t n_dev,
                               std::size_t n_test) {
  if (n_parallel == 0 || n_mono_src == 0 || n_mono_tgt == 0) {
    throw std::invalid_argument("toy corpus counts must be positive");
  }
  const ToyLanguagePair lang(spec);
  std::mt19937_64 rng(spec.seed);
  std::set<Sentence> seen;
  const std::size_t total = n_parallel + n_mono_src + n_mono_tgt + n_dev + n_test;
  std::size_t attempts = 0;
  auto fresh = [&]() {
    for (;;) {
      if (++attempts > 50 * total + 1000) {
        throw std::runtime_error("toy generator could not draw enough distinct sentences");
      }
      Sentence s = lang.sample_source(rng);
      if (seen.insert(s).second) return s;
    }
  };
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any(0, spec.vocab_size - 1);
  auto corrupt = [&](Sentence s, bool target_side) {
    if (spec.noise_rate <= 0.0) return s;
    for (auto& w : s) {
      if (u(rng) < spec.noise_rate) {
        w = target_side ? lang.target_word(any(rng)) : lang.source_word(any(rng));
      }
    }
    return s;
  };

  ToyCorpora out;
  out.bitext.source.reserve(n_parallel);
  for (std::size_t i = 0; i < n_parallel; ++i) {
    Sentence x = fresh();
    Sentence y = lang.translate(x);
    out.bitext.source.push_back(corrupt(std::move(x), false));
    out.bitext.target.push_back(corrupt(std::move(y), true));
  }
  for (std::size_t i = 0; i < n_mono_src; ++i) out.mono_x.push_back(fresh());
  for (std::size_t i = 0; i < n_mono_tgt; ++i) out.mono_y.push_back(lang.translate(fresh()));
  for (std::size_t i = 0; i < n_dev; ++i) {
    Sentence x = fresh();
    out.dev.target.push_back(lang.translate(x));
    out.dev.source.push_back(std::move(x));
  }
  for (std::size_t i = 0; i < n_test; ++i) {
    Sentence x = fresh();
    out.test.target.push_back(lang.translate(x));
    out.test.source.push_back(std::move(x));
  }
  return out;
}

}  // namespace jtnmt::data
