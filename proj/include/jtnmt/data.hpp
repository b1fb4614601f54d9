#pragma once

// Vocabulary, corpus I/O, length filtering, batching, and the synthetic
// toy-language generator used for desk-scale experiments.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace jtnmt::data {

using Sentence = std::vector<std::string>;
using TokenIds = std::vector<int>;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kNumReserved = 4;

/// Whitespace split plus lowercasing.
Sentence tokenize(std::string_view line);
std::string join(const Sentence& s);

class Vocabulary {
 public:
  /// Only the reserved entries.
  Vocabulary();
  /// Reserved entries followed by `tokens` in order (duplicates rejected).
  explicit Vocabulary(const std::vector<std::string>& tokens);

  std::size_t size() const { return id_to_token_.size(); }
  int id(std::string_view token) const;  // UNK when absent
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;

  TokenIds encode(const Sentence& s) const;
  /// Stops at EOS; drops PAD/BOS.
  Sentence decode(const TokenIds& ids) const;

  /// Non-reserved tokens in id order.
  std::vector<std::string> words() const;

  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

/// Keeps the `max_size` most frequent tokens, ties broken lexicographically.
Vocabulary build_vocab(const std::vector<Sentence>& corpus, std::size_t max_size);

struct ParallelCorpus {
  std::vector<Sentence> source;
  std::vector<Sentence> target;
  std::string source_lang = "x";
  std::string target_lang = "y";
  std::size_t size() const { return source.size(); }
};

struct FilterReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
};

/// Drops a pair when either side is longer than max_len.
ParallelCorpus filter_by_length(const ParallelCorpus& corpus, std::size_t max_len,
                                FilterReport* report = nullptr);
std::vector<Sentence> filter_by_length(const std::vector<Sentence>& corpus, std::size_t max_len,
                                       FilterReport* report = nullptr);

/// A padded batch: `ids` is batch_size x max_len row-major, padded with PAD.
struct Batch {
  std::vector<std::size_t> indices;  // positions in the original corpus
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  std::vector<int> ids;
};

/// With sort_by_length: stable length sort, then sequential batches.
/// Otherwise: seeded shuffle, then sequential batches.
std::vector<Batch> make_batches(const std::vector<TokenIds>& sentences, std::size_t batch_size,
                                std::uint64_t seed, bool sort_by_length);

/// Index-only variant used where padding is done elsewhere.
std::vector<std::vector<std::size_t>> batch_indices(std::size_t count, std::size_t batch_size,
                                                    std::uint64_t seed);

// ---- line-oriented corpus files -------------------------------------------

std::vector<Sentence> read_sentences(const std::filesystem::path& path);
void write_sentences(const std::filesystem::path& path, const std::vector<Sentence>& sentences);

struct WeightedLine {
  double weight = 1.0;
  Sentence source;
  Sentence target;
};

/// "weight<TAB>source<TAB>target" with the weight printed to 6 decimals.
std::string format_weighted(const WeightedLine& line);
WeightedLine parse_weighted(std::string_view line);
std::vector<WeightedLine> read_weighted(const std::filesystem::path& path);
void write_weighted(const std::filesystem::path& path, const std::vector<WeightedLine>& lines);

// ---- toy languages --------------------------------------------------------

enum class Transform { kCipher, kCipherReorder };

std::string to_string(Transform t);
Transform parse_transform(std::string_view s);

struct ToySpec {
  std::size_t vocab_size = 60;
  std::size_t min_len = 3;
  std::size_t max_len = 12;
  Transform transform = Transform::kCipher;
  double zipf_exponent = 1.0;
  /// Probability of replacing each bitext token by a uniformly drawn one.
  double noise_rate = 0.0;
  std::uint64_t seed = 1;
};

/// The generating transformation; also serves as the exact oracle translator.
class ToyLanguagePair {
 public:
  explicit ToyLanguagePair(const ToySpec& spec);

  const ToySpec& spec() const { return spec_; }
  Sentence translate(const Sentence& source) const;
  Sentence sample_source(std::mt19937_64& rng) const;
  std::string source_word(std::size_t k) const;
  std::string target_word(std::size_t k) const;

 private:
  ToySpec spec_;
  std::vector<std::size_t> cipher_;
  std::vector<double> cdf_;
};

struct ToyCorpora {
  ParallelCorpus bitext;
  std::vector<Sentence> mono_x;
  std::vector<Sentence> mono_y;
  ParallelCorpus dev;
  ParallelCorpus test;
};

/// All splits are pairwise disjoint as sentence sets; dev/test are noise-free.
ToyCorpora generate_toy_corpus(const ToySpec& spec, std::size_t n_parallel,
                               std::size_t n_mono_src, std::size_t n_mono_tgt,
                               std::size_t n_dev = 500, std::size_t n_test = 500);

}  // namespace jtnmt::data
