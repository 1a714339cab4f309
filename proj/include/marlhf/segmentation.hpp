#pragma once

// Macro-action boundaries over a sampled response.
//
// A Segmentation partitions the response span [start, end) into contiguous
// macro actions. Boundaries are raw token positions; masked-out (padding)
// tokens still occupy positions but are skipped when counting.

#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "marlhf/rng.hpp"

namespace marlhf {

using Mask = std::vector<unsigned char>;

class Segmentation {
 public:
  // Throws InvalidArgumentError unless `boundaries` has at least two entries
  // and is strictly increasing.
  explicit Segmentation(std::vector<std::size_t> boundaries);

  std::size_t start() const { return boundaries_.front(); }
  std::size_t end() const { return boundaries_.back(); }
  std::size_t size() const { return boundaries_.size() - 1; }
  std::size_t length(std::size_t segment) const {
    return boundaries_[segment + 1] - boundaries_[segment];
  }
  std::size_t begin_of(std::size_t segment) const { return boundaries_[segment]; }
  std::size_t end_of(std::size_t segment) const { return boundaries_[segment + 1]; }

  const std::vector<std::size_t>& boundaries() const { return boundaries_; }
  std::vector<std::size_t> lengths() const;

  // One segment per token: the token-level (vanilla PPO) case.
  static Segmentation per_token(std::size_t response_len, std::size_t start = 0);

  friend bool operator==(const Segmentation&, const Segmentation&) = default;

 private:
  std::vector<std::size_t> boundaries_;
};

// ---------------------------------------------------------------------------
// Termination rules

struct FixedNGram {
  // Sentinel for n = infinity: the whole response is one macro action.
  static constexpr std::size_t kWhole = std::numeric_limits<std::size_t>::max();
  std::size_t n = 5;
};

struct RandomizedNGram {
  std::vector<std::size_t> lengths{2, 3, 5, 10};
  std::size_t repeats = 3;
};

enum class PerplexityMode {
  Prefix,  // new segment wherever the response-prefix perplexity rises
  Macro,   // new segment wherever the current segment's own perplexity would rise
};

struct Perplexity {
  PerplexityMode mode = PerplexityMode::Prefix;
};

struct Parsing {
  std::size_t cutoff = 5;
};

using TerminationRule = std::variant<FixedNGram, RandomizedNGram, Perplexity, Parsing>;

// Throws InvalidArgumentError if the rule violates its parameter invariants.
void validate(const TerminationRule& rule);
std::string describe(const TerminationRule& rule);

// ---------------------------------------------------------------------------
// Constituency tree over response tokens. A node is either a leaf (one token)
// or an ordered list of children.

struct ParseNode {
  bool is_leaf = false;
  std::vector<ParseNode> children;

  static ParseNode leaf() { return ParseNode{true, {}}; }
  static ParseNode node(std::vector<ParseNode> children) {
    return ParseNode{false, std::move(children)};
  }
  std::size_t leaf_count() const;
};

// Builds a balanced binary bracketing over `count` leaves (count >= 1).
ParseNode balanced_tree(std::size_t count);

// ---------------------------------------------------------------------------
// Operations. All are pure; `start` offsets every boundary.

Segmentation segment_fixed_ngram(std::size_t response_len, std::size_t n,
                                 std::span<const unsigned char> mask,
                                 std::size_t start = 0);

// Uses a shuffled copy of `rule.lengths` repeated `rule.repeats` times.
Segmentation segment_randomized_ngram(std::size_t response_len, const RandomizedNGram& rule,
                                      Rng& rng, std::size_t start = 0);

// Same truncation rule, with the shuffled length list supplied directly.
Segmentation segment_by_lengths(std::size_t response_len, std::span<const std::size_t> lengths,
                                std::size_t start = 0);

Segmentation segment_perplexity(std::span<const double> prefix_ppl, std::size_t start = 0);

// Opens a new segment at token i when -log p_i exceeds the running mean of
// the current segment, i.e. when the segment's own perplexity would increase.
Segmentation segment_macro_perplexity(std::span<const double> ref_logps,
                                      std::span<const unsigned char> mask,
                                      std::size_t start = 0);

// exp(-(1/t) * sum_{i<=t} log p_ref(a_i)) over masked-in tokens. Masked-out
// positions repeat the previous value.
std::vector<double> prefix_perplexity(std::span<const double> ref_logps,
                                      std::span<const unsigned char> mask);

// DFS over the tree: a node with 2 <= leaves < cutoff closes a macro action;
// a single leaf extends the last macro action (or opens the first one). If the
// tree's leaf count differs from `response_len`, falls back to one segment
// per token.
Segmentation segment_parsing(const ParseNode& tree, std::size_t response_len,
                             std::size_t cutoff, std::size_t start = 0);

// Everything a rule may need. `ref_logps` is required by Perplexity and
// `tree` by Parsing; a null tree under Parsing falls back to per-token.
struct SegmentInput {
  std::size_t response_len = 0;
  std::span<const unsigned char> mask;
  std::span<const double> ref_logps;
  const ParseNode* tree = nullptr;
  std::size_t start = 0;
};

Segmentation segment(const TerminationRule& rule, const SegmentInput& input, Rng& rng);

}  // namespace marlhf
