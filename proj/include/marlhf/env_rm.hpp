#pragma once

// Synthetic token environments and their reward functions.
//
// Token layout shared by every task (vocabulary of 32):
//   0 PAD, 1 BOS, 2 SEP, 3 EOS, 4 MARK, 5..31 content symbols.
//
// NoisyCopy: the prompt is a run of symbols, some preceded by MARK. The ideal
// response lists the marked symbols in order, then EOS.
//
// BracketLang: the prompt asks for a bracket program with a given maximum
// nesting depth and number of top-level groups. Responses are "compiled"
// (bracket matching), "run" (depth limit) and checked against a small table
// of per-case tests; the score follows the tiered compiler signal.

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marlhf/policy_model.hpp"
#include "marlhf/rng.hpp"
#include "marlhf/segmentation.hpp"

namespace marlhf {

namespace vocab {
inline constexpr Token kPad = 0;
inline constexpr Token kBos = 1;
inline constexpr Token kSep = 2;
inline constexpr Token kEos = 3;
inline constexpr Token kMark = 4;
inline constexpr Token kFirstSymbol = 5;
inline constexpr std::size_t kSize = 32;

// BracketLang symbols.
inline constexpr Token kOpenRound = 5;
inline constexpr Token kCloseRound = 6;
inline constexpr Token kOpenSquare = 7;
inline constexpr Token kCloseSquare = 8;
inline constexpr Token kAtom = 9;
inline constexpr Token kDepthBase = 10;   // 10..12 encode depth 1..3
inline constexpr Token kGroupsBase = 13;  // 13..15 encode 1..3 groups
}  // namespace vocab

enum class TaskKind { NoisyCopy, BracketLang };

struct NoisyCopyConfig {
  std::size_t min_items = 6;
  std::size_t max_items = 10;
  std::size_t min_marked = 2;
  std::size_t max_marked = 4;
  std::size_t symbols = 27;  // content symbols drawn from 5 .. 5+symbols-1
  double brevity_penalty = 0.1;
};

struct BracketConfig {
  std::size_t max_depth = 3;
  std::size_t max_groups = 3;
};

struct Prompt {
  TaskKind kind = TaskKind::NoisyCopy;
  Tokens tokens;
  Tokens gold;  // hidden ideal response, without EOS; never shown to the policy
  std::size_t depth = 0;   // BracketLang target
  std::size_t groups = 0;  // BracketLang target
};

enum class CompileStatus { Compiled, RuntimeError, CompileError };

// Tiered compiler signal: -0.3 + 1.3 * pass/(pass+fail) when compiled,
// -0.6 on runtime error, -1.0 on compile error.
double compiler_reward(CompileStatus status, std::size_t n_pass, std::size_t n_fail);

// Stack-based bracket matching over the BracketLang alphabet; any other token
// makes the program ill-formed.
bool bracket_well_formed(std::span<const Token> program);

struct BracketReport {
  CompileStatus status = CompileStatus::CompileError;
  std::size_t n_pass = 0;
  std::size_t n_fail = 0;
};

// Compiles and tests a response (content up to the first EOS).
BracketReport run_bracket_program(const Prompt& prompt, std::span<const Token> response);

// Response content: tokens before the first EOS.
std::span<const Token> response_content(std::span<const Token> response);

// Multiset token-overlap F1.
double overlap_f1(std::span<const Token> response, std::span<const Token> gold);

double rm_ranking_loss(double r_plus, double r_minus);

struct PreferencePair {
  Prompt prompt;
  Tokens chosen;
  Tokens rejected;
  double chosen_score = 0.0;
  double rejected_score = 0.0;
};

class Task {
 public:
  explicit Task(TaskKind kind, NoisyCopyConfig copy = {}, BracketConfig bracket = {});

  TaskKind kind() const { return kind_; }
  std::size_t vocab_size() const { return vocab::kSize; }
  std::size_t max_prompt_len() const;

  Prompt gen_prompt(Rng& rng) const;
  // Gold answer followed by EOS.
  Tokens ideal_response(const Prompt& prompt) const;
  double score(const Prompt& prompt, std::span<const Token> response) const;
  // Upper bound on |score| for any response of at most `max_len` tokens.
  double score_bound(std::size_t max_len) const;

  // Constituency tree whose leaves are the response tokens, or nullopt when
  // the response cannot be parsed (the caller then falls back to per-token).
  std::optional<ParseNode> parse_tree(const Prompt& prompt,
                                      std::span<const Token> response) const;

  PreferencePair gen_preference_pair(Rng& rng) const;

 private:
  Tokens corrupt(const Tokens& gold, std::size_t edits, Rng& rng) const;

  TaskKind kind_;
  NoisyCopyConfig copy_;
  BracketConfig bracket_;
};

// Scores complete responses.
class RewardModel {
 public:
  virtual ~RewardModel() = default;
  virtual double score(const Prompt& prompt, std::span<const Token> response) const = 0;
};

class ProgrammaticRewardModel final : public RewardModel {
 public:
  explicit ProgrammaticRewardModel(const Task& task) : task_(task) {}
  double score(const Prompt& prompt, std::span<const Token> response) const override {
    return task_.score(prompt, response);
  }

 private:
  const Task& task_;
};

// Scalar scorer: value head of a small GRU read at the last response token.
class LearnedRewardModel final : public RewardModel {
 public:
  explicit LearnedRewardModel(PolicyParams params) : params_(std::move(params)) {}
  double score(const Prompt& prompt, std::span<const Token> response) const override;
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

struct RewardTrainingConfig {
  std::size_t epochs = 3;
  double lr = 5e-3;
  std::uint64_t seed = 0;
};

// Minimizes the ranking loss over the pairs with Adam.
LearnedRewardModel train_reward_model(std::span<const PreferencePair> pairs,
                                      const ModelConfig& model,
                                      const RewardTrainingConfig& cfg);

// Mean ranking accuracy (chosen scored strictly above rejected).
double ranking_accuracy(const RewardModel& rm, std::span<const PreferencePair> pairs);

struct BestOfN {
  Tokens response;
  double score = 0.0;
  std::vector<double> candidate_scores;
};

// Draws N responses and keeps the highest scoring one (first on ties).
BestOfN best_of_n(const PolicyParams& params, const RewardModel& rm, const Prompt& prompt,
                  std::size_t n, const SamplerConfig& cfg, Rng& rng);

}  // namespace marlhf
