#pragma once

// End-to-end MA-PPO training: experience collection, macro segmentation,
// aggregation, macro GAE, clipped policy/critic optimization and evaluation.
// FixedNGram(1) with Equal weights is token-level PPO.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marlhf/config.hpp"
#include "marlhf/env_rm.hpp"
#include "marlhf/macro_value.hpp"
#include "marlhf/optimizer.hpp"
#include "marlhf/policy_model.hpp"
#include "marlhf/ppo_core.hpp"
#include "marlhf/segmentation.hpp"

namespace marlhf {

// One prompt with a sampled response. Per-token arrays are aligned with the
// response: entry i belongs to response token i (sequence position
// prompt_len + i) and was produced from the state at position
// prompt_len - 1 + i.
struct Episode {
  Prompt prompt;
  Tokens response;
  Mask mask;
  std::vector<double> logp_old;
  std::vector<double> logp_ref;
  std::vector<double> values_old;
  std::vector<double> rewards;
  double score = 0.0;

  Tokens sequence() const;
  double kl() const;  // sum of logp_old - logp_ref over masked-in tokens
};

struct Experience {
  Episode episode;
  Segmentation segmentation;
  MacroBatch macro;
};

struct StepStats {
  double policy_loss = 0.0;
  double critic_loss = 0.0;
  double grad_norm = 0.0;
  bool aborted = false;  // non-finite loss; parameters left unchanged
};

struct EvalResult {
  std::vector<double> scores;  // one per eval prompt, in order
  double mean = 0.0;
  double p10 = 0.0;
  double p50 = 0.0;
  double p90 = 0.0;
  double mean_length = 0.0;
};

struct MetricsRecord {
  std::size_t update = 0;
  double eval_mean = 0.0;
  double eval_p10 = 0.0;
  double eval_p50 = 0.0;
  double eval_p90 = 0.0;
  double adv_norm = 0.0;     // mean per-episode L2 norm of macro advantages
  double return_norm = 0.0;  // mean per-episode L2 norm of macro returns
  double kl = 0.0;           // mean per-episode KL to the reference
  double train_score = 0.0;
  double response_length = 0.0;
  double macro_count = 0.0;  // mean macro actions per episode
  double policy_loss = 0.0;
  double critic_loss = 0.0;
  std::optional<double> wall_clock;
};

nlohmann::ordered_json to_json(const MetricsRecord& r);
std::string csv_header();
std::string to_csv_row(const MetricsRecord& r);

struct RunResult {
  std::vector<MetricsRecord> metrics;
  std::vector<std::vector<double>> eval_scores;  // aligned with metrics
  PolicyParams sft;
  PolicyParams final_params;
  std::uint64_t reference_hash_start = 0;
  std::uint64_t reference_hash_end = 0;
  std::size_t dropped_episodes = 0;
  std::size_t aborted_updates = 0;
  bool stopped_on_kl = false;
};

class Trainer {
 public:
  // Validates the configuration; throws ConfigError.
  explicit Trainer(TrainConfig cfg, std::ostream* log = nullptr);
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const { return cfg_; }
  const Task& task() const { return *task_; }
  // Reward used for training (programmatic unless learned_rm is set).
  const RewardModel& reward_model() const;
  // Programmatic score, used for evaluation.
  const RewardModel& programmatic_reward() const { return *programmatic_; }

  std::vector<Prompt> prompts(std::uint64_t stream, std::size_t count) const;
  const std::vector<Prompt>& eval_prompts() const { return eval_prompts_; }

  PolicyParams initial_params() const;
  std::vector<Demonstration> demonstrations() const;
  PolicyParams sft(const PolicyParams& init) const;

  // Samples, scores, reshapes, segments, aggregates and runs macro GAE for
  // every prompt (rollout responses each). Episodes that raise are dropped;
  // `dropped` (if given) receives their count.
  std::vector<Experience> make_experience(std::span<const Prompt> batch,
                                          const PolicyParams& params,
                                          const PolicyParams& reference, std::uint64_t stream,
                                          std::size_t* dropped = nullptr) const;
  // Builds the experience for an already sampled response.
  Experience build_experience(const Prompt& prompt, Tokens response, const PolicyParams& params,
                              const PolicyParams& reference, Rng& rng) const;

  // One optimizer step per ppo epoch over the whole batch. Optimizer state
  // (momentum, Adam moments) persists across calls until reset_optimizer().
  StepStats optimize_step(std::span<const Experience> experience, PolicyParams& params);
  void reset_optimizer();

  EvalResult evaluate(const PolicyParams& params, const RewardModel& rm,
                      std::span<const Prompt> prompts, const SamplerConfig& sampler,
                      std::uint64_t stream) const;

  // SFT warm start, reference freeze, then total_updates PPO updates.
  RunResult run();

 private:
  struct OptimizerState;

  TrainConfig cfg_;
  std::ostream* log_;
  std::unique_ptr<Task> task_;
  std::unique_ptr<ProgrammaticRewardModel> programmatic_;
  std::unique_ptr<LearnedRewardModel> learned_;
  std::vector<Prompt> eval_prompts_;
  std::unique_ptr<OptimizerState> opt_;
};

// Writes config.json, metrics.jsonl, metrics.csv, scores.jsonl and
// checkpoints/{sft,final}.ckpt under `dir` (created if needed).
void write_run(const std::string& dir, const TrainConfig& cfg, const RunResult& result);

// Sampling seed for eval prompt `k` within an evaluation stream.
std::uint64_t eval_sample_seed(std::uint64_t stream, std::size_t k);

// Evaluation stream used when scoring a saved checkpoint.
std::uint64_t checkpoint_eval_stream(std::uint64_t seed);

// Percentile with linear interpolation over a sorted copy.
double percentile(std::vector<double> values, double q);

}  // namespace marlhf
