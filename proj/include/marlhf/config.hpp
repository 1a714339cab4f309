#pragma once

// Training configuration and its flat key/value surface.
//
// Every field is reachable by a key (`termination`, `ngram`, `kl_coef`, ...)
// used identically by JSON config files, `key = value` config files and
// command-line `--set key=value` overrides.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "marlhf/env_rm.hpp"
#include "marlhf/macro_value.hpp"
#include "marlhf/policy_model.hpp"
#include "marlhf/ppo_core.hpp"
#include "marlhf/segmentation.hpp"

namespace marlhf {

enum class OptimizerKind { Sgd, Adam };
enum class TerminationKind { Fixed, Random, Perplexity, Parsing };

// Defaults are the desk-scale setup used by the acceptance suite: long
// NoisyCopy responses (16-20 marked symbols), plain SGD with momentum.
struct TrainConfig {
  // Environment and reward.
  TaskKind task = TaskKind::NoisyCopy;
  NoisyCopyConfig noisy_copy{
      .min_items = 20, .max_items = 26, .min_marked = 16, .max_marked = 20, .symbols = 6};
  BracketConfig bracket;
  bool learned_rm = false;
  std::size_t rm_pairs = 2000;
  std::size_t rm_epochs = 3;
  double rm_lr = 5e-3;

  // Macro actions.
  TerminationKind termination = TerminationKind::Fixed;
  std::size_t ngram = 5;  // FixedNGram::kWhole for the whole response
  std::vector<std::size_t> random_lengths{2, 3, 5, 10};
  std::size_t random_repeats = 3;
  std::size_t parsing_cutoff = 5;
  PerplexityMode ppl_mode = PerplexityMode::Prefix;
  SigmaAssignment sigma = SigmaAssignment::Equal;
  RewardAggregation reward_agg = RewardAggregation::Sum;

  PPOConfig ppo;
  SamplerConfig sampler;
  ModelConfig model{.hidden = 48};

  // Optimization.
  std::size_t batch_size = 32;
  std::size_t rollout = 1;
  std::size_t ppo_epochs = 1;
  double lr_policy = 0.05;
  double lr_critic = 0.05;
  double momentum = 0.9;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double grad_clip = 1.0;  // global norm; 0 disables
  double kl_ceiling = 0.0;  // abort when mean KL exceeds it; 0 disables

  // Supervised warm start.
  std::size_t sft_examples = 600;
  std::size_t sft_epochs = 2;
  double sft_lr = 1e-2;

  // Schedule.
  std::size_t total_updates = 300;
  std::size_t eval_interval = 25;
  std::size_t eval_size = 128;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool log_wall_clock = false;

  TerminationRule rule() const;
};

// Throws ConfigError naming the first offending key.
void validate(const TrainConfig& cfg);

// Applies one `key=value` assignment. Throws ConfigError on unknown keys or
// unparsable values.
void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value);
void apply_override(TrainConfig& cfg, const std::string& assignment);

// Current value of a key, formatted as accepted by set_config_value.
std::string get_config_value(const TrainConfig& cfg, const std::string& key);

struct ConfigKey {
  std::string name;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig config_from_json(const nlohmann::json& j);

// Reads a JSON object (.json) or flat `key = value` lines (anything else,
// `#` comments allowed). Throws Error if the file cannot be read.
TrainConfig load_config(const std::string& path);

}  // namespace marlhf
