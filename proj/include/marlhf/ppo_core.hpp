#pragma once

// KL-reshaped rewards, macro-level GAE and the clipped MA-PPO losses.
//
// Per-token arrays are indexed by raw position: a Segmentation covering
// [start, end) reads entries start..end-1. Losses come with their exact
// gradient with respect to the per-token model outputs (log-probabilities for
// the policy loss, values for the critic loss) so a model can backpropagate
// them into its parameters.

#include <span>
#include <vector>

#include "marlhf/segmentation.hpp"

namespace marlhf {

enum class RatioMode {
  PerToken,    // per-token ratio, macro advantage broadcast over the segment
  JointMacro,  // one ratio per macro action: product of its token ratios
};

struct PPOConfig {
  double clip = 0.2;
  double value_clip = 0.2;
  double gamma = 1.0;
  double lam = 0.95;
  double kl_coef = 0.05;
  RatioMode ratio_mode = RatioMode::PerToken;
  bool whiten = false;
};

void validate(const PPOConfig& cfg);

// r_t = -beta * (logp_t - logp_ref_t); the score is added on the last
// masked-in token.
std::vector<double> reshape_rewards(double rm_score, std::span<const double> logp,
                                    std::span<const double> logp_ref, double beta,
                                    std::span<const unsigned char> mask = {});

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Backward recursion with terminal bootstrap V_m = 0.
GaeResult macro_gae(std::span<const double> rewards, std::span<const double> values,
                    double gamma, double lam);

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d (per-token input), zero outside the span
};

LossAndGrad ma_policy_loss(std::span<const double> logp_new, std::span<const double> logp_old,
                           std::span<const double> advantages,
                           std::span<const unsigned char> mask, const Segmentation& seg,
                           double clip, RatioMode mode = RatioMode::PerToken);

LossAndGrad ma_critic_loss(std::span<const double> values_new,
                           std::span<const double> values_old, std::span<const double> returns,
                           std::span<const unsigned char> mask, const Segmentation& seg,
                           double value_clip);

struct DiagNorms {
  double advantage = 0.0;
  double ret = 0.0;
};

DiagNorms diag_norms(std::span<const double> advantages, std::span<const double> returns);

// In-place (x - mean) / (std + 1e-8).
void whiten(std::vector<double>& values);

}  // namespace marlhf
