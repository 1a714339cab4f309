#include "marlhf/ppo_core.hpp"

#include <algorithm>
#include <cmath>

#include "marlhf/errors.hpp"

namespace marlhf {
namespace {

bool valid_at(std::span<const unsigned char> mask, std::size_t i) {
  return mask.empty() || mask[i] != 0;
}

void check_span(std::size_t a, std::size_t b, std::span<const unsigned char> mask,
                std::size_t per_macro, const Segmentation& seg) {
  if (a < seg.end() || b < seg.end()) throw ShapeError("per-token arrays shorter than span");
  if (!mask.empty() && mask.size() < seg.end()) throw ShapeError("mask shorter than span");
  if (per_macro != seg.size()) throw ShapeError("per-macro array does not match segment count");
}

}  // namespace

void validate(const PPOConfig& cfg) {
  if (!(cfg.clip > 0.0)) throw InvalidArgumentError("clip must be > 0");
  if (!(cfg.value_clip > 0.0)) throw InvalidArgumentError("value_clip must be > 0");
  if (cfg.gamma < 0.0 || cfg.gamma > 1.0) throw InvalidArgumentError("gamma must be in [0,1]");
  if (cfg.lam < 0.0 || cfg.lam > 1.0) throw InvalidArgumentError("lam must be in [0,1]");
  if (cfg.kl_coef < 0.0) throw InvalidArgumentError("kl_coef must be >= 0");
}

std::vector<double> reshape_rewards(double rm_score, std::span<const double> logp,
                                    std::span<const double> logp_ref, double beta,
                                    std::span<const unsigned char> mask) {
  if (logp.size() != logp_ref.size()) throw ShapeError("logp and logp_ref lengths differ");
  if (!mask.empty() && mask.size() != logp.size()) throw ShapeError("mask length differs");
  std::vector<double> r(logp.size(), 0.0);
  std::size_t last = logp.size();
  for (std::size_t t = 0; t < logp.size(); ++t) {
    if (!valid_at(mask, t)) continue;
    r[t] = -beta * (logp[t] - logp_ref[t]);
    last = t;
  }
  if (last < r.size()) r[last] += rm_score;
  return r;
}

GaeResult macro_gae(std::span<const double> rewards, std::span<const double> values,
                    double gamma, double lam) {
  if (rewards.empty()) throw EmptyInputError("empty episode");
  if (rewards.size() != values.size()) throw ShapeError("rewards and values lengths differ");
  const std::size_t m = rewards.size();
  GaeResult out{std::vector<double>(m), std::vector<double>(m)};
  double next_value = 0.0;
  double next_adv = 0.0;
  for (std::size_t k = m; k-- > 0;) {
    const double delta = rewards[k] + gamma * next_value - values[k];
    next_adv = delta + gamma * lam * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

LossAndGrad ma_policy_loss(std::span<const double> logp_new, std::span<const double> logp_old,
                           std::span<const double> advantages,
                           std::span<const unsigned char> mask, const Segmentation& seg,
                           double clip, RatioMode mode) {
  check_span(logp_new.size(), logp_old.size(), mask, advantages.size(), seg);
  LossAndGrad out{0.0, std::vector<double>(logp_new.size(), 0.0)};
  const double lo = 1.0 - clip;
  const double hi = 1.0 + clip;

  // Value and d/d(log ratio) of max(-A r, -A clip(r)).
  auto clipped_term = [&](double adv, double ratio, double& dlog) {
    const double unclipped = -adv * ratio;
    const double clamped = std::clamp(ratio, lo, hi);
    const double other = -adv * clamped;
    if (unclipped >= other) {
      dlog = unclipped;
      return unclipped;
    }
    dlog = clamped == ratio ? other : 0.0;
    return other;
  };

  double total = 0.0;
  double count = 0.0;
  if (mode == RatioMode::PerToken) {
    for (std::size_t s = 0; s < seg.size(); ++s) {
      for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
        if (!valid_at(mask, t)) continue;
        const double ratio = std::exp(logp_new[t] - logp_old[t]);
        double dlog = 0.0;
        total += clipped_term(advantages[s], ratio, dlog);
        out.grad[t] = dlog;
        count += 1.0;
      }
    }
  } else {
    for (std::size_t s = 0; s < seg.size(); ++s) {
      double log_ratio = 0.0;
      double weight = 0.0;
      for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
        if (!valid_at(mask, t)) continue;
        log_ratio += logp_new[t] - logp_old[t];
        weight += 1.0;
      }
      if (weight == 0.0) continue;
      double dlog = 0.0;
      total += weight * clipped_term(advantages[s], std::exp(log_ratio), dlog);
      for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
        if (valid_at(mask, t)) out.grad[t] = weight * dlog;
      }
      count += weight;
    }
  }
  if (count == 0.0) return out;
  out.loss = total / count;
  for (auto& g : out.grad) g /= count;
  return out;
}

LossAndGrad ma_critic_loss(std::span<const double> values_new,
                           std::span<const double> values_old, std::span<const double> returns,
                           std::span<const unsigned char> mask, const Segmentation& seg,
                           double value_clip) {
  check_span(values_new.size(), values_old.size(), mask, returns.size(), seg);
  LossAndGrad out{0.0, std::vector<double>(values_new.size(), 0.0)};
  double total = 0.0;
  double count = 0.0;
  for (std::size_t s = 0; s < seg.size(); ++s) {
    const double target = returns[s];
    for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
      if (!valid_at(mask, t)) continue;
      const double v = values_new[t];
      const double clipped =
          std::clamp(v, values_old[t] - value_clip, values_old[t] + value_clip);
      const double l1 = (v - target) * (v - target);
      const double l2 = (clipped - target) * (clipped - target);
      if (l1 >= l2) {
        total += l1;
        out.grad[t] = 2.0 * (v - target);
      } else {
        total += l2;
        out.grad[t] = clipped == v ? 2.0 * (clipped - target) : 0.0;
      }
      count += 1.0;
    }
  }
  if (count == 0.0) return out;
  out.loss = 0.5 * total / count;
  for (auto& g : out.grad) g *= 0.5 / count;
  return out;
}

DiagNorms diag_norms(std::span<const double> advantages, std::span<const double> returns) {
  DiagNorms n;
  for (double a : advantages) n.advantage += a * a;
  for (double r : returns) n.ret += r * r;
  n.advantage = std::sqrt(n.advantage);
  n.ret = std::sqrt(n.ret);
  return n;
}

void whiten(std::vector<double>& values) {
  if (values.empty()) return;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  const double scale = 1.0 / (std::sqrt(var) + 1e-8);
  for (auto& v : values) v = (v - mean) * scale;
}

}  // namespace marlhf
