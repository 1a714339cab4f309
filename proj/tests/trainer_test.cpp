#include "marlhf/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "marlhf/errors.hpp"
#include "oracles.hpp"

namespace marlhf {
namespace {

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.model.embed = 8;
  cfg.model.hidden = 16;
  cfg.batch_size = 4;
  cfg.eval_size = 8;
  cfg.eval_interval = 5;
  cfg.total_updates = 10;
  cfg.sft_examples = 32;
  cfg.sft_epochs = 1;
  cfg.sampler.max_len = 8;
  cfg.lr_policy = 1e-2;
  cfg.lr_critic = 1e-2;
  cfg.seed = 3;
  return cfg;
}

struct Fixture {
  TrainConfig cfg;
  Trainer trainer;
  PolicyParams reference;
  PolicyParams params;

  explicit Fixture(TrainConfig c)
      : cfg(c), trainer(c), reference(trainer.sft(trainer.initial_params())), params(reference) {
    // Move the actor away from the reference so KL terms are non-trivial.
    Rng rng(99);
    for (std::size_t i = 0; i < params.parameter_count(); ++i) params.at(i) += 0.05 * rng.normal();
  }
};

TEST(Trainer, RejectsInvalidConfig) {
  TrainConfig cfg = tiny_config();
  cfg.ppo.clip = 0.0;
  try {
    Trainer t(cfg);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "clip");
  }
}

TEST(Experience, AlignsWithModelOutputs) {
  Fixture f(tiny_config());
  Rng prng(1);
  auto prompt = f.trainer.task().gen_prompt(prng);
  Tokens response{5, 6, 7, 8, 9, 10, vocab::kEos};
  Rng rng(2);
  auto exp = f.trainer.build_experience(prompt, response, f.params, f.reference, rng);
  const auto& ep = exp.episode;
  const std::size_t p = prompt.tokens.size();
  auto seq = ep.sequence();
  ASSERT_EQ(seq.size(), p + response.size());
  auto lp = log_probs(seq, f.params);
  auto lp_ref = log_probs(seq, f.reference);
  auto fwd = forward(f.params, seq);
  for (std::size_t i = 0; i < response.size(); ++i) {
    EXPECT_EQ(ep.logp_old[i], lp[p - 1 + i]);
    EXPECT_EQ(ep.logp_ref[i], lp_ref[p - 1 + i]);
    EXPECT_EQ(ep.values_old[i], fwd.values[p - 1 + i]);
  }
  EXPECT_EQ(ep.score, f.trainer.task().score(prompt, response));
  auto expected = reshape_rewards(ep.score, ep.logp_old, ep.logp_ref, f.cfg.ppo.kl_coef, ep.mask);
  EXPECT_EQ(ep.rewards, expected);
  EXPECT_EQ(exp.segmentation.lengths(), (std::vector<std::size_t>{5, 2}));
  EXPECT_EQ(exp.macro.size(), exp.segmentation.size());
  EXPECT_EQ(exp.macro.advantages.size(), exp.segmentation.size());
  EXPECT_EQ(exp.macro.returns.size(), exp.segmentation.size());
}

TEST(Experience, SingleTokenMacrosMatchVanillaGae) {
  TrainConfig cfg = tiny_config();
  cfg.ngram = 1;
  Fixture f(cfg);
  auto batch = f.trainer.prompts(7, 6);
  auto exps = f.trainer.make_experience(batch, f.params, f.reference, 11);
  for (const auto& e : exps) {
    const auto& ep = e.episode;
    ASSERT_EQ(e.macro.size(), ep.response.size());
    std::vector<double> v(ep.values_old), r(ep.rewards), adv, ret;
    oracle::gae_forward_sum(r, v, cfg.ppo.gamma, cfg.ppo.lam, adv, ret);
    for (std::size_t i = 0; i < adv.size(); ++i) {
      EXPECT_NEAR(e.macro.advantages[i], adv[i], 1e-12);
      EXPECT_NEAR(e.macro.returns[i], ret[i], 1e-12);
    }
  }
}

TEST(Experience, SameSeedSameBatch) {
  Fixture f(tiny_config());
  auto batch = f.trainer.prompts(5, 8);
  auto a = f.trainer.make_experience(batch, f.params, f.reference, 17);
  auto b = f.trainer.make_experience(batch, f.params, f.reference, 17);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) {
    EXPECT_EQ(a[k].episode.response, b[k].episode.response);
    EXPECT_EQ(a[k].episode.rewards, b[k].episode.rewards);
    EXPECT_EQ(a[k].macro.advantages, b[k].macro.advantages);
  }
}

TEST(Experience, ThreadCountDoesNotChangeTheBatch) {
  TrainConfig one = tiny_config();
  TrainConfig four = tiny_config();
  four.threads = 4;
  Fixture a(one);
  Fixture b(four);
  auto prompts = a.trainer.prompts(5, 12);
  auto x = a.trainer.make_experience(prompts, a.params, a.reference, 3);
  auto y = b.trainer.make_experience(prompts, b.params, b.reference, 3);
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    EXPECT_EQ(x[k].episode.response, y[k].episode.response);
    EXPECT_EQ(x[k].macro.returns, y[k].macro.returns);
  }
}

TEST(Experience, MacroCountIsCeilingOfLength) {
  for (std::size_t n : {1u, 3u, 5u}) {
    TrainConfig cfg = tiny_config();
    cfg.ngram = n;
    Fixture f(cfg);
    auto exps = f.trainer.make_experience(f.trainer.prompts(2, 10), f.params, f.reference, 5);
    for (const auto& e : exps) {
      const std::size_t t = e.episode.response.size();
      EXPECT_EQ(e.macro.size(), (t + n - 1) / n);
    }
  }
}

TEST(Experience, EveryRulePartitionsResponses) {
  for (const char* rule : {"fixed", "random", "ppl", "parsing"}) {
    TrainConfig cfg = tiny_config();
    set_config_value(cfg, "termination", rule);
    Fixture f(cfg);
    auto exps = f.trainer.make_experience(f.trainer.prompts(2, 10), f.params, f.reference, 5);
    ASSERT_EQ(exps.size(), 10u) << rule;
    for (const auto& e : exps) {
      EXPECT_EQ(e.segmentation.start(), 0u);
      EXPECT_EQ(e.segmentation.end(), e.episode.response.size());
    }
  }
}

TEST(OptimizeStep, ZeroLearningRateLeavesParamsUnchanged) {
  TrainConfig cfg = tiny_config();
  cfg.lr_policy = 0.0;
  cfg.lr_critic = 0.0;
  for (auto opt : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
    cfg.optimizer = opt;
    Fixture f(cfg);
    auto exps = f.trainer.make_experience(f.trainer.prompts(1, 4), f.params, f.reference, 1);
    PolicyParams before = f.params;
    auto stats = f.trainer.optimize_step(exps, f.params);
    EXPECT_FALSE(stats.aborted);
    EXPECT_TRUE(before == f.params);
  }
}

TEST(OptimizeStep, OnPolicyLossIsMinusMeanBroadcastAdvantage) {
  for (auto mode : {RatioMode::PerToken, RatioMode::JointMacro}) {
    TrainConfig cfg = tiny_config();
    cfg.ppo.ratio_mode = mode;
    Fixture f(cfg);
    auto exps = f.trainer.make_experience(f.trainer.prompts(1, 8), f.params, f.reference, 1);
    double expect = 0.0;
    for (const auto& e : exps) {
      double sum = 0.0, count = 0.0;
      for (std::size_t s = 0; s < e.segmentation.size(); ++s) {
        for (std::size_t t = e.segmentation.begin_of(s); t < e.segmentation.end_of(s); ++t) {
          if (!e.episode.mask[t]) continue;
          sum += e.macro.advantages[s];
          count += 1;
        }
      }
      expect -= sum / count;
    }
    expect /= static_cast<double>(exps.size());
    auto stats = f.trainer.optimize_step(exps, f.params);
    EXPECT_NEAR(stats.policy_loss, expect, 1e-12);
  }
}

TEST(OptimizeStep, StoredLogpsReproduceExactly) {
  Fixture f(tiny_config());
  auto exps = f.trainer.make_experience(f.trainer.prompts(1, 8), f.params, f.reference, 4);
  for (const auto& e : exps) {
    auto lp = log_probs(e.episode.sequence(), f.params);
    const std::size_t p = e.episode.prompt.tokens.size();
    for (std::size_t i = 0; i < e.episode.response.size(); ++i) {
      EXPECT_EQ(std::exp(lp[p - 1 + i] - e.episode.logp_old[i]), 1.0);
    }
  }
}

TEST(Evaluate, SideEffectFreeAndSized) {
  Fixture f(tiny_config());
  PolicyParams before = f.params;
  auto a = f.trainer.evaluate(f.params, f.trainer.programmatic_reward(),
                              f.trainer.eval_prompts(), f.cfg.sampler, 9);
  auto b = f.trainer.evaluate(f.params, f.trainer.programmatic_reward(),
                              f.trainer.eval_prompts(), f.cfg.sampler, 9);
  EXPECT_TRUE(before == f.params);
  EXPECT_EQ(a.scores.size(), f.cfg.eval_size);
  EXPECT_EQ(a.scores, b.scores);
  EXPECT_LE(a.p10, a.p50);
  EXPECT_LE(a.p50, a.p90);
}

// A uniform policy over 32 tokens scored against an independent simulation.
TEST(Evaluate, UniformPolicyMatchesSimulation) {
  TrainConfig cfg = tiny_config();
  cfg.eval_size = 2000;
  cfg.sampler.max_len = 24;
  Trainer trainer(cfg);
  PolicyParams uniform(cfg.model, 1);
  auto ev = trainer.evaluate(uniform, trainer.programmatic_reward(), trainer.eval_prompts(),
                             cfg.sampler, 1);

  std::mt19937_64 gen(12345);
  std::uniform_int_distribution<int> tok(0, 31);
  const auto& prompts = trainer.eval_prompts();
  const int draws = 40000;
  double sum = 0.0;
  for (int i = 0; i < draws; ++i) {
    const auto& p = prompts[static_cast<std::size_t>(i) % prompts.size()];
    Tokens content;
    for (int k = 0; k < 24; ++k) {
      const int t = tok(gen);
      if (t == vocab::kEos) break;
      content.push_back(t);
    }
    std::map<int, int> need;
    for (Token g : p.gold) ++need[g];
    int overlap = 0;
    for (Token t : content) {
      if (need[t] > 0) {
        --need[t];
        ++overlap;
      }
    }
    double f1 = 0.0;
    if (overlap > 0) f1 = 2.0 * overlap / static_cast<double>(content.size() + p.gold.size());
    const double excess =
        content.size() > p.gold.size() ? static_cast<double>(content.size() - p.gold.size()) : 0.0;
    sum += f1 - 0.1 * excess;
  }
  const double sim = sum / draws;
  double var = 0.0;
  for (double s : ev.scores) var += (s - ev.mean) * (s - ev.mean);
  const double se = std::sqrt(var / (ev.scores.size() - 1) / ev.scores.size());
  EXPECT_NEAR(ev.mean, sim, 4 * se + 0.01) << "se " << se;
  EXPECT_LT(ev.mean, 0.0);  // dominated by the length penalty
}

TEST(Run, DeterministicAndReferenceFrozen) {
  TrainConfig cfg = tiny_config();
  auto a = Trainer(cfg).run();
  auto b = Trainer(cfg).run();
  ASSERT_EQ(a.metrics.size(), b.metrics.size());
  for (std::size_t i = 0; i < a.metrics.size(); ++i) {
    EXPECT_EQ(to_csv_row(a.metrics[i]), to_csv_row(b.metrics[i]));
  }
  EXPECT_TRUE(a.final_params == b.final_params);
  EXPECT_EQ(a.reference_hash_start, a.reference_hash_end);
  EXPECT_EQ(a.reference_hash_start, a.sft.hash());
  // Evaluations at 0, 5 and the final update.
  ASSERT_EQ(a.metrics.size(), 3u);
  EXPECT_EQ(a.metrics.back().update, 10u);
  EXPECT_EQ(a.eval_scores.size(), a.metrics.size());
  EXPECT_FALSE(a.metrics.front().wall_clock.has_value());
}

TEST(Run, HundredUpdatesStayFinite) {
  TrainConfig cfg = tiny_config();
  cfg.total_updates = 100;
  cfg.eval_interval = 25;
  cfg.lr_policy = 0.1;
  cfg.lr_critic = 0.1;
  auto r = Trainer(cfg).run();
  EXPECT_EQ(r.aborted_updates, 0u);
  EXPECT_TRUE(r.final_params.all_finite());
  for (const auto& m : r.metrics) {
    EXPECT_TRUE(std::isfinite(m.policy_loss));
    EXPECT_TRUE(std::isfinite(m.critic_loss));
    EXPECT_TRUE(std::isfinite(m.kl));
  }
}

TEST(Run, KlCeilingStopsEarly) {
  TrainConfig cfg = tiny_config();
  cfg.kl_ceiling = 1e-12;
  cfg.lr_policy = 0.5;
  auto r = Trainer(cfg).run();
  EXPECT_TRUE(r.stopped_on_kl);
  EXPECT_LT(r.metrics.back().update, cfg.total_updates);
}

TEST(Metrics, CsvAndJsonAgree) {
  MetricsRecord m;
  m.update = 4;
  m.eval_mean = 0.25;
  auto j = to_json(m);
  EXPECT_EQ(j["update"], 4);
  EXPECT_EQ(j["eval_mean"], 0.25);
  EXPECT_FALSE(j.contains("wall_clock"));
  std::size_t cols = 1;
  for (char c : csv_header()) cols += c == ',';
  std::size_t row_cols = 1;
  for (char c : to_csv_row(m)) row_cols += c == ',';
  EXPECT_EQ(cols, row_cols);
}

TEST(Percentile, Interpolates) {
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 0.5), 2.5);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 0.0), 1.0);
  EXPECT_DOUBLE_EQ(percentile({4, 1, 3, 2}, 1.0), 4.0);
  EXPECT_DOUBLE_EQ(percentile({7}, 0.9), 7.0);
}

}  // namespace
}  // namespace marlhf
