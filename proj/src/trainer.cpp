#include "marlhf/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <sstream>
#include <thread>

#include "marlhf/errors.hpp"

namespace marlhf {
namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kTagInit = 1;
constexpr std::uint64_t kTagSftPrompts = 2;
constexpr std::uint64_t kTagSftShuffle = 3;
constexpr std::uint64_t kTagEvalPrompts = 4;
constexpr std::uint64_t kTagEvalSample = 5;
constexpr std::uint64_t kTagTrainPrompts = 6;
constexpr std::uint64_t kTagTrainSample = 7;
constexpr std::uint64_t kTagRmPairs = 8;

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

Tokens Episode::sequence() const {
  Tokens s = prompt.tokens;
  s.insert(s.end(), response.begin(), response.end());
  return s;
}

double Episode::kl() const {
  double k = 0.0;
  for (std::size_t i = 0; i < logp_old.size(); ++i) {
    if (mask[i]) k += logp_old[i] - logp_ref[i];
  }
  return k;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(values.size() - 1, lo + 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

nlohmann::ordered_json to_json(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["update"] = r.update;
  j["eval_mean"] = r.eval_mean;
  j["eval_p10"] = r.eval_p10;
  j["eval_p50"] = r.eval_p50;
  j["eval_p90"] = r.eval_p90;
  j["adv_norm"] = r.adv_norm;
  j["return_norm"] = r.return_norm;
  j["kl"] = r.kl;
  j["train_score"] = r.train_score;
  j["response_length"] = r.response_length;
  j["macro_count"] = r.macro_count;
  j["policy_loss"] = r.policy_loss;
  j["critic_loss"] = r.critic_loss;
  if (r.wall_clock) j["wall_clock"] = *r.wall_clock;
  return j;
}

std::string csv_header() {
  return "update,eval_mean,eval_p10,eval_p50,eval_p90,adv_norm,return_norm,kl,train_score,"
         "response_length,macro_count,policy_loss,critic_loss,wall_clock";
}

std::string to_csv_row(const MetricsRecord& r) {
  std::ostringstream os;
  os << r.update << ',' << fmt(r.eval_mean) << ',' << fmt(r.eval_p10) << ',' << fmt(r.eval_p50)
     << ',' << fmt(r.eval_p90) << ',' << fmt(r.adv_norm) << ',' << fmt(r.return_norm) << ','
     << fmt(r.kl) << ',' << fmt(r.train_score) << ',' << fmt(r.response_length) << ','
     << fmt(r.macro_count) << ',' << fmt(r.policy_loss) << ',' << fmt(r.critic_loss) << ',';
  if (r.wall_clock) os << fmt(*r.wall_clock);
  return os.str();
}

struct Trainer::OptimizerState {
  Sgd sgd;
  Adam adam;
};

Trainer::Trainer(TrainConfig cfg, std::ostream* log) : cfg_(std::move(cfg)), log_(log) {
  validate(cfg_);
  cfg_.model.vocab = vocab::kSize;
  cfg_.sampler.eos = vocab::kEos;
  task_ = std::make_unique<Task>(cfg_.task, cfg_.noisy_copy, cfg_.bracket);
  programmatic_ = std::make_unique<ProgrammaticRewardModel>(*task_);
  eval_prompts_ = prompts(derive_seed({cfg_.seed, kTagEvalPrompts}), cfg_.eval_size);
  reset_optimizer();
  if (cfg_.learned_rm) {
    Rng rng(derive_seed({cfg_.seed, kTagRmPairs}));
    std::vector<PreferencePair> pairs;
    for (std::size_t i = 0; i < cfg_.rm_pairs; ++i) pairs.push_back(task_->gen_preference_pair(rng));
    RewardTrainingConfig rc{cfg_.rm_epochs, cfg_.rm_lr, cfg_.seed};
    ModelConfig mc = cfg_.model;
    mc.separate_critic = false;
    learned_ = std::make_unique<LearnedRewardModel>(train_reward_model(pairs, mc, rc));
    if (log_) *log_ << "reward model ranking accuracy " << ranking_accuracy(*learned_, pairs) << "\n";
  }
}

Trainer::~Trainer() = default;

const RewardModel& Trainer::reward_model() const {
  if (learned_) return *learned_;
  return *programmatic_;
}

void Trainer::reset_optimizer() {
  opt_ = std::make_unique<OptimizerState>(OptimizerState{Sgd(cfg_.momentum), Adam()});
}

std::vector<Prompt> Trainer::prompts(std::uint64_t stream, std::size_t count) const {
  Rng rng(stream);
  std::vector<Prompt> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(task_->gen_prompt(rng));
  return out;
}

PolicyParams Trainer::initial_params() const {
  return PolicyParams(cfg_.model, derive_seed({cfg_.seed, kTagInit}));
}

std::vector<Demonstration> Trainer::demonstrations() const {
  std::vector<Demonstration> demos;
  for (const auto& p : prompts(derive_seed({cfg_.seed, kTagSftPrompts}), cfg_.sft_examples)) {
    Demonstration d;
    d.tokens = p.tokens;
    const Tokens r = task_->ideal_response(p);
    d.tokens.insert(d.tokens.end(), r.begin(), r.end());
    d.prompt_len = p.tokens.size();
    demos.push_back(std::move(d));
  }
  return demos;
}

PolicyParams Trainer::sft(const PolicyParams& init) const {
  const auto demos = demonstrations();
  SftConfig sc;
  sc.epochs = cfg_.sft_epochs;
  sc.lr = cfg_.sft_lr;
  sc.seed = derive_seed({cfg_.seed, kTagSftShuffle});
  return sft_train(init, demos, sc);
}

Experience Trainer::build_experience(const Prompt& prompt, Tokens response,
                                     const PolicyParams& params, const PolicyParams& reference,
                                     Rng& rng) const {
  if (response.empty()) throw EmptyInputError("empty response");
  Episode ep;
  ep.prompt = prompt;
  ep.response = std::move(response);
  const std::size_t n = ep.response.size();
  const std::size_t start = prompt.tokens.size() - 1;
  ep.mask.assign(n, 1);

  const Tokens seq = ep.sequence();
  const ForwardResult fwd = forward(params, seq);
  const auto ref = log_probs(seq, reference);
  ep.logp_old.resize(n);
  ep.values_old.resize(n);
  ep.logp_ref.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t pos = start + i;
    // log softmax of the row at `pos`, read at the realized token.
    const auto& row = fwd.logits[pos];
    const double mx = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double x : row) sum += std::exp(x - mx);
    ep.logp_old[i] = row[static_cast<std::size_t>(seq[pos + 1])] - (mx + std::log(sum));
    ep.values_old[i] = fwd.values[pos];
    ep.logp_ref[i] = ref[pos];
  }
  ep.score = reward_model().score(prompt, ep.response);
  ep.rewards = reshape_rewards(ep.score, ep.logp_old, ep.logp_ref, cfg_.ppo.kl_coef, ep.mask);

  const std::optional<ParseNode> tree = cfg_.termination == TerminationKind::Parsing
                                            ? task_->parse_tree(prompt, ep.response)
                                            : std::nullopt;
  SegmentInput in;
  in.response_len = n;
  in.mask = ep.mask;
  in.ref_logps = ep.logp_ref;
  in.tree = tree ? &*tree : nullptr;
  Segmentation seg = segment(cfg_.rule(), in, rng);

  MacroBatch mb;
  mb.macro_values = aggregate_values(ep.values_old, ep.mask, seg, cfg_.sigma);
  mb.macro_rewards = aggregate_rewards(ep.rewards, ep.mask, seg, cfg_.reward_agg);
  GaeResult gae = macro_gae(mb.macro_rewards, mb.macro_values, cfg_.ppo.gamma, cfg_.ppo.lam);
  mb.advantages = std::move(gae.advantages);
  mb.returns = std::move(gae.returns);
  return Experience{std::move(ep), std::move(seg), std::move(mb)};
}

std::vector<Experience> Trainer::make_experience(std::span<const Prompt> batch,
                                                 const PolicyParams& params,
                                                 const PolicyParams& reference,
                                                 std::uint64_t stream,
                                                 std::size_t* dropped) const {
  const std::size_t total = batch.size() * cfg_.rollout;
  std::vector<std::optional<Experience>> slots(total);
  auto work = [&](std::size_t k) {
    const Prompt& prompt = batch[k / cfg_.rollout];
    Rng rng(derive_seed({stream, kTagTrainSample, k}));
    try {
      Sample s = sample(params, prompt.tokens, cfg_.sampler, rng);
      slots[k] = build_experience(prompt, std::move(s.response), params, reference, rng);
    } catch (const Error& e) {
      if (log_) *log_ << "dropped episode " << k << ": " << e.what() << "\n";
    }
  };
  const std::size_t threads = std::min(cfg_.threads, std::max<std::size_t>(1, total));
  if (threads <= 1) {
    for (std::size_t k = 0; k < total; ++k) work(k);
  } else {
    // Each episode owns its random stream, so results do not depend on the
    // thread count or scheduling.
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < total; k += threads) work(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  std::vector<Experience> out;
  out.reserve(total);
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  if (dropped) *dropped = total - out.size();
  return out;
}

StepStats Trainer::optimize_step(std::span<const Experience> experience, PolicyParams& params) {
  StepStats stats;
  if (experience.empty()) return stats;

  std::vector<std::vector<double>> advantages;
  advantages.reserve(experience.size());
  for (const auto& e : experience) advantages.push_back(e.macro.advantages);
  if (cfg_.ppo.whiten) {
    std::vector<double> flat;
    for (const auto& a : advantages) flat.insert(flat.end(), a.begin(), a.end());
    whiten(flat);
    std::size_t k = 0;
    for (auto& a : advantages) {
      for (auto& x : a) x = flat[k++];
    }
  }

  // Critic gradients are folded into the policy step by the learning-rate
  // ratio so one backward pass serves both losses.
  const bool policy_step = cfg_.lr_policy > 0.0;
  const double lr = policy_step ? cfg_.lr_policy : cfg_.lr_critic;
  const double policy_weight = policy_step ? 1.0 : 0.0;
  const double critic_weight = policy_step ? cfg_.lr_critic / cfg_.lr_policy : 1.0;
  const double batch_weight = 1.0 / static_cast<double>(experience.size());

  PolicyParams grad = PolicyParams::zeros_like(params);
  for (std::size_t epoch = 0; epoch < cfg_.ppo_epochs; ++epoch) {
    grad.set_zero();
    double policy_total = 0.0;
    double critic_total = 0.0;
    try {
      for (std::size_t k = 0; k < experience.size(); ++k) {
        const Episode& ep = experience[k].episode;
        const Segmentation& seg = experience[k].segmentation;
        const MacroBatch& mb = experience[k].macro;
        const std::size_t start = ep.prompt.tokens.size() - 1;
        const std::size_t n = ep.response.size();
        const std::vector<double>& adv = advantages[k];
        auto loss = [&](const SequenceOutputs& out, std::vector<double>& dlogps,
                        std::vector<double>& dvalues) {
          const std::span<const double> logp_new(out.logps.data() + start, n);
          const std::span<const double> values_new(out.values.data() + start, n);
          const auto pl = ma_policy_loss(logp_new, ep.logp_old, adv, ep.mask, seg,
                                         cfg_.ppo.clip, cfg_.ppo.ratio_mode);
          const auto cl = ma_critic_loss(values_new, ep.values_old, mb.returns, ep.mask, seg,
                                         cfg_.ppo.value_clip);
          for (std::size_t i = 0; i < n; ++i) {
            dlogps[start + i] = batch_weight * policy_weight * pl.grad[i];
            dvalues[start + i] = batch_weight * critic_weight * cl.grad[i];
          }
          policy_total += pl.loss;
          critic_total += cl.loss;
          return pl.loss + cl.loss;
        };
        accumulate_gradient(params, ep.sequence(), loss, grad);
      }
    } catch (const NonFiniteError& e) {
      if (log_) *log_ << "update aborted: " << e.what() << "\n";
      stats.aborted = true;
      return stats;
    }
    if (!grad.all_finite()) {
      if (log_) *log_ << "update aborted: non-finite gradient\n";
      stats.aborted = true;
      return stats;
    }
    const double norm = std::sqrt(grad.squared_norm());
    if (epoch == 0) {
      stats.policy_loss = policy_total * batch_weight;
      stats.critic_loss = critic_total * batch_weight;
      stats.grad_norm = norm;
    }
    if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) grad.scale(cfg_.grad_clip / norm);
    if (cfg_.optimizer == OptimizerKind::Adam) {
      opt_->adam.step(params, grad, lr);
    } else {
      opt_->sgd.step(params, grad, lr);
    }
  }
  return stats;
}

std::uint64_t eval_sample_seed(std::uint64_t stream, std::size_t k) {
  return derive_seed({stream, kTagEvalSample, k});
}

std::uint64_t checkpoint_eval_stream(std::uint64_t seed) {
  return derive_seed({seed, kTagEvalSample});
}

EvalResult Trainer::evaluate(const PolicyParams& params, const RewardModel& rm,
                             std::span<const Prompt> prompts, const SamplerConfig& sampler,
                             std::uint64_t stream) const {
  EvalResult r;
  r.scores.resize(prompts.size());
  std::vector<std::size_t> lengths(prompts.size());
  auto work = [&](std::size_t k) {
    Rng rng(eval_sample_seed(stream, k));
    const Sample s = sample(params, prompts[k].tokens, sampler, rng);
    r.scores[k] = rm.score(prompts[k], s.response);
    lengths[k] = s.response.size();
  };
  const std::size_t threads = std::min(cfg_.threads, std::max<std::size_t>(1, prompts.size()));
  if (threads <= 1) {
    for (std::size_t k = 0; k < prompts.size(); ++k) work(k);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t k = w; k < prompts.size(); k += threads) work(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  if (prompts.empty()) return r;
  double sum = 0.0;
  double len = 0.0;
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    sum += r.scores[k];
    len += static_cast<double>(lengths[k]);
  }
  r.mean = sum / static_cast<double>(prompts.size());
  r.mean_length = len / static_cast<double>(prompts.size());
  r.p10 = percentile(r.scores, 0.1);
  r.p50 = percentile(r.scores, 0.5);
  r.p90 = percentile(r.scores, 0.9);
  return r;
}

RunResult Trainer::run() {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult result;
  reset_optimizer();
  result.sft = sft(initial_params());
  const PolicyParams& reference = result.sft;
  result.reference_hash_start = reference.hash();
  PolicyParams params = result.sft;
  const std::uint64_t eval_stream = derive_seed({cfg_.seed, kTagEvalSample});
  if (log_) {
    *log_ << "sft done; reference hash " << std::hex << result.reference_hash_start << std::dec
          << "; rule " << describe(cfg_.rule()) << "\n";
  }

  for (std::size_t update = 0; update <= cfg_.total_updates; ++update) {
    const std::uint64_t stream = derive_seed({cfg_.seed, kTagTrainPrompts, update});
    const auto batch = prompts(stream, cfg_.batch_size);
    std::size_t dropped = 0;
    const auto experience = make_experience(batch, params, reference, stream, &dropped);
    result.dropped_episodes += dropped;

    double kl = 0.0;
    if (!experience.empty()) {
      for (const auto& e : experience) kl += e.episode.kl();
      kl /= static_cast<double>(experience.size());
    }

    const bool eval_point = update % cfg_.eval_interval == 0 || update == cfg_.total_updates;
    const bool kl_stop = cfg_.kl_ceiling > 0.0 && kl > cfg_.kl_ceiling;
    // The record for `update` describes the parameters that produced this
    // batch, so evaluate before stepping.
    std::optional<EvalResult> ev;
    if (eval_point || kl_stop) {
      ev = evaluate(params, *programmatic_, eval_prompts_, cfg_.sampler, eval_stream);
    }
    StepStats stats;
    if (update < cfg_.total_updates && !kl_stop) {
      stats = optimize_step(experience, params);
      if (stats.aborted) ++result.aborted_updates;
    }

    if (ev) {
      MetricsRecord rec;
      rec.update = update;
      rec.eval_mean = ev->mean;
      rec.eval_p10 = ev->p10;
      rec.eval_p50 = ev->p50;
      rec.eval_p90 = ev->p90;
      rec.kl = kl;
      rec.policy_loss = stats.policy_loss;
      rec.critic_loss = stats.critic_loss;
      if (!experience.empty()) {
        double adv = 0.0, ret = 0.0, len = 0.0, macros = 0.0, score = 0.0;
        for (const auto& e : experience) {
          const DiagNorms dn = diag_norms(e.macro.advantages, e.macro.returns);
          adv += dn.advantage;
          ret += dn.ret;
          len += static_cast<double>(e.episode.response.size());
          macros += static_cast<double>(e.macro.size());
          score += e.episode.score;
        }
        const double m = static_cast<double>(experience.size());
        rec.adv_norm = adv / m;
        rec.return_norm = ret / m;
        rec.response_length = len / m;
        rec.macro_count = macros / m;
        rec.train_score = score / m;
      }
      if (cfg_.log_wall_clock) {
        rec.wall_clock =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
      if (log_) {
        *log_ << "update " << update << " eval " << ev->mean << " train " << rec.train_score
              << " kl " << kl << " |A| " << rec.adv_norm << " len " << rec.response_length
              << "\n";
      }
      result.metrics.push_back(rec);
      result.eval_scores.push_back(ev->scores);
    }
    if (kl_stop) {
      if (log_) *log_ << "mean KL " << kl << " exceeds ceiling; stopping\n";
      result.stopped_on_kl = true;
      break;
    }
  }
  result.reference_hash_end = reference.hash();
  result.final_params = std::move(params);
  return result;
}

void write_run(const std::string& dir, const TrainConfig& cfg, const RunResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "checkpoints");
  {
    std::ofstream out(fs::path(dir) / "config.json");
    out << to_json(cfg).dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "metrics.jsonl");
    for (const auto& r : result.metrics) out << to_json(r).dump() << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "metrics.csv");
    out << csv_header() << "\n";
    for (const auto& r : result.metrics) out << to_csv_row(r) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "scores.jsonl");
    for (std::size_t i = 0; i < result.metrics.size(); ++i) {
      nlohmann::ordered_json j;
      j["update"] = result.metrics[i].update;
      j["scores"] = result.eval_scores[i];
      out << j.dump() << "\n";
    }
  }
  save_checkpoint(result.sft, (fs::path(dir) / "checkpoints" / "sft.ckpt").string());
  save_checkpoint(result.final_params, (fs::path(dir) / "checkpoints" / "final.ckpt").string());
}

}  // namespace marlhf
