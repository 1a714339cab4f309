#pragma once

// Tiny autoregressive categorical policy with a scalar value head.
//
// Trunk: token embedding followed by 1-2 GRU layers. The policy head maps the
// top hidden state to vocabulary logits; the value head maps it (or the hidden
// state of a separate critic trunk) to a scalar. Everything is evaluated on an
// autodiff tape, so sampling, scoring and training share one code path.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marlhf/autodiff.hpp"
#include "marlhf/rng.hpp"

namespace marlhf {

using Token = int;
using Tokens = std::vector<Token>;

struct ModelConfig {
  std::size_t vocab = 32;
  std::size_t embed = 16;
  std::size_t hidden = 32;
  std::size_t layers = 1;
  bool separate_critic = false;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void validate(const ModelConfig& cfg);

struct Tensor {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;
};

// Dense parameter set. Also used as a gradient buffer of identical layout.
class PolicyParams {
 public:
  PolicyParams() = default;
  // Random trunk, zero output and value heads: the initial policy is uniform.
  PolicyParams(const ModelConfig& cfg, std::uint64_t seed);

  static PolicyParams zeros_like(const PolicyParams& other);

  const ModelConfig& config() const { return config_; }
  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }
  std::size_t parameter_count() const;

  // Flat views in tensor order, for optimizers and finite differences.
  double& at(std::size_t flat_index);
  double at(std::size_t flat_index) const;

  void set_zero();
  void scale(double c);
  void axpy(double a, const PolicyParams& x);  // this += a * x
  double squared_norm() const;
  bool all_finite() const;
  // FNV-1a over the raw parameter bytes; used for freeze checks.
  std::uint64_t hash() const;

  // Tensor indices, for the model code.
  std::size_t embedding(bool critic) const;
  std::size_t gru(bool critic, std::size_t layer) const;  // first of 10 tensors
  std::size_t output_weight() const { return out_w_; }
  std::size_t value_weight() const { return val_w_; }

  friend bool operator==(const PolicyParams&, const PolicyParams&);

 private:
  void add(std::string name, std::size_t rows, std::size_t cols);

  ModelConfig config_;
  std::vector<Tensor> tensors_;
  std::size_t critic_base_ = 0;
  std::size_t out_w_ = 0;
  std::size_t val_w_ = 0;
};

// Checkpoint: versioned text dump, every array prefixed by name and shape,
// values in hexadecimal floating point so the round trip is exact.
void save_checkpoint(const PolicyParams& params, std::ostream& out);
PolicyParams load_checkpoint(std::istream& in);
void save_checkpoint(const PolicyParams& params, const std::string& path);
PolicyParams load_checkpoint(const std::string& path);

// Incremental evaluation of one token sequence on a tape.
class SequenceEvaluator {
 public:
  // `grad` (same layout as params, may be null) receives gradients on backward().
  SequenceEvaluator(const PolicyParams& params, PolicyParams* grad = nullptr);

  // Feeds the next token; afterwards logits()/log_softmax()/value() describe
  // the distribution over the following token.
  void push(Token token);
  std::size_t length() const { return steps_.size(); }

  std::span<const double> logits(std::size_t position) const;
  std::span<const double> log_softmax(std::size_t position) const;
  double value(std::size_t position) const;

  // Gradient seeds: d loss / d log_softmax(position)[token] and
  // d loss / d value(position).
  void seed_logp(std::size_t position, Token token, double g);
  void seed_value(std::size_t position, double g);
  void backward();

 private:
  struct Step {
    ad::NodeId logits;
    ad::NodeId logp;
    ad::NodeId value;
  };
  struct Trunk {
    ad::NodeId embedding;
    std::vector<std::array<ad::NodeId, 10>> layers;
    std::vector<ad::NodeId> state;
  };
  Trunk bind_trunk(bool critic);
  ad::NodeId advance(Trunk& trunk, Token token);

  const PolicyParams& params_;
  PolicyParams* grad_;
  ad::Tape tape_;
  Trunk policy_;
  std::optional<Trunk> critic_;
  ad::NodeId out_w_, out_b_, val_w_, val_b_;
  std::vector<Step> steps_;
};

struct ForwardResult {
  std::vector<std::vector<double>> logits;  // one row per input position
  std::vector<double> values;
};

ForwardResult forward(const PolicyParams& params, std::span<const Token> tokens);

// logp[t] = log softmax(logits[t])[tokens[t+1]]; length tokens.size() - 1.
std::vector<double> log_probs(std::span<const Token> tokens, const PolicyParams& params);

// Per-position outputs needed by the losses.
struct SequenceOutputs {
  std::vector<double> logps;   // size L-1, logp of token t+1 given tokens <= t
  std::vector<double> values;  // size L, value of the state after token t
};

// Loss over one sequence's outputs. Fills d loss / d logps and d loss / d values
// (already sized) and returns the loss.
using OutputLoss = std::function<double(const SequenceOutputs& out, std::vector<double>& dlogps,
                                        std::vector<double>& dvalues)>;

// Runs forward on a tape, evaluates `loss`, backpropagates into `grad`
// (accumulating). Throws NonFiniteError on a NaN/Inf loss.
double accumulate_gradient(const PolicyParams& params, std::span<const Token> tokens,
                           const OutputLoss& loss, PolicyParams& grad);

struct SamplerConfig {
  double temperature = 0.8;
  std::size_t top_k = 50;  // 0 disables
  double top_p = 1.0;
  std::size_t max_len = 24;
  Token eos = 3;
};

void validate(const SamplerConfig& cfg);

struct Sample {
  Tokens response;
  std::vector<double> logps;   // untempered policy log-probabilities of each response token
};

// Temperature scaling, then top-k, then top-p, renormalize, draw. A
// temperature <= 1e-6 decodes greedily. Stops after eos or max_len tokens.
Sample sample(const PolicyParams& params, std::span<const Token> prompt,
              const SamplerConfig& cfg, Rng& rng);

// Sampling distribution for one logits row after temperature/top-k/top-p.
std::vector<double> sampling_distribution(std::span<const double> logits,
                                          const SamplerConfig& cfg);

struct Demonstration {
  Tokens tokens;            // prompt followed by the response
  std::size_t prompt_len = 0;
};

// Mean negative log-likelihood of the response tokens.
double sft_loss(const PolicyParams& params, std::span<const Demonstration> demos);

struct SftConfig {
  std::size_t epochs = 4;
  double lr = 1e-2;
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
};

// Adam on the response-token NLL. Returns the trained parameters.
PolicyParams sft_train(const PolicyParams& init, std::span<const Demonstration> demos,
                       const SftConfig& cfg);

}  // namespace marlhf
