#include "marlhf/policy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "marlhf/errors.hpp"
#include "marlhf/optimizer.hpp"

namespace marlhf {
namespace {

constexpr std::size_t kGruTensors = 10;
constexpr const char* kGruNames[kGruTensors] = {"w_z", "u_z", "b_z", "w_r", "u_r",
                                                "b_r", "w_n", "u_n", "b_n", "b_un"};
constexpr const char* kCheckpointMagic = "marlhf-checkpoint";
constexpr int kCheckpointVersion = 1;

}  // namespace

void validate(const ModelConfig& cfg) {
  if (cfg.vocab < 2 || cfg.vocab > 64) throw InvalidArgumentError("vocab must be in [2, 64]");
  if (cfg.embed < 1 || cfg.embed > 64) throw InvalidArgumentError("embed must be in [1, 64]");
  if (cfg.hidden < 1 || cfg.hidden > 64) throw InvalidArgumentError("hidden must be in [1, 64]");
  if (cfg.layers < 1 || cfg.layers > 2) throw InvalidArgumentError("layers must be 1 or 2");
}

void PolicyParams::add(std::string name, std::size_t rows, std::size_t cols) {
  tensors_.push_back(Tensor{std::move(name), rows, cols, std::vector<double>(rows * cols, 0.0)});
}

PolicyParams::PolicyParams(const ModelConfig& cfg, std::uint64_t seed) : config_(cfg) {
  validate(cfg);
  auto add_trunk = [&](const std::string& prefix) {
    add(prefix + "embedding", cfg.vocab, cfg.embed);
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      const std::size_t in = l == 0 ? cfg.embed : cfg.hidden;
      const std::string p = prefix + "gru" + std::to_string(l) + ".";
      for (std::size_t g = 0; g < 3; ++g) {
        add(p + kGruNames[3 * g], cfg.hidden, in);
        add(p + kGruNames[3 * g + 1], cfg.hidden, cfg.hidden);
        add(p + kGruNames[3 * g + 2], cfg.hidden, 1);
      }
      add(p + kGruNames[9], cfg.hidden, 1);
    }
  };
  add_trunk("policy.");
  critic_base_ = tensors_.size();
  if (cfg.separate_critic) add_trunk("critic.");
  out_w_ = tensors_.size();
  add("head.out_w", cfg.vocab, cfg.hidden);
  add("head.out_b", cfg.vocab, 1);
  val_w_ = tensors_.size();
  add("head.value_w", 1, cfg.hidden);
  add("head.value_b", 1, 1);

  Rng rng(seed);
  for (std::size_t k = 0; k < out_w_; ++k) {
    Tensor& t = tensors_[k];
    if (t.cols == 1) continue;  // biases start at zero
    const bool is_embedding = t.name.ends_with("embedding");
    const double scale = is_embedding ? 1.0 : 1.0 / std::sqrt(static_cast<double>(t.cols));
    for (auto& x : t.data) x = scale * rng.normal();
  }
}

PolicyParams PolicyParams::zeros_like(const PolicyParams& other) {
  PolicyParams p = other;
  p.set_zero();
  return p;
}

std::size_t PolicyParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors_) n += t.data.size();
  return n;
}

double& PolicyParams::at(std::size_t flat) {
  for (auto& t : tensors_) {
    if (flat < t.data.size()) return t.data[flat];
    flat -= t.data.size();
  }
  throw ShapeError("flat parameter index out of range");
}

double PolicyParams::at(std::size_t flat) const {
  return const_cast<PolicyParams*>(this)->at(flat);
}

void PolicyParams::set_zero() {
  for (auto& t : tensors_) std::fill(t.data.begin(), t.data.end(), 0.0);
}

void PolicyParams::scale(double c) {
  for (auto& t : tensors_) {
    for (auto& x : t.data) x *= c;
  }
}

void PolicyParams::axpy(double a, const PolicyParams& x) {
  if (x.tensors_.size() != tensors_.size()) throw ShapeError("parameter layout mismatch");
  for (std::size_t k = 0; k < tensors_.size(); ++k) {
    auto& d = tensors_[k].data;
    const auto& s = x.tensors_[k].data;
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += a * s[i];
  }
}

double PolicyParams::squared_norm() const {
  double s = 0.0;
  for (const auto& t : tensors_) {
    for (double x : t.data) s += x * x;
  }
  return s;
}

bool PolicyParams::all_finite() const {
  for (const auto& t : tensors_) {
    for (double x : t.data) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

std::uint64_t PolicyParams::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& t : tensors_) {
    for (double x : t.data) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &x, sizeof(double));
      for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

std::size_t PolicyParams::embedding(bool critic) const { return critic ? critic_base_ : 0; }

std::size_t PolicyParams::gru(bool critic, std::size_t layer) const {
  return embedding(critic) + 1 + layer * kGruTensors;
}

bool operator==(const PolicyParams& a, const PolicyParams& b) {
  if (!(a.config_ == b.config_) || a.tensors_.size() != b.tensors_.size()) return false;
  for (std::size_t k = 0; k < a.tensors_.size(); ++k) {
    const auto& x = a.tensors_[k];
    const auto& y = b.tensors_[k];
    if (x.name != y.name || x.rows != y.rows || x.cols != y.cols || x.data != y.data) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const PolicyParams& params, std::ostream& out) {
  const auto& c = params.config();
  out << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
  out << "config vocab " << c.vocab << " embed " << c.embed << " hidden " << c.hidden
      << " layers " << c.layers << " separate_critic " << (c.separate_critic ? 1 : 0) << '\n';
  char buf[64];
  for (const auto& t : params.tensors()) {
    out << "tensor " << t.name << ' ' << t.rows << ' ' << t.cols << '\n';
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%a", t.data[i]);
      out << buf << ((i + 1) % 8 == 0 || i + 1 == t.data.size() ? '\n' : ' ');
    }
  }
  out << "end\n";
}

PolicyParams load_checkpoint(std::istream& in) {
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCheckpointMagic) {
    throw InvalidArgumentError("not a checkpoint file");
  }
  if (version != kCheckpointVersion) {
    throw InvalidArgumentError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  std::string word;
  int separate = 0;
  in >> word;
  if (word != "config") throw InvalidArgumentError("checkpoint missing config line");
  std::string k1, k2, k3, k4, k5;
  in >> k1 >> cfg.vocab >> k2 >> cfg.embed >> k3 >> cfg.hidden >> k4 >> cfg.layers >> k5 >>
      separate;
  if (!in || k1 != "vocab" || k2 != "embed" || k3 != "hidden" || k4 != "layers" ||
      k5 != "separate_critic") {
    throw InvalidArgumentError("malformed checkpoint config line");
  }
  cfg.separate_critic = separate != 0;
  PolicyParams params(cfg, 0);
  for (auto& t : params.tensors()) {
    std::string name;
    std::size_t rows = 0, cols = 0;
    in >> word >> name >> rows >> cols;
    if (!in || word != "tensor" || name != t.name || rows != t.rows || cols != t.cols) {
      throw InvalidArgumentError("checkpoint tensor mismatch at " + t.name);
    }
    for (auto& x : t.data) {
      std::string tok;
      in >> tok;
      char* end = nullptr;
      x = std::strtod(tok.c_str(), &end);
      if (tok.empty() || end != tok.c_str() + tok.size()) {
        throw InvalidArgumentError("malformed value in tensor " + t.name);
      }
    }
  }
  in >> word;
  if (word != "end") throw InvalidArgumentError("checkpoint has trailing data");
  return params;
}

void save_checkpoint(const PolicyParams& params, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write checkpoint " + path);
  save_checkpoint(params, out);
}

PolicyParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read checkpoint " + path);
  return load_checkpoint(in);
}

// ---------------------------------------------------------------------------
// Evaluation

SequenceEvaluator::SequenceEvaluator(const PolicyParams& params, PolicyParams* grad)
    : params_(params), grad_(grad) {
  policy_ = bind_trunk(false);
  if (params.config().separate_critic) critic_ = bind_trunk(true);
  auto bind = [&](std::size_t k) {
    const Tensor& t = params_.tensors()[k];
    double* g = grad_ != nullptr ? grad_->tensors()[k].data.data() : nullptr;
    return tape_.parameter(t.data, g, t.rows, t.cols);
  };
  out_w_ = bind(params_.output_weight());
  out_b_ = bind(params_.output_weight() + 1);
  val_w_ = bind(params_.value_weight());
  val_b_ = bind(params_.value_weight() + 1);
}

SequenceEvaluator::Trunk SequenceEvaluator::bind_trunk(bool critic) {
  auto bind = [&](std::size_t k) {
    const Tensor& t = params_.tensors()[k];
    double* g = grad_ != nullptr ? grad_->tensors()[k].data.data() : nullptr;
    return tape_.parameter(t.data, g, t.rows, t.cols);
  };
  Trunk trunk;
  trunk.embedding = bind(params_.embedding(critic));
  const auto& cfg = params_.config();
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    std::array<ad::NodeId, kGruTensors> ids{};
    const std::size_t base = params_.gru(critic, l);
    for (std::size_t k = 0; k < kGruTensors; ++k) ids[k] = bind(base + k);
    trunk.layers.push_back(ids);
    trunk.state.push_back(tape_.constant(std::vector<double>(cfg.hidden, 0.0)));
  }
  return trunk;
}

ad::NodeId SequenceEvaluator::advance(Trunk& trunk, Token token) {
  ad::NodeId x = tape_.row(trunk.embedding, static_cast<std::size_t>(token));
  for (std::size_t l = 0; l < trunk.layers.size(); ++l) {
    const auto& p = trunk.layers[l];
    const ad::NodeId h = trunk.state[l];
    const ad::NodeId z = tape_.sigmoid(tape_.affine(p[2], {{p[0], x}, {p[1], h}}));
    const ad::NodeId r = tape_.sigmoid(tape_.affine(p[5], {{p[3], x}, {p[4], h}}));
    const ad::NodeId nx = tape_.affine(p[8], {{p[6], x}});
    const ad::NodeId nh = tape_.affine(p[9], {{p[7], h}});
    const ad::NodeId n = tape_.tanh(tape_.add(nx, tape_.mul(r, nh)));
    // h' = (1 - z) * n + z * h = n + z * (h - n)
    const ad::NodeId next = tape_.add(n, tape_.mul(z, tape_.sub(h, n)));
    trunk.state[l] = next;
    x = next;
  }
  return x;
}

void SequenceEvaluator::push(Token token) {
  if (token < 0 || static_cast<std::size_t>(token) >= params_.config().vocab) {
    throw InvalidArgumentError("token " + std::to_string(token) + " outside vocabulary");
  }
  const ad::NodeId h = advance(policy_, token);
  const ad::NodeId hv = critic_ ? advance(*critic_, token) : h;
  Step s{};
  s.logits = tape_.affine(out_b_, {{out_w_, h}});
  s.logp = tape_.log_softmax(s.logits);
  s.value = tape_.affine(val_b_, {{val_w_, hv}});
  steps_.push_back(s);
}

std::span<const double> SequenceEvaluator::logits(std::size_t position) const {
  return tape_.value(steps_.at(position).logits);
}

std::span<const double> SequenceEvaluator::log_softmax(std::size_t position) const {
  return tape_.value(steps_.at(position).logp);
}

double SequenceEvaluator::value(std::size_t position) const {
  return tape_.value(steps_.at(position).value)[0];
}

void SequenceEvaluator::seed_logp(std::size_t position, Token token, double g) {
  if (g != 0.0) tape_.seed(steps_.at(position).logp, static_cast<std::size_t>(token), g);
}

void SequenceEvaluator::seed_value(std::size_t position, double g) {
  if (g != 0.0) tape_.seed(steps_.at(position).value, 0, g);
}

void SequenceEvaluator::backward() {
  if (grad_ == nullptr) throw InvalidArgumentError("evaluator has no gradient buffer");
  tape_.backward();
}

ForwardResult forward(const PolicyParams& params, std::span<const Token> tokens) {
  SequenceEvaluator ev(params);
  ForwardResult out;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    ev.push(tokens[t]);
    const auto row = ev.logits(t);
    out.logits.emplace_back(row.begin(), row.end());
    out.values.push_back(ev.value(t));
  }
  return out;
}

std::vector<double> log_probs(std::span<const Token> tokens, const PolicyParams& params) {
  if (tokens.size() < 2) throw InvalidArgumentError("log_probs needs at least two tokens");
  SequenceEvaluator ev(params);
  std::vector<double> out;
  out.reserve(tokens.size() - 1);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    ev.push(tokens[t]);
    if (t + 1 < tokens.size()) {
      out.push_back(ev.log_softmax(t)[static_cast<std::size_t>(tokens[t + 1])]);
    }
  }
  return out;
}

double accumulate_gradient(const PolicyParams& params, std::span<const Token> tokens,
                           const OutputLoss& loss, PolicyParams& grad) {
  if (tokens.size() < 2) throw InvalidArgumentError("gradient needs at least two tokens");
  SequenceEvaluator ev(params, &grad);
  SequenceOutputs out;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    ev.push(tokens[t]);
    out.values.push_back(ev.value(t));
    if (t + 1 < tokens.size()) {
      out.logps.push_back(ev.log_softmax(t)[static_cast<std::size_t>(tokens[t + 1])]);
    }
  }
  std::vector<double> dlogps(out.logps.size(), 0.0);
  std::vector<double> dvalues(out.values.size(), 0.0);
  const double value = loss(out, dlogps, dvalues);
  if (!std::isfinite(value)) throw NonFiniteError("non-finite loss");
  for (std::size_t t = 0; t < dlogps.size(); ++t) ev.seed_logp(t, tokens[t + 1], dlogps[t]);
  for (std::size_t t = 0; t < dvalues.size(); ++t) ev.seed_value(t, dvalues[t]);
  ev.backward();
  return value;
}

// ---------------------------------------------------------------------------
// Sampling

void validate(const SamplerConfig& cfg) {
  if (!(cfg.temperature >= 0.0)) throw InvalidArgumentError("temperature must be >= 0");
  if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0)) throw InvalidArgumentError("top_p must be in (0,1]");
  if (cfg.max_len == 0) throw InvalidArgumentError("max_len must be >= 1");
}

std::vector<double> sampling_distribution(std::span<const double> logits,
                                          const SamplerConfig& cfg) {
  const std::size_t v = logits.size();
  std::vector<double> probs(v, 0.0);
  if (cfg.temperature <= 1e-6) {
    const auto best = std::max_element(logits.begin(), logits.end()) - logits.begin();
    probs[static_cast<std::size_t>(best)] = 1.0;
    return probs;
  }
  // Order by logit, descending; ties keep the lower token id first.
  std::vector<std::size_t> order(v);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  std::size_t keep = v;
  if (cfg.top_k > 0) keep = std::min(keep, cfg.top_k);
  const double mx = logits[order[0]];
  double sum = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    const double p = std::exp((logits[order[i]] - mx) / cfg.temperature);
    probs[order[i]] = p;
    sum += p;
  }
  for (std::size_t i = 0; i < keep; ++i) probs[order[i]] /= sum;
  if (cfg.top_p < 1.0) {
    double cumulative = 0.0;
    std::size_t cut = keep;
    for (std::size_t i = 0; i < keep; ++i) {
      cumulative += probs[order[i]];
      if (cumulative >= cfg.top_p) {
        cut = i + 1;
        break;
      }
    }
    double kept = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
      if (i >= cut) probs[order[i]] = 0.0;
      kept += probs[order[i]];
    }
    for (std::size_t i = 0; i < cut; ++i) probs[order[i]] /= kept;
  }
  return probs;
}

Sample sample(const PolicyParams& params, std::span<const Token> prompt,
              const SamplerConfig& cfg, Rng& rng) {
  if (prompt.empty()) throw InvalidArgumentError("empty prompt");
  SequenceEvaluator ev(params);
  for (Token t : prompt) ev.push(t);
  Sample out;
  while (out.response.size() < cfg.max_len) {
    const std::size_t pos = ev.length() - 1;
    const auto probs = sampling_distribution(ev.logits(pos), cfg);
    double u = rng.uniform();
    std::size_t pick = probs.size();
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      pick = i;  // last positive-probability token catches rounding at u ~ 1
      if (u < probs[i]) break;
      u -= probs[i];
    }
    const auto token = static_cast<Token>(pick);
    out.logps.push_back(ev.log_softmax(pos)[pick]);
    out.response.push_back(token);
    if (token == cfg.eos) break;
    ev.push(token);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

namespace {

OutputLoss nll_loss(std::size_t prompt_len, double weight) {
  return [prompt_len, weight](const SequenceOutputs& out, std::vector<double>& dlogps,
                              std::vector<double>&) {
    double loss = 0.0;
    for (std::size_t t = prompt_len - 1; t < out.logps.size(); ++t) {
      loss -= weight * out.logps[t];
      dlogps[t] = -weight;
    }
    return loss;
  };
}

std::size_t response_tokens(std::span<const Demonstration> demos) {
  std::size_t n = 0;
  for (const auto& d : demos) {
    if (d.prompt_len == 0 || d.tokens.size() <= d.prompt_len) {
      throw InvalidArgumentError("demonstration needs a prompt and a response");
    }
    n += d.tokens.size() - d.prompt_len;
  }
  return n;
}

}  // namespace

double sft_loss(const PolicyParams& params, std::span<const Demonstration> demos) {
  if (demos.empty()) throw EmptyInputError("empty demonstration set");
  const std::size_t count = response_tokens(demos);
  double total = 0.0;
  for (const auto& d : demos) {
    const auto lp = log_probs(d.tokens, params);
    for (std::size_t t = d.prompt_len - 1; t < lp.size(); ++t) total -= lp[t];
  }
  return total / static_cast<double>(count);
}

PolicyParams sft_train(const PolicyParams& init, std::span<const Demonstration> demos,
                       const SftConfig& cfg) {
  if (demos.empty()) throw EmptyInputError("empty demonstration set");
  response_tokens(demos);
  PolicyParams params = init;
  PolicyParams grad = PolicyParams::zeros_like(params);
  Adam adam;
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(demos.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      std::size_t tokens = 0;
      for (std::size_t i = begin; i < end; ++i) {
        const auto& d = demos[order[i]];
        tokens += d.tokens.size() - d.prompt_len;
      }
      grad.set_zero();
      for (std::size_t i = begin; i < end; ++i) {
        const auto& d = demos[order[i]];
        accumulate_gradient(params, d.tokens,
                            nll_loss(d.prompt_len, 1.0 / static_cast<double>(tokens)), grad);
      }
      adam.step(params, grad, cfg.lr);
    }
  }
  return params;
}

}  // namespace marlhf
