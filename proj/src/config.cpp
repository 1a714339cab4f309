#include "marlhf/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include "marlhf/errors.hpp"

namespace marlhf {
namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    s = s.substr(1, s.size() - 2);
  }
  return s;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError(key, "expected a non-negative integer, got '" + v + "'");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key, "expected a number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError(key, "expected true/false, got '" + v + "'");
}

template <typename E>
E parse_enum(const std::string& key, const std::string& v,
             const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [n, e] : names) {
    if (n == v) return e;
  }
  std::string allowed;
  for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
  throw ConfigError(key, "expected one of " + allowed + ", got '" + v + "'");
}

template <typename E>
std::string enum_name(E e, const std::vector<std::pair<std::string, E>>& names) {
  for (const auto& [n, x] : names) {
    if (x == e) return n;
  }
  return "?";
}

std::string fmt_double(double d) {
  if (std::isinf(d)) return "inf";
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

const std::vector<std::pair<std::string, TaskKind>> kTasks = {
    {"noisy_copy", TaskKind::NoisyCopy}, {"bracket", TaskKind::BracketLang}};
const std::vector<std::pair<std::string, TerminationKind>> kTerminations = {
    {"fixed", TerminationKind::Fixed},
    {"random", TerminationKind::Random},
    {"ppl", TerminationKind::Perplexity},
    {"parsing", TerminationKind::Parsing}};
const std::vector<std::pair<std::string, PerplexityMode>> kPplModes = {
    {"prefix", PerplexityMode::Prefix}, {"macro", PerplexityMode::Macro}};
const std::vector<std::pair<std::string, SigmaAssignment>> kSigmas = {
    {"equal", SigmaAssignment::Equal},
    {"unit", SigmaAssignment::Unit},
    {"decayed", SigmaAssignment::PositionDecayed}};
const std::vector<std::pair<std::string, RewardAggregation>> kRewardAggs = {
    {"mean", RewardAggregation::MaskedMean}, {"sum", RewardAggregation::Sum}};
const std::vector<std::pair<std::string, RatioMode>> kRatioModes = {
    {"token", RatioMode::PerToken}, {"macro", RatioMode::JointMacro}};
const std::vector<std::pair<std::string, OptimizerKind>> kOptimizers = {
    {"sgd", OptimizerKind::Sgd}, {"adam", OptimizerKind::Adam}};

struct Entry {
  ConfigKey key;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

Entry size_entry(std::string name, std::string help, std::size_t TrainConfig::*field) {
  return {{name, std::move(help)},
          [field](const TrainConfig& c) { return std::to_string(c.*field); },
          [field, name](TrainConfig& c, const std::string& v) { c.*field = parse_size(name, v); }};
}

Entry double_entry(std::string name, std::string help, std::function<double&(TrainConfig&)> ref) {
  return {{name, std::move(help)},
          [ref](const TrainConfig& c) { return fmt_double(ref(const_cast<TrainConfig&>(c))); },
          [ref, name](TrainConfig& c, const std::string& v) { ref(c) = parse_double(name, v); }};
}

Entry sizeref_entry(std::string name, std::string help,
                    std::function<std::size_t&(TrainConfig&)> ref) {
  return {{name, std::move(help)},
          [ref](const TrainConfig& c) { return std::to_string(ref(const_cast<TrainConfig&>(c))); },
          [ref, name](TrainConfig& c, const std::string& v) { ref(c) = parse_size(name, v); }};
}

Entry bool_entry(std::string name, std::string help, std::function<bool&(TrainConfig&)> ref) {
  return {{name, std::move(help)},
          [ref](const TrainConfig& c) {
            return std::string(ref(const_cast<TrainConfig&>(c)) ? "true" : "false");
          },
          [ref, name](TrainConfig& c, const std::string& v) { ref(c) = parse_bool(name, v); }};
}

template <typename E>
Entry enum_entry(std::string name, std::string help,
                 const std::vector<std::pair<std::string, E>>& names,
                 std::function<E&(TrainConfig&)> ref) {
  std::string allowed;
  for (const auto& [n, e] : names) allowed += (allowed.empty() ? "" : "|") + n;
  return {{name, help + " (" + allowed + ")"},
          [ref, &names](const TrainConfig& c) {
            return enum_name(ref(const_cast<TrainConfig&>(c)), names);
          },
          [ref, &names, name](TrainConfig& c, const std::string& v) {
            ref(c) = parse_enum(name, v, names);
          }};
}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = [] {
    std::vector<Entry> t;
    t.push_back(enum_entry<TaskKind>("task", "environment", kTasks,
                                     [](TrainConfig& c) -> TaskKind& { return c.task; }));
    t.push_back(double_entry("brevity_penalty", "noisy_copy penalty per extra token",
                             [](TrainConfig& c) -> double& { return c.noisy_copy.brevity_penalty; }));
    t.push_back(sizeref_entry("min_items", "noisy_copy minimum prompt symbols",
                              [](TrainConfig& c) -> std::size_t& { return c.noisy_copy.min_items; }));
    t.push_back(sizeref_entry("max_items", "noisy_copy maximum prompt symbols",
                              [](TrainConfig& c) -> std::size_t& { return c.noisy_copy.max_items; }));
    t.push_back(sizeref_entry("min_marked", "noisy_copy minimum marked symbols",
                              [](TrainConfig& c) -> std::size_t& { return c.noisy_copy.min_marked; }));
    t.push_back(sizeref_entry("max_marked", "noisy_copy maximum marked symbols",
                              [](TrainConfig& c) -> std::size_t& { return c.noisy_copy.max_marked; }));
    t.push_back(sizeref_entry("symbols", "noisy_copy alphabet size",
                              [](TrainConfig& c) -> std::size_t& { return c.noisy_copy.symbols; }));
    t.push_back(sizeref_entry("bracket_depth", "bracket maximum target depth",
                              [](TrainConfig& c) -> std::size_t& { return c.bracket.max_depth; }));
    t.push_back(sizeref_entry("bracket_groups", "bracket maximum target groups",
                              [](TrainConfig& c) -> std::size_t& { return c.bracket.max_groups; }));
    t.push_back(bool_entry("learned_rm", "train a reward model on preference pairs",
                           [](TrainConfig& c) -> bool& { return c.learned_rm; }));
    t.push_back(size_entry("rm_pairs", "preference pairs for the learned reward model",
                           &TrainConfig::rm_pairs));
    t.push_back(size_entry("rm_epochs", "learned reward model epochs", &TrainConfig::rm_epochs));
    t.push_back(double_entry("rm_lr", "learned reward model learning rate",
                             [](TrainConfig& c) -> double& { return c.rm_lr; }));

    t.push_back(enum_entry<TerminationKind>(
        "termination", "macro-action termination rule", kTerminations,
        [](TrainConfig& c) -> TerminationKind& { return c.termination; }));
    t.push_back({{"ngram", "fixed n-gram length, or inf for the whole response"},
                 [](const TrainConfig& c) {
                   return c.ngram == FixedNGram::kWhole ? std::string("inf")
                                                        : std::to_string(c.ngram);
                 },
                 [](TrainConfig& c, const std::string& v) {
                   c.ngram = v == "inf" ? FixedNGram::kWhole : parse_size("ngram", v);
                 }});
    t.push_back({{"random_lengths", "randomized n-gram length list, comma separated"},
                 [](const TrainConfig& c) {
                   std::string s;
                   for (auto l : c.random_lengths) s += (s.empty() ? "" : ",") + std::to_string(l);
                   return s;
                 },
                 [](TrainConfig& c, const std::string& v) {
                   std::vector<std::size_t> out;
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) {
                     out.push_back(parse_size("random_lengths", trim(item)));
                   }
                   c.random_lengths = out;
                 }});
    t.push_back(size_entry("random_repeats", "randomized n-gram list repeats",
                           &TrainConfig::random_repeats));
    t.push_back(size_entry("parsing_cutoff", "parsing rule cutoff C", &TrainConfig::parsing_cutoff));
    t.push_back(enum_entry<PerplexityMode>(
        "ppl_mode", "perplexity rule variant", kPplModes,
        [](TrainConfig& c) -> PerplexityMode& { return c.ppl_mode; }));
    t.push_back(enum_entry<SigmaAssignment>(
        "sigma", "macro value weights", kSigmas,
        [](TrainConfig& c) -> SigmaAssignment& { return c.sigma; }));
    t.push_back(enum_entry<RewardAggregation>(
        "reward_agg", "macro reward aggregation", kRewardAggs,
        [](TrainConfig& c) -> RewardAggregation& { return c.reward_agg; }));

    t.push_back(double_entry("clip", "policy ratio clip epsilon",
                             [](TrainConfig& c) -> double& { return c.ppo.clip; }));
    t.push_back(double_entry("value_clip", "critic value clip",
                             [](TrainConfig& c) -> double& { return c.ppo.value_clip; }));
    t.push_back(double_entry("gamma", "GAE discount",
                             [](TrainConfig& c) -> double& { return c.ppo.gamma; }));
    t.push_back(double_entry("lam", "GAE lambda", [](TrainConfig& c) -> double& { return c.ppo.lam; }));
    t.push_back(double_entry("kl_coef", "KL penalty coefficient beta",
                             [](TrainConfig& c) -> double& { return c.ppo.kl_coef; }));
    t.push_back(enum_entry<RatioMode>("ratio_mode", "importance ratio granularity", kRatioModes,
                                      [](TrainConfig& c) -> RatioMode& { return c.ppo.ratio_mode; }));
    t.push_back(bool_entry("whiten", "whiten advantages per batch",
                           [](TrainConfig& c) -> bool& { return c.ppo.whiten; }));

    t.push_back(double_entry("temperature", "sampling temperature",
                             [](TrainConfig& c) -> double& { return c.sampler.temperature; }));
    t.push_back(sizeref_entry("top_k", "top-k filter, 0 disables",
                              [](TrainConfig& c) -> std::size_t& { return c.sampler.top_k; }));
    t.push_back(double_entry("top_p", "nucleus filter",
                             [](TrainConfig& c) -> double& { return c.sampler.top_p; }));
    t.push_back(sizeref_entry("max_len", "maximum response tokens",
                              [](TrainConfig& c) -> std::size_t& { return c.sampler.max_len; }));

    t.push_back(sizeref_entry("embed_dim", "token embedding width",
                              [](TrainConfig& c) -> std::size_t& { return c.model.embed; }));
    t.push_back(sizeref_entry("hidden_dim", "GRU hidden width",
                              [](TrainConfig& c) -> std::size_t& { return c.model.hidden; }));
    t.push_back(sizeref_entry("layers", "GRU layers (1 or 2)",
                              [](TrainConfig& c) -> std::size_t& { return c.model.layers; }));
    t.push_back(bool_entry("separate_critic", "critic uses its own trunk",
                           [](TrainConfig& c) -> bool& { return c.model.separate_critic; }));

    t.push_back(size_entry("batch_size", "prompts per update", &TrainConfig::batch_size));
    t.push_back(size_entry("rollout", "responses per prompt", &TrainConfig::rollout));
    t.push_back(size_entry("ppo_epochs", "optimization passes per batch", &TrainConfig::ppo_epochs));
    t.push_back(double_entry("lr_policy", "policy learning rate",
                             [](TrainConfig& c) -> double& { return c.lr_policy; }));
    t.push_back(double_entry("lr_critic", "critic learning rate",
                             [](TrainConfig& c) -> double& { return c.lr_critic; }));
    t.push_back(double_entry("momentum", "SGD momentum",
                             [](TrainConfig& c) -> double& { return c.momentum; }));
    t.push_back(enum_entry<OptimizerKind>(
        "optimizer", "PPO optimizer", kOptimizers,
        [](TrainConfig& c) -> OptimizerKind& { return c.optimizer; }));
    t.push_back(double_entry("grad_clip", "global gradient norm clip, 0 disables",
                             [](TrainConfig& c) -> double& { return c.grad_clip; }));
    t.push_back(double_entry("kl_ceiling", "stop when mean KL exceeds this, 0 disables",
                             [](TrainConfig& c) -> double& { return c.kl_ceiling; }));

    t.push_back(size_entry("sft_examples", "demonstrations for supervised warm start",
                           &TrainConfig::sft_examples));
    t.push_back(size_entry("sft_epochs", "supervised epochs", &TrainConfig::sft_epochs));
    t.push_back(double_entry("sft_lr", "supervised learning rate",
                             [](TrainConfig& c) -> double& { return c.sft_lr; }));

    t.push_back(size_entry("total_updates", "PPO updates", &TrainConfig::total_updates));
    t.push_back(size_entry("eval_interval", "updates between evaluations", &TrainConfig::eval_interval));
    t.push_back(size_entry("eval_size", "held-out prompts per evaluation", &TrainConfig::eval_size));
    t.push_back({{"seed", "master random seed"},
                 [](const TrainConfig& c) { return std::to_string(c.seed); },
                 [](TrainConfig& c, const std::string& v) { c.seed = parse_size("seed", v); }});
    t.push_back(size_entry("threads", "experience collection threads", &TrainConfig::threads));
    t.push_back(bool_entry("log_wall_clock", "record wall-clock seconds in metrics",
                           [](TrainConfig& c) -> bool& { return c.log_wall_clock; }));
    return t;
  }();
  return table;
}

const Entry& find_entry(const std::string& key) {
  for (const auto& e : entries()) {
    if (e.key.name == key) return e;
  }
  throw ConfigError(key, "unknown key");
}

}  // namespace

TerminationRule TrainConfig::rule() const {
  switch (termination) {
    case TerminationKind::Fixed:
      return FixedNGram{ngram};
    case TerminationKind::Random:
      return RandomizedNGram{random_lengths, random_repeats};
    case TerminationKind::Perplexity:
      return Perplexity{ppl_mode};
    case TerminationKind::Parsing:
      return Parsing{parsing_cutoff};
  }
  return FixedNGram{ngram};
}

void validate(const TrainConfig& cfg) {
  auto require = [](bool ok, const char* key, const char* msg) {
    if (!ok) throw ConfigError(key, msg);
  };
  require(cfg.ngram >= 1, "ngram", "must be >= 1");
  require(!cfg.random_lengths.empty(), "random_lengths", "must not be empty");
  for (auto l : cfg.random_lengths) require(l >= 1, "random_lengths", "entries must be >= 1");
  require(cfg.random_repeats >= 1, "random_repeats", "must be >= 1");
  require(cfg.parsing_cutoff >= 2, "parsing_cutoff", "must be >= 2");
  require(cfg.ppo.clip > 0.0, "clip", "must be > 0");
  require(cfg.ppo.value_clip > 0.0, "value_clip", "must be > 0");
  require(cfg.ppo.gamma >= 0.0 && cfg.ppo.gamma <= 1.0, "gamma", "must be in [0,1]");
  require(cfg.ppo.lam >= 0.0 && cfg.ppo.lam <= 1.0, "lam", "must be in [0,1]");
  require(cfg.ppo.kl_coef >= 0.0, "kl_coef", "must be >= 0");
  require(cfg.sampler.temperature >= 0.0, "temperature", "must be >= 0");
  require(cfg.sampler.top_p > 0.0 && cfg.sampler.top_p <= 1.0, "top_p", "must be in (0,1]");
  require(cfg.sampler.max_len >= 1 && cfg.sampler.max_len <= 64, "max_len", "must be in [1,64]");
  require(cfg.model.embed >= 1 && cfg.model.embed <= 64, "embed_dim", "must be in [1,64]");
  require(cfg.model.hidden >= 1 && cfg.model.hidden <= 64, "hidden_dim", "must be in [1,64]");
  require(cfg.model.layers >= 1 && cfg.model.layers <= 2, "layers", "must be 1 or 2");
  require(cfg.batch_size >= 1, "batch_size", "must be >= 1");
  require(cfg.rollout >= 1, "rollout", "must be >= 1");
  require(cfg.ppo_epochs >= 1, "ppo_epochs", "must be >= 1");
  require(cfg.lr_policy >= 0.0, "lr_policy", "must be >= 0");
  require(cfg.lr_critic >= 0.0, "lr_critic", "must be >= 0");
  require(cfg.momentum >= 0.0 && cfg.momentum < 1.0, "momentum", "must be in [0,1)");
  require(cfg.grad_clip >= 0.0, "grad_clip", "must be >= 0");
  require(cfg.kl_ceiling >= 0.0, "kl_ceiling", "must be >= 0");
  require(cfg.sft_examples >= 1, "sft_examples", "must be >= 1");
  require(cfg.eval_interval >= 1, "eval_interval", "must be >= 1");
  require(cfg.eval_size >= 1, "eval_size", "must be >= 1");
  require(cfg.threads >= 1, "threads", "must be >= 1");
  require(cfg.rm_pairs >= 1, "rm_pairs", "must be >= 1");
  try {
    Task(cfg.task, cfg.noisy_copy, cfg.bracket);
  } catch (const InvalidArgumentError& e) {
    throw ConfigError("task", e.what());
  }
}

void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  find_entry(key).set(cfg, trim(value));
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) {
    throw ConfigError(trim(assignment), "override must look like key=value");
  }
  set_config_value(cfg, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string get_config_value(const TrainConfig& cfg, const std::string& key) {
  return find_entry(key).get(cfg);
}

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> k;
    for (const auto& e : entries()) k.push_back(e.key);
    return k;
  }();
  return keys;
}

nlohmann::json to_json(const TrainConfig& cfg) {
  nlohmann::ordered_json j;
  for (const auto& e : entries()) j[e.key.name] = e.get(cfg);
  return nlohmann::json::parse(j.dump());
}

TrainConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  TrainConfig cfg;
  for (const auto& [key, value] : j.items()) {
    std::string text;
    if (value.is_string()) {
      text = value.get<std::string>();
    } else if (value.is_boolean()) {
      text = value.get<bool>() ? "true" : "false";
    } else if (value.is_number_unsigned()) {
      text = std::to_string(value.get<std::uint64_t>());
    } else if (value.is_number_integer()) {
      text = std::to_string(value.get<std::int64_t>());
    } else if (value.is_number()) {
      text = fmt_double(value.get<double>());
    } else if (value.is_array()) {
      for (const auto& x : value) text += (text.empty() ? "" : ",") + x.dump();
    } else {
      throw ConfigError(key, "unsupported value type");
    }
    set_config_value(cfg, key, text);
  }
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config file " + path);
  if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".json") == 0) {
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("<file>", std::string("invalid JSON: ") + e.what());
    }
    return config_from_json(j);
  }
  TrainConfig cfg;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    apply_override(cfg, line);
  }
  return cfg;
}

}  // namespace marlhf
