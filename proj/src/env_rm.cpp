#include "marlhf/env_rm.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "marlhf/errors.hpp"
#include "marlhf/optimizer.hpp"

namespace marlhf {
namespace {

bool is_open(Token t) { return t == vocab::kOpenRound || t == vocab::kOpenSquare; }
bool is_close(Token t) { return t == vocab::kCloseRound || t == vocab::kCloseSquare; }
Token closer_of(Token open) {
  return open == vocab::kOpenRound ? vocab::kCloseRound : vocab::kCloseSquare;
}

// Parsed bracket program. Items are atoms or groups.
struct Item {
  bool atom = false;
  std::vector<Item> children;
};

// Recursive descent over a well-formed program.
std::vector<Item> parse_items(std::span<const Token> program, std::size_t& pos) {
  std::vector<Item> items;
  while (pos < program.size() && !is_close(program[pos])) {
    if (program[pos] == vocab::kAtom) {
      items.push_back(Item{true, {}});
      ++pos;
      continue;
    }
    ++pos;  // opener
    Item group{false, parse_items(program, pos)};
    ++pos;  // matching closer
    items.push_back(std::move(group));
  }
  return items;
}

std::size_t depth_of(const std::vector<Item>& items) {
  std::size_t d = 0;
  for (const auto& it : items) {
    if (!it.atom) d = std::max(d, 1 + depth_of(it.children));
  }
  return d;
}

// Every group without subgroups holds at least one atom.
bool innermost_have_atoms(const std::vector<Item>& items) {
  for (const auto& it : items) {
    if (it.atom) continue;
    const bool has_group = std::any_of(it.children.begin(), it.children.end(),
                                       [](const Item& c) { return !c.atom; });
    const bool has_atom = std::any_of(it.children.begin(), it.children.end(),
                                      [](const Item& c) { return c.atom; });
    if (!has_group && !has_atom) return false;
    if (!innermost_have_atoms(it.children)) return false;
  }
  return true;
}

ParseNode tree_of(const Item& item) {
  if (item.atom) return ParseNode::leaf();
  std::vector<ParseNode> kids;
  kids.push_back(ParseNode::leaf());
  for (const auto& c : item.children) kids.push_back(tree_of(c));
  kids.push_back(ParseNode::leaf());
  return ParseNode::node(std::move(kids));
}

Tokens random_group(std::size_t depth, Rng& rng) {
  const Token open = rng.uniform() < 0.5 ? vocab::kOpenRound : vocab::kOpenSquare;
  Tokens out{open};
  if (depth <= 1) {
    out.push_back(vocab::kAtom);
  } else {
    const Tokens inner = random_group(depth - 1, rng);
    out.insert(out.end(), inner.begin(), inner.end());
  }
  out.push_back(closer_of(open));
  return out;
}

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

double compiler_reward(CompileStatus status, std::size_t n_pass, std::size_t n_fail) {
  switch (status) {
    case CompileStatus::Compiled: {
      if (n_pass + n_fail == 0) throw InvalidArgumentError("compiled program with no tests");
      const double frac = static_cast<double>(n_pass) / static_cast<double>(n_pass + n_fail);
      return -0.3 + 1.3 * frac;
    }
    case CompileStatus::RuntimeError:
      return -0.6;
    case CompileStatus::CompileError:
      return -1.0;
  }
  return -1.0;
}

bool bracket_well_formed(std::span<const Token> program) {
  std::vector<Token> stack;
  for (Token t : program) {
    if (is_open(t)) {
      stack.push_back(closer_of(t));
    } else if (is_close(t)) {
      if (stack.empty() || stack.back() != t) return false;
      stack.pop_back();
    } else if (t != vocab::kAtom) {
      return false;
    }
  }
  return stack.empty();
}

std::span<const Token> response_content(std::span<const Token> response) {
  const auto it = std::find(response.begin(), response.end(), vocab::kEos);
  return response.first(static_cast<std::size_t>(it - response.begin()));
}

BracketReport run_bracket_program(const Prompt& prompt, std::span<const Token> response) {
  const auto program = response_content(response);
  BracketReport report;
  if (!bracket_well_formed(program)) return report;
  std::size_t pos = 0;
  const auto items = parse_items(program, pos);
  const std::size_t depth = depth_of(items);
  // Empty programs and runaway nesting fail at run time.
  if (items.empty() || depth > prompt.depth + 1) {
    report.status = CompileStatus::RuntimeError;
    return report;
  }
  report.status = CompileStatus::Compiled;
  const std::size_t groups = static_cast<std::size_t>(
      std::count_if(items.begin(), items.end(), [](const Item& i) { return !i.atom; }));
  const bool no_top_atoms =
      std::none_of(items.begin(), items.end(), [](const Item& i) { return i.atom; });
  const bool checks[] = {groups == prompt.groups, depth == prompt.depth,
                         innermost_have_atoms(items), no_top_atoms};
  for (bool ok : checks) (ok ? report.n_pass : report.n_fail) += 1;
  return report;
}

double overlap_f1(std::span<const Token> response, std::span<const Token> gold) {
  if (response.empty() || gold.empty()) return 0.0;
  std::map<Token, long> counts;
  for (Token t : gold) ++counts[t];
  long overlap = 0;
  for (Token t : response) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(response.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

double rm_ranking_loss(double r_plus, double r_minus) { return softplus(-(r_plus - r_minus)); }

Task::Task(TaskKind kind, NoisyCopyConfig copy, BracketConfig bracket)
    : kind_(kind), copy_(copy), bracket_(bracket) {
  if (copy_.min_items == 0 || copy_.min_items > copy_.max_items) {
    throw InvalidArgumentError("noisy copy item bounds invalid");
  }
  if (copy_.min_marked == 0 || copy_.min_marked > copy_.max_marked ||
      copy_.max_marked > copy_.min_items) {
    throw InvalidArgumentError("noisy copy marked bounds invalid");
  }
  if (copy_.symbols < 2 || copy_.symbols > vocab::kSize - vocab::kFirstSymbol) {
    throw InvalidArgumentError("noisy copy symbol count invalid");
  }
  if (bracket_.max_depth < 1 || bracket_.max_depth > 3 || bracket_.max_groups < 1 ||
      bracket_.max_groups > 3) {
    throw InvalidArgumentError("bracket depth/groups must be in [1,3]");
  }
}

std::size_t Task::max_prompt_len() const {
  if (kind_ == TaskKind::BracketLang) return 4;
  return 2 + copy_.max_items + copy_.max_marked;
}

Prompt Task::gen_prompt(Rng& rng) const {
  Prompt p;
  p.kind = kind_;
  p.tokens.push_back(vocab::kBos);
  if (kind_ == TaskKind::NoisyCopy) {
    const auto items = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(copy_.min_items), static_cast<std::int64_t>(copy_.max_items)));
    const auto marked = static_cast<std::size_t>(rng.uniform_int(
        static_cast<std::int64_t>(copy_.min_marked), static_cast<std::int64_t>(copy_.max_marked)));
    std::vector<unsigned char> is_marked(items, 0);
    std::fill(is_marked.begin(), is_marked.begin() + static_cast<std::ptrdiff_t>(marked), 1);
    rng.shuffle(std::span<unsigned char>(is_marked));
    for (std::size_t i = 0; i < items; ++i) {
      const auto sym = static_cast<Token>(
          vocab::kFirstSymbol +
          rng.uniform_int(0, static_cast<std::int64_t>(copy_.symbols) - 1));
      if (is_marked[i]) {
        p.tokens.push_back(vocab::kMark);
        p.gold.push_back(sym);
      }
      p.tokens.push_back(sym);
    }
  } else {
    p.depth = static_cast<std::size_t>(
        rng.uniform_int(1, static_cast<std::int64_t>(bracket_.max_depth)));
    p.groups = static_cast<std::size_t>(
        rng.uniform_int(1, static_cast<std::int64_t>(bracket_.max_groups)));
    p.tokens.push_back(static_cast<Token>(vocab::kDepthBase + p.depth - 1));
    p.tokens.push_back(static_cast<Token>(vocab::kGroupsBase + p.groups - 1));
    // First group reaches the target depth, the rest are at most that deep.
    for (std::size_t g = 0; g < p.groups; ++g) {
      const std::size_t d =
          g == 0 ? p.depth
                 : static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(p.depth)));
      const Tokens group = random_group(d, rng);
      p.gold.insert(p.gold.end(), group.begin(), group.end());
    }
  }
  p.tokens.push_back(vocab::kSep);
  return p;
}

Tokens Task::ideal_response(const Prompt& prompt) const {
  Tokens r = prompt.gold;
  r.push_back(vocab::kEos);
  return r;
}

double Task::score(const Prompt& prompt, std::span<const Token> response) const {
  if (kind_ == TaskKind::BracketLang) {
    const auto rep = run_bracket_program(prompt, response);
    return compiler_reward(rep.status, rep.n_pass, rep.n_fail);
  }
  const auto content = response_content(response);
  const double f1 = overlap_f1(content, prompt.gold);
  const double excess = content.size() > prompt.gold.size()
                            ? static_cast<double>(content.size() - prompt.gold.size())
                            : 0.0;
  return f1 - copy_.brevity_penalty * excess;
}

double Task::score_bound(std::size_t max_len) const {
  if (kind_ == TaskKind::BracketLang) return 1.0;
  return std::max(1.0, copy_.brevity_penalty * static_cast<double>(max_len));
}

std::optional<ParseNode> Task::parse_tree(const Prompt&, std::span<const Token> response) const {
  if (response.empty()) return std::nullopt;
  const auto content = response_content(response);
  std::vector<ParseNode> top;
  if (kind_ == TaskKind::BracketLang) {
    if (!bracket_well_formed(content)) return std::nullopt;
    std::size_t pos = 0;
    for (const auto& item : parse_items(content, pos)) top.push_back(tree_of(item));
  } else {
    // Flat chunk grammar: maximal runs of content symbols, each bracketed as a
    // balanced binary tree; special tokens are single leaves.
    std::size_t i = 0;
    while (i < content.size()) {
      if (content[i] < vocab::kFirstSymbol) {
        top.push_back(ParseNode::leaf());
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < content.size() && content[j] >= vocab::kFirstSymbol) ++j;
      top.push_back(balanced_tree(j - i));
      i = j;
    }
  }
  // Anything from EOS on hangs off the root as single leaves.
  for (std::size_t i = content.size(); i < response.size(); ++i) top.push_back(ParseNode::leaf());
  return ParseNode::node(std::move(top));
}

Tokens Task::corrupt(const Tokens& gold, std::size_t edits, Rng& rng) const {
  Tokens out = gold;
  const std::int64_t lo = kind_ == TaskKind::BracketLang ? vocab::kOpenRound : vocab::kFirstSymbol;
  const std::int64_t hi = kind_ == TaskKind::BracketLang
                              ? vocab::kAtom
                              : vocab::kFirstSymbol + static_cast<std::int64_t>(copy_.symbols) - 1;
  for (std::size_t e = 0; e < edits; ++e) {
    const auto op = rng.uniform_int(0, 2);
    if (op == 0 && !out.empty()) {
      out.erase(out.begin() + rng.uniform_int(0, static_cast<std::int64_t>(out.size()) - 1));
    } else if (op == 1 && !out.empty()) {
      out[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(out.size()) - 1))] =
          static_cast<Token>(rng.uniform_int(lo, hi));
    } else {
      out.insert(out.begin() + rng.uniform_int(0, static_cast<std::int64_t>(out.size())),
                 static_cast<Token>(rng.uniform_int(lo, hi)));
    }
  }
  out.push_back(vocab::kEos);
  return out;
}

PreferencePair Task::gen_preference_pair(Rng& rng) const {
  PreferencePair pair;
  pair.prompt = gen_prompt(rng);
  constexpr int kRetries = 16;
  for (int attempt = 0; attempt < kRetries; ++attempt) {
    pair.chosen = corrupt(pair.prompt.gold, static_cast<std::size_t>(rng.uniform_int(0, 1)), rng);
    pair.rejected = corrupt(pair.prompt.gold, static_cast<std::size_t>(rng.uniform_int(2, 4)), rng);
    pair.chosen_score = score(pair.prompt, pair.chosen);
    pair.rejected_score = score(pair.prompt, pair.rejected);
    if (pair.chosen_score > pair.rejected_score) return pair;
  }
  // Gold against gold minus its last token: F1 or the compile tier drops.
  pair.chosen = ideal_response(pair.prompt);
  pair.rejected = pair.chosen;
  pair.rejected.erase(pair.rejected.end() - 2);
  pair.chosen_score = score(pair.prompt, pair.chosen);
  pair.rejected_score = score(pair.prompt, pair.rejected);
  return pair;
}

// ---------------------------------------------------------------------------

double LearnedRewardModel::score(const Prompt& prompt, std::span<const Token> response) const {
  SequenceEvaluator ev(params_);
  for (Token t : prompt.tokens) ev.push(t);
  for (Token t : response) ev.push(t);
  return ev.value(ev.length() - 1);
}

LearnedRewardModel train_reward_model(std::span<const PreferencePair> pairs,
                                      const ModelConfig& model,
                                      const RewardTrainingConfig& cfg) {
  if (pairs.empty()) throw EmptyInputError("no preference pairs");
  PolicyParams params(model, derive_seed({cfg.seed, 0x524d}));
  PolicyParams grad = PolicyParams::zeros_like(params);
  Adam adam;
  Rng rng(derive_seed({cfg.seed, 0x5348}));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  auto reward_of = [&](const Prompt& p, const Tokens& r, SequenceEvaluator& ev) {
    for (Token t : p.tokens) ev.push(t);
    for (Token t : r) ev.push(t);
    return ev.value(ev.length() - 1);
  };
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t idx : order) {
      const auto& pair = pairs[idx];
      grad.set_zero();
      SequenceEvaluator plus(params, &grad);
      SequenceEvaluator minus(params, &grad);
      const double rp = reward_of(pair.prompt, pair.chosen, plus);
      const double rm = reward_of(pair.prompt, pair.rejected, minus);
      // d/dd softplus(-d) = -sigmoid(-d)
      const double g = -1.0 / (1.0 + std::exp(rp - rm));
      plus.seed_value(plus.length() - 1, g);
      minus.seed_value(minus.length() - 1, -g);
      plus.backward();
      minus.backward();
      adam.step(params, grad, cfg.lr);
    }
  }
  return LearnedRewardModel(std::move(params));
}

double ranking_accuracy(const RewardModel& rm, std::span<const PreferencePair> pairs) {
  if (pairs.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : pairs) {
    if (rm.score(p.prompt, p.chosen) > rm.score(p.prompt, p.rejected)) ++ok;
  }
  return static_cast<double>(ok) / static_cast<double>(pairs.size());
}

BestOfN best_of_n(const PolicyParams& params, const RewardModel& rm, const Prompt& prompt,
                  std::size_t n, const SamplerConfig& cfg, Rng& rng) {
  if (n == 0) throw InvalidArgumentError("best-of-n needs N >= 1");
  BestOfN best;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s = sample(params, prompt.tokens, cfg, rng);
    const double sc = rm.score(prompt, s.response);
    best.candidate_scores.push_back(sc);
    if (i == 0 || sc > best.score) {
      best.score = sc;
      best.response = std::move(s.response);
    }
  }
  return best;
}

}  // namespace marlhf
