#include "marlhf/segmentation.hpp"

#include <cmath>
#include <sstream>

#include "marlhf/errors.hpp"

namespace marlhf {
namespace {

bool valid_at(std::span<const unsigned char> mask, std::size_t i) {
  return mask.empty() || mask[i] != 0;
}

void check_mask(std::span<const unsigned char> mask, std::size_t len) {
  if (!mask.empty() && mask.size() < len) {
    throw ShapeError("mask shorter than response");
  }
}

}  // namespace

Segmentation::Segmentation(std::vector<std::size_t> boundaries)
    : boundaries_(std::move(boundaries)) {
  if (boundaries_.size() < 2) {
    throw InvalidArgumentError("segmentation needs at least one segment");
  }
  for (std::size_t i = 1; i < boundaries_.size(); ++i) {
    if (boundaries_[i] <= boundaries_[i - 1]) {
      throw InvalidArgumentError("segmentation boundaries must be strictly increasing");
    }
  }
}

std::vector<std::size_t> Segmentation::lengths() const {
  std::vector<std::size_t> out(size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = length(i);
  return out;
}

Segmentation Segmentation::per_token(std::size_t response_len, std::size_t start) {
  if (response_len == 0) throw EmptyInputError("empty response");
  std::vector<std::size_t> b(response_len + 1);
  for (std::size_t i = 0; i <= response_len; ++i) b[i] = start + i;
  return Segmentation(std::move(b));
}

void validate(const TerminationRule& rule) {
  if (const auto* f = std::get_if<FixedNGram>(&rule)) {
    if (f->n == 0) throw InvalidArgumentError("fixed n-gram length must be >= 1");
  } else if (const auto* r = std::get_if<RandomizedNGram>(&rule)) {
    if (r->lengths.empty()) throw InvalidArgumentError("randomized n-gram length list is empty");
    if (r->repeats == 0) throw InvalidArgumentError("randomized n-gram repeats must be >= 1");
    for (auto l : r->lengths) {
      if (l == 0) throw InvalidArgumentError("randomized n-gram lengths must be >= 1");
    }
  } else if (const auto* p = std::get_if<Parsing>(&rule)) {
    if (p->cutoff < 2) throw InvalidArgumentError("parsing cutoff must be >= 2");
  }
}

std::string describe(const TerminationRule& rule) {
  std::ostringstream os;
  if (const auto* f = std::get_if<FixedNGram>(&rule)) {
    os << "fixed(n=";
    if (f->n == FixedNGram::kWhole) {
      os << "inf";
    } else {
      os << f->n;
    }
    os << ")";
  } else if (const auto* r = std::get_if<RandomizedNGram>(&rule)) {
    os << "random(lengths=";
    for (std::size_t i = 0; i < r->lengths.size(); ++i) os << (i ? "," : "") << r->lengths[i];
    os << " x" << r->repeats << ")";
  } else if (const auto* p = std::get_if<Perplexity>(&rule)) {
    os << (p->mode == PerplexityMode::Prefix ? "ppl(prefix)" : "ppl(macro)");
  } else {
    os << "parsing(C=" << std::get<Parsing>(rule).cutoff << ")";
  }
  return os.str();
}

std::size_t ParseNode::leaf_count() const {
  if (is_leaf) return 1;
  std::size_t n = 0;
  for (const auto& c : children) n += c.leaf_count();
  return n;
}

ParseNode balanced_tree(std::size_t count) {
  if (count <= 1) return ParseNode::leaf();
  const std::size_t left = (count + 1) / 2;
  std::vector<ParseNode> kids;
  kids.push_back(balanced_tree(left));
  kids.push_back(balanced_tree(count - left));
  return ParseNode::node(std::move(kids));
}

Segmentation segment_fixed_ngram(std::size_t response_len, std::size_t n,
                                 std::span<const unsigned char> mask, std::size_t start) {
  if (response_len == 0) throw EmptyInputError("empty response");
  if (n == 0) throw InvalidArgumentError("fixed n-gram length must be >= 1");
  check_mask(mask, response_len);
  std::vector<std::size_t> b{start};
  std::size_t count = 0;
  // The last token never opens a boundary of its own; the end is appended below.
  for (std::size_t i = 0; i + 1 < response_len; ++i) {
    count += valid_at(mask, i) ? 1 : 0;
    if (count == n) {
      b.push_back(start + i + 1);
      count = 0;
    }
  }
  b.push_back(start + response_len);
  return Segmentation(std::move(b));
}

Segmentation segment_by_lengths(std::size_t response_len, std::span<const std::size_t> lengths,
                                std::size_t start) {
  if (response_len == 0) throw EmptyInputError("empty response");
  std::vector<std::size_t> b{start};
  std::size_t cumulative = 0;
  for (auto l : lengths) {
    cumulative += l;
    if (cumulative >= response_len) break;
    b.push_back(start + cumulative);
  }
  // Catch-all segment absorbs whatever the list does not cover.
  b.push_back(start + response_len);
  return Segmentation(std::move(b));
}

Segmentation segment_randomized_ngram(std::size_t response_len, const RandomizedNGram& rule,
                                      Rng& rng, std::size_t start) {
  validate(rule);
  if (response_len == 0) throw EmptyInputError("empty response");
  std::vector<std::size_t> lengths;
  lengths.reserve(rule.lengths.size() * rule.repeats);
  for (std::size_t r = 0; r < rule.repeats; ++r) {
    lengths.insert(lengths.end(), rule.lengths.begin(), rule.lengths.end());
  }
  rng.shuffle(std::span<std::size_t>(lengths));
  return segment_by_lengths(response_len, lengths, start);
}

std::vector<double> prefix_perplexity(std::span<const double> ref_logps,
                                      std::span<const unsigned char> mask) {
  check_mask(mask, ref_logps.size());
  std::vector<double> out(ref_logps.size());
  double sum = 0.0;
  std::size_t count = 0;
  double last = 1.0;
  for (std::size_t i = 0; i < ref_logps.size(); ++i) {
    if (valid_at(mask, i)) {
      sum += ref_logps[i];
      ++count;
      last = std::exp(-sum / static_cast<double>(count));
    }
    out[i] = last;
  }
  return out;
}

Segmentation segment_perplexity(std::span<const double> prefix_ppl, std::size_t start) {
  if (prefix_ppl.empty()) throw EmptyInputError("empty perplexity series");
  std::vector<std::size_t> b{start};
  for (std::size_t i = 1; i < prefix_ppl.size(); ++i) {
    if (prefix_ppl[i] > prefix_ppl[i - 1]) b.push_back(start + i);
  }
  b.push_back(start + prefix_ppl.size());
  return Segmentation(std::move(b));
}

Segmentation segment_macro_perplexity(std::span<const double> ref_logps,
                                      std::span<const unsigned char> mask, std::size_t start) {
  if (ref_logps.empty()) throw EmptyInputError("empty log-probability series");
  check_mask(mask, ref_logps.size());
  std::vector<std::size_t> b{start};
  double nll_sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < ref_logps.size(); ++i) {
    if (!valid_at(mask, i)) continue;
    const double nll = -ref_logps[i];
    if (count > 0 && i > 0 && nll > nll_sum / static_cast<double>(count)) {
      b.push_back(start + i);
      nll_sum = 0.0;
      count = 0;
    }
    nll_sum += nll;
    ++count;
  }
  b.push_back(start + ref_logps.size());
  return Segmentation(std::move(b));
}

namespace {

struct ParsingWalker {
  std::size_t cutoff;
  std::size_t cursor = 0;
  std::vector<std::size_t> ends;  // segment end offsets, relative

  void visit(const ParseNode& node) {
    const std::size_t leaves = node.leaf_count();
    if (leaves == 0) return;
    if (leaves == 1) {
      cursor += 1;
      if (ends.empty()) {
        ends.push_back(cursor);
      } else {
        ends.back() = cursor;
      }
      return;
    }
    if (leaves < cutoff) {
      cursor += leaves;
      ends.push_back(cursor);
      return;
    }
    for (const auto& child : node.children) visit(child);
  }
};

}  // namespace

Segmentation segment_parsing(const ParseNode& tree, std::size_t response_len,
                             std::size_t cutoff, std::size_t start) {
  if (cutoff < 2) throw InvalidArgumentError("parsing cutoff must be >= 2");
  const std::size_t leaves = tree.leaf_count();
  if (leaves == 0) throw EmptyInputError("empty parse tree");
  if (leaves != response_len) return Segmentation::per_token(response_len, start);
  ParsingWalker walker{cutoff};
  walker.visit(tree);
  std::vector<std::size_t> b{start};
  for (auto e : walker.ends) b.push_back(start + e);
  return Segmentation(std::move(b));
}

Segmentation segment(const TerminationRule& rule, const SegmentInput& in, Rng& rng) {
  validate(rule);
  if (in.response_len == 0) throw EmptyInputError("empty response");
  if (const auto* f = std::get_if<FixedNGram>(&rule)) {
    return segment_fixed_ngram(in.response_len, f->n, in.mask, in.start);
  }
  if (const auto* r = std::get_if<RandomizedNGram>(&rule)) {
    return segment_randomized_ngram(in.response_len, *r, rng, in.start);
  }
  if (const auto* p = std::get_if<Perplexity>(&rule)) {
    if (in.ref_logps.size() < in.response_len) {
      throw InvalidArgumentError("perplexity rule needs reference log-probabilities");
    }
    const auto logps = in.ref_logps.first(in.response_len);
    if (p->mode == PerplexityMode::Macro) {
      return segment_macro_perplexity(logps, in.mask, in.start);
    }
    const auto ppl = prefix_perplexity(logps, in.mask);
    return segment_perplexity(ppl, in.start);
  }
  const auto& parsing = std::get<Parsing>(rule);
  if (in.tree == nullptr) return Segmentation::per_token(in.response_len, in.start);
  return segment_parsing(*in.tree, in.response_len, parsing.cutoff, in.start);
}

}  // namespace marlhf
