#include "marlhf/macro_value.hpp"

#include <cmath>
#include <cstdint>
#include <numeric>

#include "marlhf/errors.hpp"

namespace marlhf {
namespace {

void check_bounds(std::size_t values, std::size_t mask, const Segmentation& seg) {
  if (values < seg.end()) throw ShapeError("segmentation exceeds value array");
  if (mask != 0 && mask < seg.end()) throw ShapeError("segmentation exceeds mask");
}

bool valid_at(std::span<const unsigned char> mask, std::size_t i) {
  return mask.empty() || mask[i] != 0;
}

using u128 = unsigned __int128;

// Correctly rounded p / q for 0 < p <= q < 2^126 (round half to even).
double divide_rounded(u128 p, u128 q) {
  if (p == q) return 1.0;
  u128 r = p;
  std::uint64_t m = 0;
  int bits = 0;
  int e = 0;
  while (bits < 53) {
    r <<= 1;
    --e;
    const bool one = r >= q;
    if (one) r -= q;
    if (bits == 0 && !one) continue;
    m = (m << 1) | (one ? 1u : 0u);
    ++bits;
  }
  r <<= 1;
  const bool guard = r >= q;
  if (guard) r -= q;
  if (guard && (r != 0 || (m & 1u))) ++m;
  return std::ldexp(static_cast<double>(m), e);
}

// Harmonic weights as exact integer ratios lcm/(L-i) over their sum.
// lcm(1..64) needs 90 bits, so this covers every length up to 64.
constexpr std::size_t kExactDecayedMax = 64;

void decayed_exact(std::vector<double>& w) {
  const std::size_t length = w.size();
  u128 l = 1;
  for (std::size_t k = 2; k <= length; ++k) {
    const u128 g = std::gcd(static_cast<std::uint64_t>(l % k), static_cast<std::uint64_t>(k));
    l = l / g * k;
  }
  u128 sum = 0;
  for (std::size_t i = 0; i < length; ++i) sum += l / (length - i);
  for (std::size_t i = 0; i < length; ++i) w[i] = divide_rounded(l / (length - i), sum);
}

}  // namespace

std::vector<double> sigma_weights(std::size_t length, SigmaAssignment scheme) {
  if (length == 0) throw InvalidArgumentError("sigma weights need length >= 1");
  std::vector<double> w(length, 0.0);
  switch (scheme) {
    case SigmaAssignment::Equal:
      for (auto& x : w) x = 1.0 / static_cast<double>(length);
      break;
    case SigmaAssignment::Unit:
      w.back() = 1.0;
      break;
    case SigmaAssignment::PositionDecayed: {
      if (length <= kExactDecayedMax) {
        decayed_exact(w);
        break;
      }
      double h = 0.0;
      for (std::size_t i = 0; i < length; ++i) h += 1.0 / static_cast<double>(length - i);
      for (std::size_t i = 0; i < length; ++i) {
        w[i] = 1.0 / (static_cast<double>(length - i) * h);
      }
      break;
    }
  }
  return w;
}

std::vector<double> aggregate_values(std::span<const double> values,
                                     std::span<const unsigned char> mask,
                                     const Segmentation& seg, SigmaAssignment scheme) {
  check_bounds(values.size(), mask.size(), seg);
  std::vector<double> out(seg.size(), 0.0);
  std::vector<double> picked;
  for (std::size_t s = 0; s < seg.size(); ++s) {
    picked.clear();
    for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
      if (valid_at(mask, t)) picked.push_back(values[t]);
    }
    if (picked.empty()) continue;
    if (scheme == SigmaAssignment::Equal) {
      // Plain mean, so that |w| = 1 reproduces the token value exactly.
      double sum = 0.0;
      for (double v : picked) sum += v;
      out[s] = sum / static_cast<double>(picked.size());
      continue;
    }
    const auto w = sigma_weights(picked.size(), scheme);
    double acc = 0.0;
    for (std::size_t i = 0; i < picked.size(); ++i) acc += w[i] * picked[i];
    out[s] = acc;
  }
  return out;
}

std::vector<double> aggregate_rewards(std::span<const double> rewards,
                                      std::span<const unsigned char> mask,
                                      const Segmentation& seg, RewardAggregation mode) {
  check_bounds(rewards.size(), mask.size(), seg);
  std::vector<double> out(seg.size(), 0.0);
  for (std::size_t s = 0; s < seg.size(); ++s) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t t = seg.begin_of(s); t < seg.end_of(s); ++t) {
      if (!valid_at(mask, t)) continue;
      sum += rewards[t];
      ++count;
    }
    if (count == 0) continue;
    out[s] = mode == RewardAggregation::Sum ? sum : sum / static_cast<double>(count);
  }
  return out;
}

}  // namespace marlhf
