#pragma once

// Per-token values/rewards aggregated to one number per macro action.

#include <span>
#include <vector>

#include "marlhf/segmentation.hpp"

namespace marlhf {

enum class SigmaAssignment {
  Equal,            // 1/|w| on every token
  Unit,             // all weight on the last token
  PositionDecayed,  // w_i proportional to 1/(|w| - i)
};

enum class RewardAggregation {
  Sum,
  MaskedMean,
};

// Per-macro quantities aligned with a Segmentation.
struct MacroBatch {
  std::vector<double> macro_values;
  std::vector<double> macro_rewards;
  std::vector<double> advantages;
  std::vector<double> returns;

  std::size_t size() const { return macro_values.size(); }
};

std::vector<double> sigma_weights(std::size_t length, SigmaAssignment scheme);

// Weighted combination of the masked-in token values of each segment. The
// weights are taken over the masked-in tokens only; a segment with no
// masked-in tokens yields 0.
std::vector<double> aggregate_values(std::span<const double> values,
                                     std::span<const unsigned char> mask,
                                     const Segmentation& seg, SigmaAssignment scheme);

std::vector<double> aggregate_rewards(std::span<const double> rewards,
                                      std::span<const unsigned char> mask,
                                      const Segmentation& seg, RewardAggregation mode);

}  // namespace marlhf
