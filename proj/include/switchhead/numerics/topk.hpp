#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "switchhead/errors.hpp"

namespace switchhead {

// Indices of the k largest values, ties broken toward the lower index,
// returned in ascending index order. A routing decision: no gradient.
inline std::vector<std::size_t> argtopk(std::span<const double> logits, std::size_t k) {
  if (k < 1 || k > logits.size()) {
    throw ContractError("argtopk: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(logits.size()) + "]");
  }
  std::vector<std::size_t> idx(logits.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  auto better = [&](std::size_t a, std::size_t b) {
    return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
  };
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), better);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace switchhead
