#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace recon3d {

// Per-view visibility: 1 = visible, 0 = masked.
struct ViewMask {
  std::vector<std::uint8_t> bits;
  double gamma = 0;

  static ViewMask all_visible(int views) { return {std::vector<std::uint8_t>(static_cast<std::size_t>(views), 1), 0.0}; }

  int size() const { return static_cast<int>(bits.size()); }
  bool visible(int j) const { return bits.at(static_cast<std::size_t>(j)) != 0; }
  int masked_count() const { return static_cast<int>(std::count(bits.begin(), bits.end(), std::uint8_t{0})); }
  std::vector<int> masked_views() const {
    std::vector<int> out;
    for (int j = 0; j < size(); ++j) {
      if (!visible(j)) out.push_back(j);
    }
    return out;
  }
};

inline int masked_view_count(int views, double gamma) { return static_cast<int>(std::lround(gamma * views)); }

// Exactly round(gamma * M) views masked, chosen uniformly without replacement.
template <class Rng>
ViewMask sample_view_mask(int views, double gamma, Rng& rng) {
  if (views < 1) throw std::invalid_argument("sample_view_mask: need at least one view");
  if (gamma < 0 || gamma >= 1) throw std::invalid_argument("sample_view_mask: gamma must lie in [0, 1)");
  const int k = masked_view_count(views, gamma);
  if (k >= views) {
    throw std::invalid_argument("sample_view_mask: gamma " + std::to_string(gamma) + " masks all " + std::to_string(views) +
                                " views");
  }
  ViewMask m = ViewMask::all_visible(views);
  m.gamma = gamma;
  // Partial Fisher-Yates: the first k entries of the permutation are masked.
  std::vector<int> order(static_cast<std::size_t>(views));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = std::uniform_int_distribution<int>(i, views - 1)(rng);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
    m.bits[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
  }
  return m;
}

}  // namespace recon3d
