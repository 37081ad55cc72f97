#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace conunetr {

// Sparse annotation budget: max(1, round(budget * total)) slice indices,
// evenly spread across the volume (bin midpoints), sorted and distinct. For
// budgets under 50% the indices are never consecutive, which is exactly the
// regime the slice-location encoding is meant to bridge. The seed parameter
// is reserved for jittered strategies; midpoint placement ignores it.
inline std::vector<std::int64_t> sample_annotated_slices(std::int64_t total_slices,
                                                         double budget_fraction,
                                                         std::uint64_t /*seed*/ = 0) {
  if (total_slices < 1) {
    throw std::invalid_argument("sample_annotated_slices: total_slices must be >= 1");
  }
  if (budget_fraction <= 0.0 || budget_fraction > 1.0) {
    throw std::invalid_argument("sample_annotated_slices: budget must be in (0,1]");
  }
  const std::int64_t count = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(budget_fraction *
                                                static_cast<double>(total_slices))));
  std::vector<std::int64_t> indices;
  indices.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    indices.push_back((2 * i + 1) * total_slices / (2 * count));
  }
  return indices;
}

}  // namespace conunetr
