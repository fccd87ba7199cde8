#include "brnn/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "brnn/errors.hpp"

namespace brnn {

namespace {

double softplus_d(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

double ratio_at(const Posterior& post, const ParamCoord& c) {
  const auto& q = post.params.at(c.name);
  const double mu = q.mu.values()[c.offset];
  const double sigma = softplus_d(q.rho.values()[c.offset]);
  if (sigma <= 0.0) return std::numeric_limits<double>::infinity();
  return std::abs(mu) / sigma;
}

// rows x cols view of a tensor: vectors are one row.
std::pair<std::size_t, std::size_t> grid_of(const Tensor& t) {
  const std::size_t n = shape_size(t.shape());
  const std::size_t rows = t.rank() >= 2 ? t.shape()[0] : 1;
  return {rows, n / rows};
}

}  // namespace

std::vector<ParamCoord> snr_order(const Posterior& post) {
  struct Entry {
    double ratio;
    ParamCoord coord;
  };
  std::vector<Entry> entries;
  for (const auto& [name, q] : post.params) {
    const auto mu = q.mu.values();
    const auto rho = q.rho.values();
    for (std::size_t i = 0; i < mu.size(); ++i) {
      const double sigma = softplus_d(rho[i]);
      const double ratio = sigma > 0.0
                               ? std::abs(static_cast<double>(mu[i])) / sigma
                               : std::numeric_limits<double>::infinity();
      entries.push_back({ratio, {name, i}});
    }
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const Entry& a, const Entry& b) {
                     return a.ratio < b.ratio;
                   });
  std::vector<ParamCoord> order;
  order.reserve(entries.size());
  for (auto& e : entries) order.push_back(std::move(e.coord));
  return order;
}

Posterior apply_mask(const Posterior& post, const PruneMask& mask) {
  for (const auto& [name, flags] : mask.drop) {
    auto it = post.params.find(name);
    if (it == post.params.end()) {
      throw ContractError("prune mask names unknown parameter " + name);
    }
    if (flags.size() != it->second.mu.values().size()) {
      throw ContractError("prune mask size mismatch for " + name);
    }
  }
  Posterior out;
  out.dims = post.dims;
  for (const auto& [name, q] : post.params) {
    GaussianVariational copy{q.mu.clone(), q.rho.clone()};
    auto it = mask.drop.find(name);
    if (it != mask.drop.end()) {
      auto mu = copy.mu.values_mut();
      auto rho = copy.rho.values_mut();
      for (std::size_t i = 0; i < mu.size(); ++i) {
        if (it->second[i]) {
          mu[i] = 0.0f;
          rho[i] = -1e4f;  // softplus underflows to exactly 0
        }
      }
    }
    out.params.emplace(name, std::move(copy));
  }
  return out;
}

std::pair<Posterior, PruneMask> prune(const Posterior& post, double f) {
  std::vector<ParamCoord> order = snr_order(post);
  const std::size_t total = order.size();
  // The +1e-9 absorbs representation error in f * total (0.1 * 330 can land
  // just under 33); the count is still the floor for any honest fraction.
  std::size_t n = static_cast<std::size_t>(
      std::floor(f * static_cast<double>(total) + 1e-9));
  n = std::min(n, total);

  PruneMask mask;
  mask.total = total;
  mask.fraction = f;
  mask.dropped = n;
  for (const auto& [name, q] : post.params) {
    mask.drop.emplace(name,
                      std::vector<std::uint8_t>(q.mu.values().size(), 0));
  }
  for (std::size_t k = 0; k < n; ++k) {
    mask.drop.at(order[k].name)[order[k].offset] = 1;
  }
  mask.threshold = n > 0 ? ratio_at(post, order[n - 1]) : 0.0;
  return {apply_mask(post, mask), std::move(mask)};
}

std::map<std::string, std::vector<std::size_t>> row_drop_counts(
    const PruneMask& mask, const Posterior& post) {
  std::map<std::string, std::vector<std::size_t>> counts;
  for (const auto& [name, flags] : mask.drop) {
    const auto [rows, cols] = grid_of(post.params.at(name).mu);
    std::vector<std::size_t> per_row(rows, 0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        per_row[r] += flags[r * cols + c];
      }
    }
    counts.emplace(name, std::move(per_row));
  }
  return counts;
}

std::vector<SweepRow> prune_sweep(const Posterior& post,
                                  std::span<const std::int32_t> ids,
                                  std::span<const double> fractions,
                                  std::size_t steps) {
  std::vector<SweepRow> rows;
  rows.reserve(fractions.size());
  for (double f : fractions) {
    auto [pruned, mask] = prune(post, f);
    SweepRow row;
    row.fraction = f;
    row.dropped = mask.dropped;
    row.report = eval_map(pruned, ids, steps);
    row.mask = std::move(mask);
    rows.push_back(std::move(row));
  }
  return rows;
}

void save_mask_grids(const PruneMask& mask, const Posterior& post,
                     const std::string& dir) {
  for (const auto& [name, flags] : mask.drop) {
    const auto [rows, cols] = grid_of(post.params.at(name).mu);
    std::string fname = name;
    std::replace(fname.begin(), fname.end(), '.', '_');
    const std::string path = dir + "/" + fname + ".csv";
    std::ofstream out(path);
    if (!out) throw StorageError("cannot open " + path + " for writing");
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        out << static_cast<int>(flags[r * cols + c]);
        if (c + 1 < cols) out << ',';
      }
      out << '\n';
    }
    if (!out) throw StorageError("write failed for " + path);
  }
}

}  // namespace brnn
