// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "snip/divergence.hpp"
#include "snip/error.hpp"
#include "snip/model.hpp"

namespace snip {

/// Multiple-choice knapsack: pick one option per layer, minimize sum q subject
/// to sum e >= target (and per group >= target / K when grouped).
struct IlpInstance {
  std::vector<std::vector<double>> q;  // q[i][j] >= 0
  std::vector<std::vector<double>> e;  // e[i][j] in [0, 1]
  double target = 0.0;
  /// Optional partition of [0, m) into contiguous ranges of layer indices.
  std::vector<std::vector<std::size_t>> groups;

  std::size_t m() const { return q.size(); }

  void validate() const {
    if (q.empty()) throw InvalidArgument("ILP instance has no layers");
    if (e.size() != q.size()) throw InvalidArgument("ILP q and e disagree on the layer count");
    if (!(target >= 0.0 && target <= 1.0)) throw InvalidArgument("ILP target must lie in [0, 1]");
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (q[i].empty() || q[i].size() != e[i].size()) throw InvalidArgument("ILP layer " + std::to_string(i) + " options");
      for (std::size_t j = 0; j < q[i].size(); ++j) {
        if (!(q[i][j] >= 0.0) || !std::isfinite(q[i][j])) throw InvalidArgument("ILP q must be finite and >= 0");
        if (!(e[i][j] >= 0.0 && e[i][j] <= 1.0)) throw InvalidArgument("ILP e must lie in [0, 1]");
      }
    }
    if (!groups.empty()) {
      std::size_t next = 0;
      for (const auto& g : groups) {
        if (g.empty()) throw InvalidArgument("ILP group is empty");
        for (std::size_t i : g) {
          if (i != next++) throw InvalidArgument("ILP groups must partition [0, m) into contiguous ranges");
        }
      }
      if (next != m()) throw InvalidArgument("ILP groups must cover every layer");
    }
  }

  friend bool operator==(const IlpInstance&, const IlpInstance&) = default;
};

struct IlpSolution {
  std::vector<std::size_t> choice;
  double total_q = 0.0;
  double total_e = 0.0;
  bool optimal = false;

  friend bool operator==(const IlpSolution&, const IlpSolution&) = default;
};

namespace detail {

// Slack on the efficiency constraint so that fractions summing to 1 meet a
// target of 1 despite rounding.
inline constexpr double kEffSlack = 1e-12;

inline double improve_tol(double best) { return 1e-12 * std::max(1.0, std::abs(best)); }

inline IlpSolution evaluate(const IlpInstance& inst, std::vector<std::size_t> choice, bool optimal) {
  IlpSolution s{std::move(choice), 0.0, 0.0, optimal};
  for (std::size_t i = 0; i < s.choice.size(); ++i) {
    s.total_q += inst.q[i][s.choice[i]];
    s.total_e += inst.e[i][s.choice[i]];
  }
  return s;
}

inline double max_efficiency(const IlpInstance& inst) {
  double s = 0.0;
  for (const auto& row : inst.e) s += *std::max_element(row.begin(), row.end());
  return s;
}

/// Depth-first branch and bound over layers in index order, options in index
/// order. The incumbent is replaced only on strict improvement, so among
/// equal-q optima the lexicographically smallest choice wins.
class BranchAndBound {
 public:
  BranchAndBound(const IlpInstance& inst, double time_limit_s)
      : inst_(inst),
        deadline_(std::chrono::steady_clock::now() +
                  std::chrono::duration_cast<std::chrono::steady_clock::duration>(std::chrono::duration<double>(time_limit_s))) {
    const std::size_t m = inst.m();
    base_q_.resize(m);
    base_e_.resize(m);
    base_choice_.resize(m);
    for (std::size_t i = 0; i < m; ++i) build_hull(i);
    std::sort(segments_.begin(), segments_.end(), [](const Segment& a, const Segment& b) {
      return a.slope != b.slope ? a.slope < b.slope : a.layer < b.layer;
    });
    suffix_base_q_.assign(m + 1, 0.0);
    suffix_base_e_.assign(m + 1, 0.0);
    suffix_max_e_.assign(m + 1, 0.0);
    // Option j is skipped when another option of the layer has at least its
    // e and a q lower by more than any tie tolerance: no optimum can use j.
    double q_scale = 0.0;
    for (const auto& row : inst.q) q_scale += *std::max_element(row.begin(), row.end());
    const double margin = 2.0 * improve_tol(q_scale);
    dominated_.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto& q = inst.q[i];
      const auto& e = inst.e[i];
      dominated_[i].assign(q.size(), false);
      for (std::size_t j = 0; j < q.size(); ++j) {
        for (std::size_t k = 0; k < q.size(); ++k) {
          if (k != j && e[k] >= e[j] && q[k] < q[j] - margin) {
            dominated_[i][j] = true;
            break;
          }
        }
      }
    }
    for (std::size_t i = m; i-- > 0;) {
      suffix_base_q_[i] = suffix_base_q_[i + 1] + base_q_[i];
      suffix_base_e_[i] = suffix_base_e_[i + 1] + base_e_[i];
      suffix_max_e_[i] = suffix_max_e_[i + 1] + *std::max_element(inst.e[i].begin(), inst.e[i].end());
    }
  }

  IlpSolution run() {
    current_.assign(inst_.m(), 0);
    warm_start();
    dfs(0, 0.0, 0.0);
    if (best_choice_.empty()) {
      // Only reachable on timeout: fall back to the most efficient option per layer.
      std::vector<std::size_t> ch;
      for (const auto& row : inst_.e) ch.push_back(std::max_element(row.begin(), row.end()) - row.begin());
      return evaluate(inst_, ch, false);
    }
    return evaluate(inst_, best_choice_, !timed_out_);
  }

 private:
  struct Segment {
    std::size_t layer, to;
    double de, dq, slope;
  };

  // Rounded-up LP solution: walk hull segments by slope until the target is
  // met. Gives the search a near-optimal incumbent from the start.
  void warm_start() {
    std::vector<std::size_t> choice(inst_.m());
    for (std::size_t i = 0; i < inst_.m(); ++i) choice[i] = base_choice_[i];
    double e = suffix_base_e_[0];
    for (const Segment& seg : segments_) {
      if (e >= inst_.target - kEffSlack) break;
      choice[seg.layer] = seg.to;
      e += seg.de;
    }
    const IlpSolution s = evaluate(inst_, choice, false);
    if (s.total_e < inst_.target - kEffSlack) return;
    best_q_ = s.total_q;
    best_choice_ = s.choice;
    found_by_search_ = false;
  }

  // Lower convex hull of (e, q) starting at the cheapest option.
  void build_hull(std::size_t i) {
    const auto& q = inst_.q[i];
    const auto& e = inst_.e[i];
    std::size_t b = 0;
    for (std::size_t j = 1; j < q.size(); ++j) {
      if (q[j] < q[b] || (q[j] == q[b] && e[j] > e[b])) b = j;
    }
    base_q_[i] = q[b];
    base_e_[i] = e[b];
    base_choice_[i] = b;
    std::vector<std::size_t> pts;
    for (std::size_t j = 0; j < q.size(); ++j) {
      if (e[j] > e[b]) pts.push_back(j);
    }
    std::sort(pts.begin(), pts.end(), [&](std::size_t a, std::size_t c) { return e[a] != e[c] ? e[a] < e[c] : q[a] < q[c]; });
    std::vector<std::size_t> hull{b};
    for (std::size_t j : pts) {
      if (e[j] == e[hull.back()]) continue;  // same e, higher q
      while (hull.size() >= 2) {
        const std::size_t p = hull[hull.size() - 2], c = hull.back();
        // Drop c if it lies on or above segment p -> j.
        const double cross = (e[c] - e[p]) * (q[j] - q[p]) - (q[c] - q[p]) * (e[j] - e[p]);
        if (cross <= 0.0) hull.pop_back();
        else break;
      }
      hull.push_back(j);
    }
    for (std::size_t k = 1; k < hull.size(); ++k) {
      const double de = e[hull[k]] - e[hull[k - 1]], dq = q[hull[k]] - q[hull[k - 1]];
      if (dq < 0.0) continue;  // cannot happen from the cheapest base; kept defensive
      segments_.push_back({i, hull[k], de, dq, dq / de});
    }
  }

  // LP relaxation over layers [k, m) for residual efficiency `need`.
  double bound(std::size_t k, double need) const {
    double lb = suffix_base_q_[k];
    double rem = need - suffix_base_e_[k];
    if (rem <= 0.0) return lb;
    for (const Segment& s : segments_) {
      if (s.layer < k) continue;
      if (s.de >= rem) return lb + s.slope * rem;
      lb += s.dq;
      rem -= s.de;
    }
    return std::numeric_limits<double>::infinity();
  }

  void dfs(std::size_t k, double q_sum, double e_sum) {
    if (timed_out_) return;
    if ((++nodes_ & 1023) == 0 && std::chrono::steady_clock::now() > deadline_) {
      timed_out_ = true;
      return;
    }
    const std::size_t m = inst_.m();
    const double need = inst_.target - kEffSlack - e_sum;
    if (k == m) {
      if (need > 0.0) return;
      // The first search leaf that ties the warm start replaces it: search
      // leaves arrive in lexicographic order, the warm start does not.
      const double tol = improve_tol(best_q_);
      if (best_choice_.empty() || q_sum < best_q_ - tol || (!found_by_search_ && q_sum <= best_q_ + tol)) {
        best_q_ = q_sum;
        best_choice_ = current_;
        found_by_search_ = true;
      }
      return;
    }
    if (e_sum + suffix_max_e_[k] < inst_.target - kEffSlack) return;
    if (!best_choice_.empty()) {
      const double lb = q_sum + bound(k, need);
      // Once the incumbent comes from the search, later leaves are
      // lexicographically larger and must beat it by more than the tie
      // tolerance; 0.9 leaves room for rounding in the bound.
      const double tol = improve_tol(best_q_);
      if (lb > (found_by_search_ ? best_q_ - 0.9 * tol : best_q_ + tol)) return;
    }
    for (std::size_t j = 0; j < inst_.q[k].size(); ++j) {
      if (dominated_[k][j]) continue;
      current_[k] = j;
      dfs(k + 1, q_sum + inst_.q[k][j], e_sum + inst_.e[k][j]);
      if (timed_out_) return;
    }
  }

  const IlpInstance& inst_;
  std::chrono::steady_clock::time_point deadline_;
  std::vector<double> base_q_, base_e_, suffix_base_q_, suffix_base_e_, suffix_max_e_;
  std::vector<std::size_t> base_choice_;
  std::vector<std::vector<bool>> dominated_;
  bool found_by_search_ = false;
  std::vector<Segment> segments_;
  std::vector<std::size_t> current_, best_choice_;
  double best_q_ = 0.0;
  bool timed_out_ = false;
  std::uint64_t nodes_ = 0;
};

inline IlpInstance sub_instance(const IlpInstance& inst, const std::vector<std::size_t>& layers, double target) {
  IlpInstance s;
  for (std::size_t i : layers) {
    s.q.push_back(inst.q[i]);
    s.e.push_back(inst.e[i]);
  }
  s.target = target;
  return s;
}

}  // namespace detail

inline constexpr double kDefaultTimeLimit = 30.0;

/// Exact solve of the ungrouped problem. `optimal` is false only when the
/// time limit stopped the search.
inline IlpSolution solve(const IlpInstance& inst, double time_limit_s = kDefaultTimeLimit) {
  inst.validate();
  const double max_e = detail::max_efficiency(inst);
  if (max_e < inst.target - detail::kEffSlack) {
    throw InfeasibleError("efficiency target " + std::to_string(inst.target) + " exceeds the maximum achievable " +
                              std::to_string(max_e),
                          max_e);
  }
  return detail::BranchAndBound(inst, time_limit_s).run();
}

/// Each group k must reach target / K on its own; groups are solved
/// independently. Without groups this is solve().
inline IlpSolution solve_grouped(const IlpInstance& inst, double time_limit_s = kDefaultTimeLimit) {
  inst.validate();
  if (inst.groups.empty()) return solve(inst, time_limit_s);
  const double share = inst.target / static_cast<double>(inst.groups.size());
  std::vector<std::size_t> choice;
  bool optimal = true;
  for (std::size_t k = 0; k < inst.groups.size(); ++k) {
    const IlpInstance sub = detail::sub_instance(inst, inst.groups[k], share);
    const double max_e = detail::max_efficiency(sub);
    if (max_e < share - detail::kEffSlack) {
      throw InfeasibleError("group " + std::to_string(k) + " cannot reach " + std::to_string(share) +
                                " (max achievable " + std::to_string(max_e) + ")",
                            max_e, static_cast<int>(k));
    }
    const IlpSolution s = detail::BranchAndBound(sub, time_limit_s).run();
    optimal = optimal && s.optimal;
    choice.insert(choice.end(), s.choice.begin(), s.choice.end());
  }
  return detail::evaluate(inst, choice, optimal);
}

inline constexpr double kBruteForceLimit = 1e7;

/// Exhaustive enumeration in lexicographic order with the same tie rule as
/// solve(). Ignores groups.
inline IlpSolution brute_force(const IlpInstance& inst) {
  inst.validate();
  double count = 1.0;
  for (const auto& row : inst.q) count *= static_cast<double>(row.size());
  if (count > kBruteForceLimit) throw SizeError("brute_force: " + std::to_string(count) + " assignments exceed 1e7");
  const std::size_t m = inst.m();
  std::vector<std::size_t> cur(m, 0), best;
  double best_q = 0.0;
  while (true) {
    double q = 0.0, e = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      q += inst.q[i][cur[i]];
      e += inst.e[i][cur[i]];
    }
    if (e >= inst.target - detail::kEffSlack && (best.empty() || q < best_q - detail::improve_tol(best_q))) {
      best = cur;
      best_q = q;
    }
    std::size_t i = m;
    while (i-- > 0) {
      if (++cur[i] < inst.q[i].size()) break;
      cur[i] = 0;
    }
    if (i == static_cast<std::size_t>(-1)) break;
  }
  if (best.empty()) {
    const double max_e = detail::max_efficiency(inst);
    throw InfeasibleError("efficiency target exceeds the maximum achievable " + std::to_string(max_e), max_e);
  }
  return detail::evaluate(inst, best, true);
}

// ---------------------------------------------------------------------------
// Report <-> instance <-> policy

/// Transformer blocks split into K contiguous stages of ceil(n_blocks / K)
/// blocks each (the last stage may be shorter).
inline std::vector<std::vector<std::size_t>> pipeline_groups(const ModelConfig& cfg, std::size_t k) {
  if (k < 1 || k > cfg.n_blocks) throw InvalidArgument("groups must lie in [1, n_blocks]");
  if (k == 1) return {};
  const std::size_t per = (cfg.n_blocks + k - 1) / k;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t b0 = 0; b0 < cfg.n_blocks; b0 += per) {
    std::vector<std::size_t> g;
    for (std::size_t i = b0 * kLinearsPerBlock; i < std::min(cfg.n_blocks, b0 + per) * kLinearsPerBlock; ++i) {
      g.push_back(i);
    }
    groups.push_back(std::move(g));
  }
  if (groups.size() != k) {
    throw InvalidArgument(std::to_string(cfg.n_blocks) + " blocks cannot form " + std::to_string(k) + " non-empty stages");
  }
  return groups;
}

inline IlpInstance to_instance(const DivergenceReport& r, double target, std::size_t groups = 1) {
  IlpInstance inst;
  for (const auto& row : r.cells) {
    std::vector<double> q, e;
    for (const auto& c : row) {
      q.push_back(c.q);
      e.push_back(c.e);
    }
    inst.q.push_back(std::move(q));
    inst.e.push_back(std::move(e));
  }
  inst.target = target;
  inst.groups = pipeline_groups(r.config, groups);
  return inst;
}

inline PrecisionPolicy to_policy(const DivergenceReport& r, const IlpSolution& s, std::string label) {
  PrecisionPolicy p = PrecisionPolicy::uniform(r.config, LayerPrecision::fp8(), std::move(label));
  if (s.choice.size() != p.layers.size()) throw InvalidArgument("solution does not cover every layer");
  for (std::size_t i = 0; i < s.choice.size(); ++i) p.layers[i] = r.catalog.at(s.choice[i]).precision;
  return p;
}

}  // namespace snip
