#include "superpart/cut_pursuit.hpp"

#include "superpart/maxflow.hpp"
#include "superpart/parallel.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace superpart {

namespace {

bool rows_equal(const Mat& a, Index i, const Mat& b, Index j) {
  return (a.row(i).array() == b.row(j).array()).all();
}

Vec resolve_weights(const Vec& node_weight, Index n) {
  if (node_weight.size() == 0) return Vec::Ones(n);
  require(static_cast<Index>(node_weight.size()) == n, "node_weight size mismatch");
  require((node_weight.array() > 0.0).all(), "node weights must be positive");
  return node_weight;
}

// Component ids reassigned by first occurrence (== ordered by smallest
// member node); values become the weighted member means.
Partition canonicalize(const std::vector<Index>& raw_labels, const Mat& f, const Vec& weights) {
  const Index n = static_cast<Index>(raw_labels.size());
  const Index d = static_cast<Index>(f.cols());
  Index max_raw = -1;
  for (Index raw : raw_labels) max_raw = std::max(max_raw, raw);
  std::vector<Index> remap(static_cast<std::size_t>(max_raw + 1), -1);
  Index next = 0;
  IndexVec super_index(n);
  for (Index u = 0; u < n; ++u) {
    Index& slot = remap[static_cast<std::size_t>(raw_labels[static_cast<std::size_t>(u)])];
    if (slot < 0) slot = next++;
    super_index[u] = slot;
  }

  Partition partition;
  partition.super_index = super_index;
  partition.component_value = Mat::Zero(next, d);
  partition.component_size = IndexVec::Zero(next);
  Vec mass = Vec::Zero(next);
  for (Index u = 0; u < n; ++u) {
    const Index c = super_index[u];
    partition.component_value.row(c) += weights[u] * f.row(u);
    partition.component_size[c] += 1;
    mass[c] += weights[u];
  }
  for (Index c = 0; c < next; ++c) partition.component_value.row(c) /= mass[c];
  return partition;
}

double cut_weight(const IndexVec& super_index, const WeightedGraph& graph) {
  double total = 0.0;
  for (Index e = 0; e < graph.edge_count(); ++e)
    if (super_index[graph.edges(e, 0)] != super_index[graph.edges(e, 1)])
      total += graph.weights[e];
  return total;
}

// Connected level sets of f: components of the subgraph keeping only edges
// whose endpoint rows are exactly equal.
Partition level_set_partition(const Mat& f, const WeightedGraph& graph, const Vec& weights) {
  WeightedGraph equal;
  equal.node_count = graph.node_count;
  std::vector<std::pair<Index, Index>> kept;
  for (Index e = 0; e < graph.edge_count(); ++e) {
    const Index u = graph.edges(e, 0), v = graph.edges(e, 1);
    if (rows_equal(f, u, f, v)) kept.emplace_back(u, v);
  }
  equal.edges.resize(static_cast<Index>(kept.size()), 2);
  equal.weights = Vec::Ones(static_cast<Index>(kept.size()));
  for (std::size_t e = 0; e < kept.size(); ++e) {
    equal.edges(static_cast<Index>(e), 0) = kept[e].first;
    equal.edges(static_cast<Index>(e), 1) = kept[e].second;
  }
  return canonicalize(connected_components(equal).first, f, weights);
}

class Solver {
 public:
  Solver(const Mat& f, const WeightedGraph& graph, const SolverConfig& config, const Vec& weights)
      : f_(f), graph_(graph), csr_(build_csr(graph)), config_(config), weights_(weights),
        n_(graph.node_count), d_(static_cast<Index>(f.cols())) {}

  Partition run() {
    comp_of_ = connected_components(graph_).first;
    renumber();
    rebuild_members();

#ifndef NDEBUG
    double prev_energy = total_energy();
#endif
    for (int outer = 0; outer < config_.max_outer_iters; ++outer) {
      const bool split_changed = split_pass();
      const bool merge_changed = merge_pass();
#ifndef NDEBUG
      const double now = total_energy();
      assert(now <= prev_energy + 1e-9 * (1.0 + std::abs(prev_energy)));
      prev_energy = now;
#endif
      if (!split_changed && !merge_changed) break;
    }
    return canonicalize(comp_of_, f_, weights_);
  }

 private:
  void rebuild_members() {
    members_.assign(static_cast<std::size_t>(comp_count_), {});
    for (Index u = 0; u < n_; ++u)
      members_[static_cast<std::size_t>(comp_of_[static_cast<std::size_t>(u)])].push_back(u);
    comp_mean_ = Mat::Zero(comp_count_, d_);
    comp_mass_ = Vec::Zero(comp_count_);
    for (Index u = 0; u < n_; ++u) {
      const Index c = comp_of_[static_cast<std::size_t>(u)];
      comp_mean_.row(c) += weights_[u] * f_.row(u);
      comp_mass_[c] += weights_[u];
    }
    for (Index c = 0; c < comp_count_; ++c) comp_mean_.row(c) /= comp_mass_[c];
  }

  void renumber() {
    std::vector<Index> remap;
    Index max_id = -1;
    for (Index u = 0; u < n_; ++u) max_id = std::max(max_id, comp_of_[static_cast<std::size_t>(u)]);
    remap.assign(static_cast<std::size_t>(max_id + 1), -1);
    Index next = 0;
    for (Index u = 0; u < n_; ++u) {
      Index& c = comp_of_[static_cast<std::size_t>(u)];
      Index& slot = remap[static_cast<std::size_t>(c)];
      if (slot < 0) slot = next++;
      c = slot;
    }
    comp_count_ = next;
  }

  double total_energy() const {
    double fidelity = 0.0;
    for (Index u = 0; u < n_; ++u)
      fidelity += weights_[u] *
                  (f_.row(u) - comp_mean_.row(comp_of_[static_cast<std::size_t>(u)])).squaredNorm();
    double cut = 0.0;
    for (Index e = 0; e < graph_.edge_count(); ++e)
      if (comp_of_[static_cast<std::size_t>(graph_.edges(e, 0))] !=
          comp_of_[static_cast<std::size_t>(graph_.edges(e, 1))])
        cut += graph_.weights[e];
    return fidelity + config_.lambda * cut;
  }

  // 2-means seeding followed by alternating binary min-cuts, then a
  // connectivity refinement. `local_of` is caller-owned scratch of size n_,
  // all -1 on entry and restored to -1 before returning. Writes the
  // per-member piece labels into `out` and returns true only on strict
  // component-local energy decrease.
  bool try_split(Index comp, std::vector<Index>& local_of, std::vector<Index>& out) const {
    const auto& nodes = members_[static_cast<std::size_t>(comp)];
    const Index m = static_cast<Index>(nodes.size());
    bool improved = false;

    if (m >= 2) {
      Index seed_a = nodes[0];
      double best = -1.0;
      for (Index u : nodes) {
        const double dist = (f_.row(u) - comp_mean_.row(comp)).squaredNorm();
        if (dist > best) {
          best = dist;
          seed_a = u;
        }
      }
      Index seed_b = nodes[0];
      best = -1.0;
      for (Index u : nodes) {
        const double dist = (f_.row(u) - f_.row(seed_a)).squaredNorm();
        if (dist > best) {
          best = dist;
          seed_b = u;
        }
      }
      if (!rows_equal(f_, seed_a, f_, seed_b)) {
        for (Index i = 0; i < m; ++i)
          local_of[static_cast<std::size_t>(nodes[static_cast<std::size_t>(i)])] = i;
        improved = split_with_seeds(nodes, local_of, f_.row(seed_a).transpose(),
                                    f_.row(seed_b).transpose(), comp, out);
        for (Index u : nodes) local_of[static_cast<std::size_t>(u)] = -1;
      }
    }
    return improved;
  }

  bool split_with_seeds(const std::vector<Index>& nodes, const std::vector<Index>& local_of,
                        Vec mu_a, Vec mu_b, Index comp, std::vector<Index>& out) const {
    const Index m = static_cast<Index>(nodes.size());
    std::vector<std::int32_t> side(static_cast<std::size_t>(m), 0);

    for (int inner = 0; inner < config_.split_inner_iters; ++inner) {
      MaxFlow flow(static_cast<std::int32_t>(m));
      for (Index i = 0; i < m; ++i) {
        const Index u = nodes[static_cast<std::size_t>(i)];
        const double da = weights_[u] * (f_.row(u).transpose() - mu_a).squaredNorm();
        const double db = weights_[u] * (f_.row(u).transpose() - mu_b).squaredNorm();
        // Source side = candidate A: the cut pays db when u leaves A.
        flow.add_terminal(static_cast<std::int32_t>(i), db, da);
      }
      for (Index i = 0; i < m; ++i) {
        const Index u = nodes[static_cast<std::size_t>(i)];
        for (Index a = csr_.offsets[static_cast<std::size_t>(u)];
             a < csr_.offsets[static_cast<std::size_t>(u) + 1]; ++a) {
          const Index v = csr_.neighbors[static_cast<std::size_t>(a)];
          if (v <= u) continue;
          const Index j = local_of[static_cast<std::size_t>(v)];
          if (j < 0) continue;
          const double w = config_.lambda * csr_.weights[static_cast<std::size_t>(a)];
          flow.add_edge(static_cast<std::int32_t>(i), static_cast<std::int32_t>(j), w, w);
        }
      }
      flow.solve();

      Vec sum_a = Vec::Zero(d_), sum_b = Vec::Zero(d_);
      double mass_a = 0.0, mass_b = 0.0;
      for (Index i = 0; i < m; ++i) {
        const Index u = nodes[static_cast<std::size_t>(i)];
        const bool on_a = flow.source_side(static_cast<std::int32_t>(i));
        side[static_cast<std::size_t>(i)] = on_a ? 0 : 1;
        if (on_a) {
          sum_a += weights_[u] * f_.row(u).transpose();
          mass_a += weights_[u];
        } else {
          sum_b += weights_[u] * f_.row(u).transpose();
          mass_b += weights_[u];
        }
      }
      if (mass_a == 0.0 || mass_b == 0.0) return false;
      mu_a = sum_a / mass_a;
      mu_b = sum_b / mass_b;
    }

    // Refine the two sides into connected pieces.
    out.assign(static_cast<std::size_t>(m), -1);
    Index piece_count = 0;
    std::vector<Index> stack;
    for (Index i = 0; i < m; ++i) {
      if (out[static_cast<std::size_t>(i)] >= 0) continue;
      out[static_cast<std::size_t>(i)] = piece_count;
      stack.push_back(i);
      while (!stack.empty()) {
        const Index cur = stack.back();
        stack.pop_back();
        const Index u = nodes[static_cast<std::size_t>(cur)];
        for (Index a = csr_.offsets[static_cast<std::size_t>(u)];
             a < csr_.offsets[static_cast<std::size_t>(u) + 1]; ++a) {
          const Index j = local_of[static_cast<std::size_t>(csr_.neighbors[static_cast<std::size_t>(a)])];
          if (j < 0 || out[static_cast<std::size_t>(j)] >= 0 ||
              side[static_cast<std::size_t>(j)] != side[static_cast<std::size_t>(cur)])
            continue;
          out[static_cast<std::size_t>(j)] = piece_count;
          stack.push_back(j);
        }
      }
      ++piece_count;
    }
    if (piece_count < 2) return false;

    Mat piece_sum = Mat::Zero(piece_count, d_);
    Vec piece_mass = Vec::Zero(piece_count);
    for (Index i = 0; i < m; ++i) {
      const Index u = nodes[static_cast<std::size_t>(i)];
      piece_sum.row(out[static_cast<std::size_t>(i)]) += weights_[u] * f_.row(u);
      piece_mass[out[static_cast<std::size_t>(i)]] += weights_[u];
    }

    double old_fidelity = 0.0, new_fidelity = 0.0, new_cut = 0.0;
    for (Index i = 0; i < m; ++i) {
      const Index u = nodes[static_cast<std::size_t>(i)];
      const Index pc = out[static_cast<std::size_t>(i)];
      old_fidelity += weights_[u] * (f_.row(u) - comp_mean_.row(comp)).squaredNorm();
      new_fidelity += weights_[u] * (f_.row(u) - piece_sum.row(pc) / piece_mass[pc]).squaredNorm();
      for (Index a = csr_.offsets[static_cast<std::size_t>(u)];
           a < csr_.offsets[static_cast<std::size_t>(u) + 1]; ++a) {
        const Index v = csr_.neighbors[static_cast<std::size_t>(a)];
        if (v <= u) continue;
        const Index j = local_of[static_cast<std::size_t>(v)];
        if (j >= 0 && out[static_cast<std::size_t>(j)] != pc)
          new_cut += csr_.weights[static_cast<std::size_t>(a)];
      }
    }
    return new_fidelity + config_.lambda * new_cut < old_fidelity;
  }

  bool split_pass() {
    std::vector<std::vector<Index>> result(static_cast<std::size_t>(comp_count_));
    std::vector<std::uint8_t> accepted(static_cast<std::size_t>(comp_count_), 0);
    auto chunk = [&](Index begin, Index end) {
      std::vector<Index> local_of(static_cast<std::size_t>(n_), -1);
      std::vector<Index> label;
      for (Index c = begin; c < end; ++c) {
        if (try_split(c, local_of, label)) {
          result[static_cast<std::size_t>(c)] = label;
          accepted[static_cast<std::size_t>(c)] = 1;
        }
      }
    };
    if (config_.parallel) {
      parallel_chunks(0, comp_count_, chunk);
    } else {
      chunk(0, comp_count_);
    }

    bool any = false;
    Index next_id = comp_count_;
    for (Index c = 0; c < comp_count_; ++c) {
      if (!accepted[static_cast<std::size_t>(c)]) continue;
      any = true;
      const auto& nodes = members_[static_cast<std::size_t>(c)];
      const auto& label = result[static_cast<std::size_t>(c)];
      Index pieces = 0;
      for (std::size_t i = 0; i < nodes.size(); ++i) {
        pieces = std::max(pieces, label[i] + 1);
        if (label[i] > 0)
          comp_of_[static_cast<std::size_t>(nodes[i])] = next_id + label[i] - 1;
      }
      next_id += pieces - 1;
    }
    if (any) {
      comp_count_ = next_id;
      renumber();
      rebuild_members();
    }
    return any;
  }

  bool merge_pass() {
    bool any = false;
    while (true) {
      std::map<std::pair<Index, Index>, double> reduced;
      for (Index e = 0; e < graph_.edge_count(); ++e) {
        Index cu = comp_of_[static_cast<std::size_t>(graph_.edges(e, 0))];
        Index cv = comp_of_[static_cast<std::size_t>(graph_.edges(e, 1))];
        if (cu == cv) continue;
        if (cu > cv) std::swap(cu, cv);
        reduced[{cu, cv}] += graph_.weights[e];
      }
      if (reduced.empty()) break;

      std::vector<Index> root(static_cast<std::size_t>(comp_count_));
      std::iota(root.begin(), root.end(), 0);
      auto find = [&](Index c) {
        while (root[static_cast<std::size_t>(c)] != c) {
          root[static_cast<std::size_t>(c)] =
              root[static_cast<std::size_t>(root[static_cast<std::size_t>(c)])];
          c = root[static_cast<std::size_t>(c)];
        }
        return c;
      };
      // A merged group's crossing weights go stale; such pairs wait for the
      // next sweep so every gain uses exact weights.
      std::vector<std::uint8_t> dirty(static_cast<std::size_t>(comp_count_), 0);
      Mat sum = comp_mean_;
      for (Index c = 0; c < comp_count_; ++c) sum.row(c) *= comp_mass_[c];
      Vec mass = comp_mass_;

      bool merged = false;
      for (const auto& [pair, w_uv] : reduced) {
        const Index u = pair.first, v = pair.second;
        if (dirty[static_cast<std::size_t>(u)] || dirty[static_cast<std::size_t>(v)]) continue;
        const Vec mu_u = sum.row(u).transpose() / mass[u];
        const Vec mu_v = sum.row(v).transpose() / mass[v];
        const double fidelity_increase =
            mass[u] * mass[v] / (mass[u] + mass[v]) * (mu_u - mu_v).squaredNorm();
        if (config_.lambda * w_uv - fidelity_increase > 0.0) {
          root[static_cast<std::size_t>(v)] = u;
          sum.row(u) += sum.row(v);
          mass[u] += mass[v];
          dirty[static_cast<std::size_t>(u)] = dirty[static_cast<std::size_t>(v)] = 1;
          merged = true;
        }
      }
      if (!merged) break;
      any = true;
      for (Index n = 0; n < n_; ++n)
        comp_of_[static_cast<std::size_t>(n)] = find(comp_of_[static_cast<std::size_t>(n)]);
      renumber();
      rebuild_members();
    }
    return any;
  }

  const Mat& f_;
  const WeightedGraph& graph_;
  GraphCsr csr_;
  SolverConfig config_;
  Vec weights_;
  Index n_, d_;
  std::vector<Index> comp_of_;
  Index comp_count_{0};
  std::vector<std::vector<Index>> members_;
  Mat comp_mean_;
  Vec comp_mass_;
};

}  // namespace

double energy(const Mat& signal, const Mat& f, const WeightedGraph& graph, double lambda,
              const Vec& node_weight) {
  require(signal.rows() == f.rows() && signal.cols() == f.cols(), "signal/f shape mismatch");
  require(static_cast<Index>(f.rows()) == graph.node_count, "graph/f node count mismatch");
  require(lambda >= 0.0, "lambda must be >= 0");
  const Vec weights = resolve_weights(node_weight, graph.node_count);
  double fidelity = 0.0;
  for (Index u = 0; u < graph.node_count; ++u)
    fidelity += weights[u] * (signal.row(u) - f.row(u)).squaredNorm();
  double cut = 0.0;
  for (Index e = 0; e < graph.edge_count(); ++e)
    if (!rows_equal(signal, graph.edges(e, 0), signal, graph.edges(e, 1)))
      cut += graph.weights[e];
  return fidelity + lambda * cut;
}

double energy(const Partition& partition, const Mat& f, const WeightedGraph& graph, double lambda,
              const Vec& node_weight) {
  require(static_cast<Index>(partition.super_index.size()) == graph.node_count,
          "partition/graph node count mismatch");
  require(static_cast<Index>(f.rows()) == graph.node_count, "graph/f node count mismatch");
  require(lambda >= 0.0, "lambda must be >= 0");
  const Vec weights = resolve_weights(node_weight, graph.node_count);
  double fidelity = 0.0;
  for (Index u = 0; u < graph.node_count; ++u)
    fidelity += weights[u] *
                (partition.component_value.row(partition.super_index[u]) - f.row(u)).squaredNorm();
  return fidelity + lambda * cut_weight(partition.super_index, graph);
}

Partition minimize_l0(const Mat& f, const WeightedGraph& graph, const SolverConfig& config,
                      const Vec& node_weight) {
  require(static_cast<Index>(f.rows()) == graph.node_count, "graph/f node count mismatch");
  require(config.lambda >= 0.0, "lambda must be >= 0");
  require(config.max_outer_iters >= 1 && config.split_inner_iters >= 1,
          "iteration counts must be >= 1");
  const Vec weights = resolve_weights(node_weight, graph.node_count);
  if (graph.node_count == 0) return Partition{};
  if (config.lambda == 0.0) return level_set_partition(f, graph, weights);

  Solver solver(f, graph, config, weights);
  Partition result = solver.run();

  // The heuristic must never lose to e = f; its connected level sets have
  // the same energy and serve as the fallback.
  Partition level_sets = level_set_partition(f, graph, weights);
  if (energy(level_sets, f, graph, config.lambda, weights) <
      energy(result, f, graph, config.lambda, weights))
    return level_sets;
  return result;
}

Partition brute_force_partition(const Mat& f, const WeightedGraph& graph, double lambda) {
  const Index n = graph.node_count;
  const Index e_count = graph.edge_count();
  require(static_cast<Index>(f.rows()) == n, "graph/f node count mismatch");
  require(n >= 1, "graph must have at least one node");
  require(n <= 12, "brute force refuses N > 12");
  require(e_count <= 24, "brute force refuses E > 24");
  require(lambda >= 0.0, "lambda must be >= 0");

  const Vec weights = Vec::Ones(n);
  double best_energy = std::numeric_limits<double>::infinity();
  std::vector<Index> best_labels;

  std::vector<Index> parent(static_cast<std::size_t>(n));
  std::vector<Index> labels(static_cast<std::size_t>(n));
  std::vector<Index> remap(static_cast<std::size_t>(n));
  for (std::uint64_t mask = 0; mask < (1ull << e_count); ++mask) {
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](Index u) {
      while (parent[static_cast<std::size_t>(u)] != u) {
        parent[static_cast<std::size_t>(u)] =
            parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(u)])];
        u = parent[static_cast<std::size_t>(u)];
      }
      return u;
    };
    for (Index e = 0; e < e_count; ++e) {
      if (mask & (1ull << e)) continue;  // bit set = edge cut
      const Index ru = find(graph.edges(e, 0)), rv = find(graph.edges(e, 1));
      if (ru != rv) parent[static_cast<std::size_t>(std::max(ru, rv))] = std::min(ru, rv);
    }
    std::fill(remap.begin(), remap.end(), -1);
    Index next = 0;
    for (Index u = 0; u < n; ++u) {
      Index& slot = remap[static_cast<std::size_t>(find(u))];
      if (slot < 0) slot = next++;
      labels[static_cast<std::size_t>(u)] = slot;
    }

    Mat sum = Mat::Zero(next, f.cols());
    IndexVec count = IndexVec::Zero(next);
    for (Index u = 0; u < n; ++u) {
      sum.row(labels[static_cast<std::size_t>(u)]) += f.row(u);
      count[labels[static_cast<std::size_t>(u)]] += 1;
    }
    double fidelity = 0.0;
    for (Index u = 0; u < n; ++u) {
      const Index c = labels[static_cast<std::size_t>(u)];
      fidelity += (f.row(u) - sum.row(c) / static_cast<double>(count[c])).squaredNorm();
    }
    double cut = 0.0;
    for (Index e = 0; e < e_count; ++e)
      if (labels[static_cast<std::size_t>(graph.edges(e, 0))] !=
          labels[static_cast<std::size_t>(graph.edges(e, 1))])
        cut += graph.weights[e];
    const double energy_value = fidelity + lambda * cut;

    if (energy_value < best_energy ||
        (energy_value == best_energy && labels < best_labels)) {
      best_energy = energy_value;
      best_labels = labels;
    }
  }
  return canonicalize(best_labels, f, weights);
}

}  // namespace superpart
