#include "superpart/spt_kernel.hpp"

#include "superpart/parallel.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_map>

static_assert(std::endian::native == std::endian::little,
              "parameter blobs assume a little endian host");

namespace superpart {

namespace {

constexpr double kLeakySlope = 0.01;
constexpr double kStdFloor = 1e-5;
constexpr double kLogClamp = 1e-12;
constexpr double kRadiusFloor = 1e-9;

// Sum in value order so reductions do not depend on row ordering.
double sorted_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

void validate(const KernelConfig& config) {
  require(config.d_point >= 1 && config.d_adj >= 1 && config.d_val >= 1 && config.d_key >= 1,
          "all dimensions must be >= 1");
  require(config.n_heads >= 1 && config.n_blocks_enc >= 1 && config.n_blocks_dec >= 1,
          "head and block counts must be >= 1");
  require(config.d_val % config.n_heads == 0, "d_val must be divisible by n_heads");
  require(config.dropout_p >= 0.0 && config.dropout_p < 1.0, "dropout_p must be in [0,1)");
  require(config.n_min >= 1 && config.n_max >= config.n_min, "need 1 <= n_min <= n_max");
}

Mat mlp_forward(const Mlp& mlp, const Mat& input) {
  require(!mlp.layers.empty(), "mlp has no layers");
  Mat y = input;
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    const LinearLayer& layer = mlp.layers[l];
    require(y.cols() == layer.w.cols(), "mlp input width mismatch");
    y = (y * layer.w.transpose()).rowwise() + layer.b.transpose();
    if (l + 1 < mlp.layers.size())
      y = y.unaryExpr([](double v) { return v > 0.0 ? v : kLeakySlope * v; });
  }
  return y;
}

Mat graph_norm(const Mat& features, const IndexVec& node_to_sample,
               const GraphNormParams& params) {
  const Index s = features.rows(), d = features.cols();
  require(params.scale.size() == d && params.shift.size() == d && params.mean_scale.size() == d,
          "graph_norm parameter width mismatch");
  require(node_to_sample.size() == 0 || node_to_sample.size() == s,
          "node_to_sample length mismatch");

  Index n_samples = 1;
  if (node_to_sample.size() > 0) {
    for (Index i = 0; i < s; ++i) {
      require(node_to_sample[i] >= 0, "negative sample id");
      n_samples = std::max(n_samples, node_to_sample[i] + 1);
    }
  }
  std::vector<std::vector<Index>> rows_of(static_cast<std::size_t>(n_samples));
  for (Index i = 0; i < s; ++i)
    rows_of[static_cast<std::size_t>(node_to_sample.size() > 0 ? node_to_sample[i] : 0)]
        .push_back(i);

  Mat out(s, d);
  std::vector<double> scratch;
  for (const std::vector<Index>& rows : rows_of) {
    if (rows.empty()) continue;
    const double n = static_cast<double>(rows.size());
    for (Index c = 0; c < d; ++c) {
      scratch.clear();
      for (Index r : rows) scratch.push_back(features(r, c));
      const double mean = sorted_sum(scratch) / n;
      const double shifted_mean = params.mean_scale[c] * mean;
      scratch.clear();
      for (Index r : rows) {
        const double dev = features(r, c) - shifted_mean;
        scratch.push_back(dev * dev);
      }
      const double std_dev = std::max(std::sqrt(sorted_sum(scratch) / n), kStdFloor);
      for (Index r : rows)
        out(r, c) =
            params.scale[c] * (features(r, c) - shifted_mean) / std_dev + params.shift[c];
    }
  }
  return out;
}

namespace {

void group_by_source(const EdgeList& edges, Index n_nodes, std::vector<Index>& offsets,
                     std::vector<Index>& edge_order) {
  const Index e_count = edges.rows();
  offsets.assign(static_cast<std::size_t>(n_nodes) + 1, 0);
  for (Index e = 0; e < e_count; ++e) {
    const Index p = edges(e, 0);
    require(p >= 0 && p < n_nodes && edges(e, 1) >= 0 && edges(e, 1) < n_nodes,
            "edge endpoint out of range");
    ++offsets[static_cast<std::size_t>(p) + 1];
  }
  for (Index i = 0; i < n_nodes; ++i)
    offsets[static_cast<std::size_t>(i) + 1] += offsets[static_cast<std::size_t>(i)];
  edge_order.resize(static_cast<std::size_t>(e_count));
  std::vector<Index> fill(offsets.begin(), offsets.end() - 1);
  for (Index e = 0; e < e_count; ++e)
    edge_order[static_cast<std::size_t>(fill[static_cast<std::size_t>(edges(e, 0))]++)] = e;
}

}  // namespace

Mat attention_forward(const AttentionInput& in, AttentionCache* cache) {
  const Index s = in.v.rows();
  const Index h = in.n_heads;
  require(h >= 1, "n_heads must be >= 1");
  require(in.k.rows() == s && in.q.rows() == s, "K/Q/V row counts differ");
  require(in.k.cols() == in.q.cols() && in.k.cols() % h == 0, "K/Q width must be n_heads*d_key");
  require(in.v.cols() % h == 0, "V width must be divisible by n_heads");
  const Index dk = in.k.cols() / h;
  const Index dv = in.v.cols();
  const Index dvh = dv / h;
  const Index e_count = in.edges.rows();
  require(in.a_key.rows() == e_count && in.a_key.cols() == dk, "a_key shape mismatch");
  require(in.a_que.rows() == e_count && in.a_que.cols() == dk, "a_que shape mismatch");
  require(in.a_val.rows() == e_count && in.a_val.cols() == dv, "a_val shape mismatch");

  std::vector<Index> offsets, edge_order;
  group_by_source(in.edges, s, offsets, edge_order);

  Mat weights(e_count, h);
  Mat out = Mat::Zero(s, dv);
  std::atomic<bool> saw_empty{false};
  parallel_for(0, s, [&](Index p) {
    const Index begin = offsets[static_cast<std::size_t>(p)];
    const Index end = offsets[static_cast<std::size_t>(p) + 1];
    const Index deg = end - begin;
    if (deg == 0) {
      saw_empty.store(true, std::memory_order_relaxed);
      return;
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(deg));
    std::vector<double> score(static_cast<std::size_t>(deg));
    for (Index head = 0; head < h; ++head) {
      const Index kq0 = head * dk, v0 = head * dvh;
      double max_score = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < deg; ++j) {
        const Index e = edge_order[static_cast<std::size_t>(begin + j)];
        const Index q_node = in.edges(e, 1);
        double dot = 0.0;
        for (Index d = 0; d < dk; ++d)
          dot += (in.q(p, kq0 + d) + in.a_que(e, d)) * (in.k(q_node, kq0 + d) + in.a_key(e, d));
        score[static_cast<std::size_t>(j)] = dot * inv_sqrt;
        max_score = std::max(max_score, score[static_cast<std::size_t>(j)]);
      }
      double sum = 0.0;
      for (Index j = 0; j < deg; ++j) {
        const double w = std::exp(score[static_cast<std::size_t>(j)] - max_score);
        score[static_cast<std::size_t>(j)] = w;
        sum += w;
      }
      for (Index j = 0; j < deg; ++j) {
        const Index e = edge_order[static_cast<std::size_t>(begin + j)];
        const double w = score[static_cast<std::size_t>(j)] / sum;
        weights(e, head) = w;
        for (Index d = 0; d < dvh; ++d)
          out(p, v0 + d) += w * (in.v(in.edges(e, 1), v0 + d) + in.a_val(e, v0 + d));
      }
    }
  });
  require(!in.strict || !saw_empty.load(), "node without neighbors in strict attention");

  if (cache) {
    cache->offsets = std::move(offsets);
    cache->edge_order = std::move(edge_order);
    cache->weights = std::move(weights);
  }
  return out;
}

AttentionGrads attention_backward(const AttentionInput& in, const AttentionCache& cache,
                                  const Mat& grad_out) {
  const Index s = in.v.rows();
  const Index h = in.n_heads;
  const Index dk = in.k.cols() / h;
  const Index dv = in.v.cols();
  const Index dvh = dv / h;
  require(grad_out.rows() == s && grad_out.cols() == dv, "grad_out shape mismatch");
  require(cache.weights.rows() == in.edges.rows() && cache.weights.cols() == h,
          "cache does not match input");

  AttentionGrads grads;
  grads.k = Mat::Zero(s, in.k.cols());
  grads.q = Mat::Zero(s, in.q.cols());
  grads.v = Mat::Zero(s, dv);
  grads.a_key = Mat::Zero(in.edges.rows(), dk);
  grads.a_que = Mat::Zero(in.edges.rows(), dk);
  grads.a_val = Mat::Zero(in.edges.rows(), dv);

  std::vector<double> t;
  for (Index p = 0; p < s; ++p) {
    const Index begin = cache.offsets[static_cast<std::size_t>(p)];
    const Index end = cache.offsets[static_cast<std::size_t>(p) + 1];
    const Index deg = end - begin;
    if (deg == 0) continue;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(deg));
    t.resize(static_cast<std::size_t>(deg));
    for (Index head = 0; head < h; ++head) {
      const Index kq0 = head * dk, v0 = head * dvh;
      double weighted_t = 0.0;
      for (Index j = 0; j < deg; ++j) {
        const Index e = cache.edge_order[static_cast<std::size_t>(begin + j)];
        const Index q_node = in.edges(e, 1);
        double dot = 0.0;
        for (Index d = 0; d < dvh; ++d)
          dot += grad_out(p, v0 + d) * (in.v(q_node, v0 + d) + in.a_val(e, v0 + d));
        t[static_cast<std::size_t>(j)] = dot;
        weighted_t += cache.weights(e, head) * dot;
      }
      for (Index j = 0; j < deg; ++j) {
        const Index e = cache.edge_order[static_cast<std::size_t>(begin + j)];
        const Index q_node = in.edges(e, 1);
        const double w = cache.weights(e, head);
        for (Index d = 0; d < dvh; ++d) {
          const double gv = w * grad_out(p, v0 + d);
          grads.v(q_node, v0 + d) += gv;
          grads.a_val(e, v0 + d) += gv;
        }
        const double dscore = w * (t[static_cast<std::size_t>(j)] - weighted_t) * inv_sqrt;
        for (Index d = 0; d < dk; ++d) {
          const double key_term = dscore * (in.k(q_node, kq0 + d) + in.a_key(e, d));
          const double que_term = dscore * (in.q(p, kq0 + d) + in.a_que(e, d));
          grads.q(p, kq0 + d) += key_term;
          grads.a_que(e, d) += key_term;
          grads.k(q_node, kq0 + d) += que_term;
          grads.a_key(e, d) += que_term;
        }
      }
    }
  }
  return grads;
}

Mat maxpool_children(const Mat& child_features, const IndexVec& parent_of, Index parent_count) {
  require(parent_of.size() == child_features.rows(), "parent map length mismatch");
  require(parent_count >= 1, "parent_count must be >= 1");
  Mat pooled = Mat::Constant(parent_count, child_features.cols(),
                             -std::numeric_limits<double>::infinity());
  std::vector<char> seen(static_cast<std::size_t>(parent_count), 0);
  for (Index c = 0; c < child_features.rows(); ++c) {
    const Index p = parent_of[c];
    require(p >= 0 && p < parent_count, "parent id out of range");
    seen[static_cast<std::size_t>(p)] = 1;
    pooled.row(p) = pooled.row(p).cwiseMax(child_features.row(c));
  }
  for (Index p = 0; p < parent_count; ++p)
    require(seen[static_cast<std::size_t>(p)], "parent without children");
  return pooled;
}

Mat adjacency_encodings(const SuperpointGraph& graph, const LevelParams& params) {
  require(graph.features.rows() == graph.edge_count() && graph.features.cols() == 18,
          "graph is missing its 18 adjacency features");
  if (graph.edge_count() == 0)
    return Mat::Zero(0, params.adj_mlp.out_dim());
  return mlp_forward(params.adj_mlp, graph.features);
}

Mat transformer_stack(const Mat& input, const SuperpointGraph& graph, const Mat& adj,
                      const std::vector<AttentionBlockParams>& blocks,
                      const KernelConfig& config) {
  const Index dk = config.d_key, dv = config.d_val;
  require(input.cols() == dv, "transformer input width must be d_val");
  require(adj.cols() == 2 * dk + dv, "adjacency encoding width must be 2*d_key + d_val");
  require(adj.rows() == graph.edge_count(), "adjacency encoding row count mismatch");

  Mat g = input;
  AttentionInput att;
  att.n_heads = config.n_heads;
  att.edges = graph.edges;
  att.a_key = adj.middleCols(0, dk);
  att.a_que = adj.middleCols(dk, dk);
  att.a_val = adj.middleCols(2 * dk, dv);
  for (const AttentionBlockParams& block : blocks) {
    const Mat y = graph_norm(g, IndexVec(), block.norm);
    att.k = y * block.w_key.transpose();
    att.q = y * block.w_que.transpose();
    att.v = y * block.w_val.transpose();
    g += attention_forward(att);
  }
  return g;
}

Mat encode_pooled(const Mat& pooled, const MatX3& x_level, const SuperpointGraph& graph,
                  const LevelParams& params, const KernelConfig& config) {
  require(pooled.rows() == x_level.rows(), "pooled features and x row counts differ");
  Mat input(pooled.rows(), 3 + pooled.cols());
  input << x_level, pooled;
  return transformer_stack(mlp_forward(params.enc_mlp, input), graph,
                           adjacency_encodings(graph, params), params.enc_blocks, config);
}

Mat encode_level(const Mat& child_features, const MatX3& x_level, const IndexVec& parent_of_child,
                 const SuperpointGraph& graph, const LevelParams& params,
                 const KernelConfig& config) {
  return encode_pooled(maxpool_children(child_features, parent_of_child, x_level.rows()), x_level,
                       graph, params, config);
}

Mat decode_level(const Mat& g_level, const Mat& h_above, const MatX3& x_level,
                 const IndexVec& parent_of, const SuperpointGraph& graph,
                 const LevelParams& params, const KernelConfig& config) {
  const Index s = g_level.rows();
  require(x_level.rows() == s && parent_of.size() == s, "decode input row counts differ");
  require(!params.dec_mlp.layers.empty(), "level has no decoder parameters");
  Mat input(s, 3 + g_level.cols() + h_above.cols());
  for (Index p = 0; p < s; ++p) {
    require(parent_of[p] >= 0 && parent_of[p] < h_above.rows(), "parent id out of range");
    input.row(p) << x_level.row(p), g_level.row(p), h_above.row(parent_of[p]);
  }
  return transformer_stack(mlp_forward(params.dec_mlp, input), graph,
                           adjacency_encodings(graph, params), params.dec_blocks, config);
}

std::vector<MatX3> relative_positions(const HierarchicalPartition& hp, const MatX3& positions,
                                      const Vec3& scene_center) {
  const Index levels = hp.level_count();
  require(levels >= 1, "hierarchy has no levels");
  require(positions.rows() == hp.point_count, "positions row count mismatch");

  std::vector<MatX3> x(static_cast<std::size_t>(levels) + 1);
  for (Index i = 0; i <= levels; ++i) {
    const MatX3& child_pos =
        i == 0 ? positions : hp.levels[static_cast<std::size_t>(i) - 1].centroids;
    const Index n = child_pos.rows();
    MatX3 rel(n, 3);
    if (i == levels) {
      for (Index c = 0; c < n; ++c) rel.row(c) = child_pos.row(c) - scene_center.transpose();
      double radius = 0.0;
      for (Index c = 0; c < n; ++c) radius = std::max(radius, rel.row(c).norm());
      rel /= std::max(radius, kRadiusFloor);
    } else {
      const HierarchyLevel& parent_level = hp.levels[static_cast<std::size_t>(i)];
      require(parent_level.super_index.size() == n, "hierarchy level size mismatch");
      const Index parents = parent_level.component_count();
      for (Index c = 0; c < n; ++c)
        rel.row(c) = child_pos.row(c) - parent_level.centroids.row(parent_level.super_index[c]);
      Vec radius = Vec::Zero(parents);
      for (Index c = 0; c < n; ++c) {
        double& r = radius[parent_level.super_index[c]];
        r = std::max(r, rel.row(c).norm());
      }
      for (Index c = 0; c < n; ++c)
        rel.row(c) /= std::max(radius[parent_level.super_index[c]], kRadiusFloor);
    }
    x[static_cast<std::size_t>(i)] = std::move(rel);
  }
  return x;
}

std::vector<Mat> forward_full(const Mat& point_features, const MatX3& positions,
                              const HierarchicalPartition& hp,
                              const std::vector<SuperpointGraph>& graphs,
                              const ParamBundle& params, const KernelConfig& config) {
  validate(config);
  const Index levels = hp.level_count();
  require(levels >= 1, "hierarchy has no levels");
  require(static_cast<Index>(graphs.size()) == levels, "need one graph per level");
  require(static_cast<Index>(params.levels.size()) == levels, "need params for every level");
  require(point_features.rows() == hp.point_count, "point feature row count mismatch");

  const Vec3 scene_center = positions.colwise().mean().transpose();
  const std::vector<MatX3> x = relative_positions(hp, positions, scene_center);

  std::vector<Mat> g(static_cast<std::size_t>(levels));
  const IndexVec& level1_parent = hp.levels[0].super_index;
  if (config.nano_mode) {
    const Index s1 = hp.size_at(1);
    Mat mean_hf = Mat::Zero(s1, point_features.cols());
    Vec counts = Vec::Zero(s1);
    for (Index p = 0; p < hp.point_count; ++p) {
      mean_hf.row(level1_parent[p]) += point_features.row(p);
      counts[level1_parent[p]] += 1.0;
    }
    for (Index c = 0; c < s1; ++c) {
      require(counts[c] > 0.0, "level-1 superpoint without points");
      mean_hf.row(c) /= counts[c];
    }
    g[0] = encode_pooled(mean_hf, x[1], graphs[0], params.levels[0], config);
  } else {
    require(!params.point_mlp.layers.empty(), "point mlp missing outside nano mode");
    Mat input0(hp.point_count, 3 + point_features.cols());
    input0 << x[0], point_features;
    const Mat g0 = mlp_forward(params.point_mlp, input0);
    g[0] = encode_level(g0, x[1], level1_parent, graphs[0], params.levels[0], config);
  }
  for (Index i = 2; i <= levels; ++i)
    g[static_cast<std::size_t>(i) - 1] = encode_level(
        g[static_cast<std::size_t>(i) - 2], x[static_cast<std::size_t>(i)],
        hp.levels[static_cast<std::size_t>(i) - 1].super_index,
        graphs[static_cast<std::size_t>(i) - 1], params.levels[static_cast<std::size_t>(i) - 1],
        config);

  std::vector<Mat> h(static_cast<std::size_t>(levels));
  h[static_cast<std::size_t>(levels) - 1] = g[static_cast<std::size_t>(levels) - 1];
  for (Index i = levels - 1; i >= 1; --i)
    h[static_cast<std::size_t>(i) - 1] = decode_level(
        g[static_cast<std::size_t>(i) - 1], h[static_cast<std::size_t>(i)],
        x[static_cast<std::size_t>(i)], hp.levels[static_cast<std::size_t>(i)].super_index,
        graphs[static_cast<std::size_t>(i) - 1], params.levels[static_cast<std::size_t>(i) - 1],
        config);

  std::vector<Mat> logits(static_cast<std::size_t>(levels));
  for (Index i = 0; i < levels; ++i) {
    const LevelParams& lp = params.levels[static_cast<std::size_t>(i)];
    logits[static_cast<std::size_t>(i)] =
        (h[static_cast<std::size_t>(i)] * lp.classifier_w.transpose()).rowwise() +
        lp.classifier_b.transpose();
  }
  return logits;
}

namespace {

Vec softmax_row(const Mat& logits, Index row) {
  Vec z = logits.row(row).transpose();
  const double m = z.maxCoeff();
  z = (z.array() - m).exp();
  return z / z.sum();
}

}  // namespace

LossBreakdown hierarchical_loss(const std::vector<Mat>& logits, const HierarchicalPartition& hp,
                                const Eigen::VectorXi& labels,
                                const std::vector<double>& mu_weights) {
  const Index levels = hp.level_count();
  require(static_cast<Index>(logits.size()) == levels, "need logits for every level");
  require(static_cast<Index>(mu_weights.size()) == levels - 1,
          "need one mu weight per level beyond the first");
  require(labels.size() == hp.point_count, "labels length mismatch");

  Index total_labeled = 0;
  int n_classes = 0;
  for (Index p = 0; p < hp.point_count; ++p) {
    require(labels[p] >= -1, "labels must be >= -1");
    if (labels[p] >= 0) {
      ++total_labeled;
      n_classes = std::max(n_classes, labels[p] + 1);
    }
  }
  require(total_labeled > 0, "no labeled points");

  LossBreakdown out;
  out.per_level.assign(static_cast<std::size_t>(levels), 0.0);
  for (Index i = 1; i <= levels; ++i) {
    const Mat& z = logits[static_cast<std::size_t>(i) - 1];
    const Index s = hp.size_at(i);
    require(z.rows() == s, "logits row count mismatch");
    require(z.cols() >= n_classes, "logits have fewer columns than classes");
    const Index k = z.cols();

    const IndexVec to_level = hp.compose_to(i);
    Mat histogram = Mat::Zero(s, k);
    for (Index p = 0; p < hp.point_count; ++p)
      if (labels[p] >= 0) histogram(to_level[p], labels[p]) += 1.0;

    const double mu = i == 1 ? 1.0 : mu_weights[static_cast<std::size_t>(i) - 2];
    double level_term = 0.0;
    for (Index c = 0; c < s; ++c) {
      const double labeled = histogram.row(c).sum();
      if (labeled == 0.0) continue;
      const Vec soft = softmax_row(z, c);
      double entropy = 0.0;
      if (i == 1) {
        Index majority = 0;
        for (Index cls = 1; cls < k; ++cls)
          if (histogram(c, cls) > histogram(c, majority)) majority = cls;
        entropy = -std::log(std::max(soft[majority], kLogClamp));
      } else {
        for (Index cls = 0; cls < k; ++cls) {
          if (histogram(c, cls) == 0.0) continue;
          entropy -= histogram(c, cls) / labeled * std::log(std::max(soft[cls], kLogClamp));
        }
      }
      level_term += mu * labeled / static_cast<double>(total_labeled) * entropy;
    }
    out.per_level[static_cast<std::size_t>(i) - 1] = level_term;
    out.total += level_term;
  }
  return out;
}

DropoutView superpoint_dropout(const HierarchicalPartition& hp, double p_drop,
                               std::uint64_t seed) {
  require(p_drop >= 0.0 && p_drop < 1.0, "p_drop must be in [0,1)");
  const Index levels = hp.level_count();
  require(levels >= 1, "hierarchy has no levels");

  std::mt19937_64 rng(mix_seed(seed, 0x5d70));
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  DropoutView view;
  while (true) {
    std::vector<std::vector<std::uint8_t>> raw(static_cast<std::size_t>(levels));
    for (Index i = 0; i < levels; ++i) {
      const Index s = hp.levels[static_cast<std::size_t>(i)].component_count();
      raw[static_cast<std::size_t>(i)].resize(static_cast<std::size_t>(s));
      for (Index c = 0; c < s; ++c)
        raw[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] =
            uniform(rng) >= p_drop ? 1 : 0;
    }
    // Effective survival: a superpoint needs itself and all ancestors kept.
    std::vector<std::vector<std::uint8_t>> eff = raw;
    for (Index i = levels - 2; i >= 0; --i) {
      const IndexVec& parent_of = hp.levels[static_cast<std::size_t>(i) + 1].super_index;
      for (Index c = 0; c < static_cast<Index>(eff[static_cast<std::size_t>(i)].size()); ++c)
        if (!eff[static_cast<std::size_t>(i) + 1][static_cast<std::size_t>(parent_of[c])])
          eff[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = 0;
    }
    bool any_empty = false;
    for (const auto& level : eff)
      if (std::find(level.begin(), level.end(), std::uint8_t(1)) == level.end()) any_empty = true;
    if (any_empty) continue;

    view.level_keep = std::move(eff);
    view.point_keep.resize(static_cast<std::size_t>(hp.point_count));
    const IndexVec& level1 = hp.levels[0].super_index;
    for (Index p = 0; p < hp.point_count; ++p)
      view.point_keep[static_cast<std::size_t>(p)] =
          view.level_keep[0][static_cast<std::size_t>(level1[p])];
    return view;
  }
}

Index tanh_sample_count(Index n, Index n_min, Index n_max) {
  require(n >= 0 && n_min >= 1 && n_max >= n_min, "need n >= 0 and 1 <= n_min <= n_max");
  const double fraction = std::tanh(static_cast<double>(n) / static_cast<double>(n_max));
  const Index target = std::max(n_min, static_cast<Index>(std::llround(n * fraction)));
  return std::min(n, target);
}

std::vector<std::vector<Index>> sample_superpoint_points(const HierarchicalPartition& hp,
                                                         Index n_min, Index n_max,
                                                         std::uint64_t seed) {
  require(hp.level_count() >= 1, "hierarchy has no levels");
  const Index s = hp.size_at(1);
  std::vector<std::vector<Index>> members(static_cast<std::size_t>(s));
  for (Index p = 0; p < hp.point_count; ++p)
    members[static_cast<std::size_t>(hp.levels[0].super_index[p])].push_back(p);

  std::vector<std::vector<Index>> out(static_cast<std::size_t>(s));
  parallel_for(0, s, [&](Index c) {
    std::vector<Index>& pool = members[static_cast<std::size_t>(c)];
    const Index n = static_cast<Index>(pool.size());
    const Index m = tanh_sample_count(n, n_min, n_max);
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
    for (Index j = 0; j < m; ++j) {
      std::uniform_int_distribution<Index> pick(j, n - 1);
      std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(pick(rng))]);
    }
    std::vector<Index>& chosen = out[static_cast<std::size_t>(c)];
    chosen.assign(pool.begin(), pool.begin() + m);
    std::sort(chosen.begin(), chosen.end());
  });
  return out;
}

namespace {

void init_linear(LinearLayer& layer, Index out, Index in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::uniform_real_distribution<double> uniform(-bound, bound);
  layer.w.resize(out, in);
  for (Index r = 0; r < out; ++r)
    for (Index c = 0; c < in; ++c) layer.w(r, c) = uniform(rng);
  layer.b.resize(out);
  for (Index r = 0; r < out; ++r) layer.b[r] = uniform(rng);
}

Mlp init_mlp(const std::vector<Index>& widths, std::mt19937_64& rng) {
  Mlp mlp;
  mlp.layers.resize(widths.size() - 1);
  for (std::size_t l = 0; l + 1 < widths.size(); ++l)
    init_linear(mlp.layers[l], widths[l + 1], widths[l], rng);
  return mlp;
}

void init_norm(GraphNormParams& norm, Index d) {
  norm.scale = Vec::Ones(d);
  norm.shift = Vec::Zero(d);
  norm.mean_scale = Vec::Ones(d);
}

Mat init_matrix(Index out, Index in, std::mt19937_64& rng) {
  LinearLayer tmp;
  init_linear(tmp, out, in, rng);
  return tmp.w;
}

std::vector<AttentionBlockParams> init_blocks(Index n_blocks, const KernelConfig& config,
                                              std::mt19937_64& rng) {
  std::vector<AttentionBlockParams> blocks(static_cast<std::size_t>(n_blocks));
  for (AttentionBlockParams& block : blocks) {
    init_norm(block.norm, config.d_val);
    block.w_key = init_matrix(config.n_heads * config.d_key, config.d_val, rng);
    block.w_que = init_matrix(config.n_heads * config.d_key, config.d_val, rng);
    block.w_val = init_matrix(config.d_val, config.d_val, rng);
  }
  return blocks;
}

}  // namespace

ParamBundle init_params(const KernelConfig& config, Index level_count, Index n_classes,
                        Index d_hf) {
  validate(config);
  require(level_count >= 1, "need at least one level");
  require(n_classes >= 2, "need at least two classes");
  require(d_hf >= 1, "need at least one point feature");

  std::mt19937_64 rng(mix_seed(config.seed, 0x1a17));

  ParamBundle bundle;
  if (!config.nano_mode)
    bundle.point_mlp = init_mlp({d_hf + 3, 32, 64, config.d_point}, rng);

  bundle.levels.resize(static_cast<std::size_t>(level_count));
  for (Index i = 1; i <= level_count; ++i) {
    LevelParams& lp = bundle.levels[static_cast<std::size_t>(i) - 1];
    Index enc_in;
    if (i == 1)
      enc_in = (config.nano_mode ? d_hf : config.d_point) + 3;
    else
      enc_in = config.d_val + 3;
    lp.enc_mlp = init_mlp({enc_in, config.d_val, config.d_val}, rng);
    lp.enc_blocks = init_blocks(config.n_blocks_enc, config, rng);
    lp.adj_mlp =
        init_mlp({18, config.d_adj, config.d_adj, 2 * config.d_key + config.d_val}, rng);
    if (i < level_count) {
      lp.dec_mlp = init_mlp({2 * config.d_val + 3, config.d_val, config.d_val}, rng);
      lp.dec_blocks = init_blocks(config.n_blocks_dec, config, rng);
    }
    LinearLayer cls;
    init_linear(cls, n_classes, config.d_val, rng);
    lp.classifier_w = std::move(cls.w);
    lp.classifier_b = std::move(cls.b);
  }
  return bundle;
}

namespace {

void add_mlp_refs(std::vector<TensorRef>& refs, const std::string& prefix, Mlp& mlp) {
  for (std::size_t l = 0; l < mlp.layers.size(); ++l) {
    LinearLayer& layer = mlp.layers[l];
    refs.push_back({prefix + "." + std::to_string(l) + ".w", layer.w.data(), layer.w.rows(),
                    layer.w.cols()});
    refs.push_back(
        {prefix + "." + std::to_string(l) + ".b", layer.b.data(), layer.b.size(), 1});
  }
}

void add_block_refs(std::vector<TensorRef>& refs, const std::string& prefix,
                    std::vector<AttentionBlockParams>& blocks) {
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    AttentionBlockParams& block = blocks[b];
    const std::string base = prefix + "." + std::to_string(b);
    refs.push_back({base + ".norm.scale", block.norm.scale.data(), block.norm.scale.size(), 1});
    refs.push_back({base + ".norm.shift", block.norm.shift.data(), block.norm.shift.size(), 1});
    refs.push_back({base + ".norm.mean_scale", block.norm.mean_scale.data(),
                    block.norm.mean_scale.size(), 1});
    refs.push_back({base + ".w_key", block.w_key.data(), block.w_key.rows(), block.w_key.cols()});
    refs.push_back({base + ".w_que", block.w_que.data(), block.w_que.rows(), block.w_que.cols()});
    refs.push_back({base + ".w_val", block.w_val.data(), block.w_val.rows(), block.w_val.cols()});
  }
}

}  // namespace

std::vector<TensorRef> enumerate_tensors(ParamBundle& bundle) {
  std::vector<TensorRef> refs;
  add_mlp_refs(refs, "point_mlp", bundle.point_mlp);
  for (std::size_t i = 0; i < bundle.levels.size(); ++i) {
    LevelParams& lp = bundle.levels[i];
    const std::string base = "level" + std::to_string(i + 1);
    add_mlp_refs(refs, base + ".enc_mlp", lp.enc_mlp);
    add_block_refs(refs, base + ".enc_blocks", lp.enc_blocks);
    add_mlp_refs(refs, base + ".adj_mlp", lp.adj_mlp);
    add_mlp_refs(refs, base + ".dec_mlp", lp.dec_mlp);
    add_block_refs(refs, base + ".dec_blocks", lp.dec_blocks);
    refs.push_back({base + ".classifier.w", lp.classifier_w.data(), lp.classifier_w.rows(),
                    lp.classifier_w.cols()});
    refs.push_back(
        {base + ".classifier.b", lp.classifier_b.data(), lp.classifier_b.size(), 1});
  }
  return refs;
}

void save_params(const ParamBundle& bundle, const std::string& blob_path,
                 const std::string& manifest_path) {
  // Enumeration never writes; the cast only reuses the mutable accessor.
  std::vector<TensorRef> refs = enumerate_tensors(const_cast<ParamBundle&>(bundle));

  nlohmann::json manifest;
  manifest["format"] = "superpart-params";
  manifest["dtype"] = "f64";
  manifest["tensors"] = nlohmann::json::array();

  std::ofstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error(blob_path + ": cannot open for writing");
  std::uint64_t offset = 0;
  for (const TensorRef& ref : refs) {
    const std::uint64_t count = static_cast<std::uint64_t>(ref.rows * ref.cols);
    manifest["tensors"].push_back(
        {{"name", ref.name}, {"rows", ref.rows}, {"cols", ref.cols}, {"offset", offset}});
    blob.write(reinterpret_cast<const char*>(ref.data),
               static_cast<std::streamsize>(count * sizeof(double)));
    offset += count * sizeof(double);
  }
  blob.flush();
  if (!blob) throw std::runtime_error(blob_path + ": write failed");

  std::ofstream out(manifest_path);
  if (!out) throw std::runtime_error(manifest_path + ": cannot open for writing");
  out << manifest.dump(2) << "\n";
  out.flush();
  if (!out) throw std::runtime_error(manifest_path + ": write failed");
}

void load_params(ParamBundle& bundle, const std::string& blob_path,
                 const std::string& manifest_path) {
  std::ifstream manifest_in(manifest_path);
  if (!manifest_in) throw std::runtime_error(manifest_path + ": cannot open for reading");
  nlohmann::json manifest;
  manifest_in >> manifest;
  if (manifest.value("format", "") != "superpart-params" || manifest.value("dtype", "") != "f64")
    throw std::runtime_error(manifest_path + ": not a parameter manifest");

  struct Entry {
    Index rows, cols;
    std::uint64_t offset;
  };
  std::unordered_map<std::string, Entry> entries;
  for (const nlohmann::json& t : manifest.at("tensors"))
    entries[t.at("name").get<std::string>()] = {t.at("rows").get<Index>(),
                                                t.at("cols").get<Index>(),
                                                t.at("offset").get<std::uint64_t>()};

  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw std::runtime_error(blob_path + ": cannot open for reading");

  std::vector<TensorRef> refs = enumerate_tensors(bundle);
  require(refs.size() == entries.size(), "manifest tensor count does not match bundle");
  for (TensorRef& ref : refs) {
    const auto it = entries.find(ref.name);
    require(it != entries.end(), "manifest is missing tensor " + ref.name);
    require(it->second.rows == ref.rows && it->second.cols == ref.cols,
            "shape mismatch for tensor " + ref.name);
    blob.seekg(static_cast<std::streamoff>(it->second.offset));
    blob.read(reinterpret_cast<char*>(ref.data),
              static_cast<std::streamsize>(ref.rows * ref.cols * sizeof(double)));
    if (!blob) throw std::runtime_error(blob_path + ": truncated reading " + ref.name);
  }
}

}  // namespace superpart
