#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "superpart/spt_kernel.hpp"

#include "test_helpers.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

using namespace superpart;

namespace {

// Hierarchy assembled directly from nested id maps; statistics are computed
// from the level-0 points so the struct honors the library's invariants.
HierarchicalPartition manual_hp(const MatX3& positions, const std::vector<IndexVec>& maps) {
  HierarchicalPartition hp;
  hp.point_count = static_cast<Index>(positions.rows());
  IndexVec to_level = IndexVec::LinSpaced(hp.point_count, 0, hp.point_count - 1);
  for (const IndexVec& map : maps) {
    HierarchyLevel level;
    level.super_index = map;
    Index s = 0;
    for (Index i = 0; i < map.size(); ++i) s = std::max(s, map[i] + 1);
    IndexVec next(hp.point_count);
    for (Index p = 0; p < hp.point_count; ++p) next[p] = map[to_level[p]];
    level.centroids = MatX3::Zero(s, 3);
    level.point_counts = IndexVec::Zero(s);
    for (Index p = 0; p < hp.point_count; ++p) {
      level.centroids.row(next[p]) += positions.row(p);
      ++level.point_counts[next[p]];
    }
    for (Index c = 0; c < s; ++c)
      level.centroids.row(c) /= static_cast<double>(level.point_counts[c]);
    level.radii = Vec::Zero(s);
    for (Index p = 0; p < hp.point_count; ++p)
      level.radii[next[p]] = std::max(
          level.radii[next[p]], (positions.row(p) - level.centroids.row(next[p])).norm());
    level.mean_features = Mat::Zero(s, 1);
    hp.levels.push_back(std::move(level));
    to_level = next;
  }
  return hp;
}

// Fully connected directed graph over s nodes with random 18-column
// adjacency features. Gaps and anchors are irrelevant to the kernel.
SuperpointGraph complete_graph(std::mt19937_64& gen, Index s) {
  SuperpointGraph graph;
  const Index e_count = s * (s - 1);
  graph.edges.resize(e_count, 2);
  Index e = 0;
  for (Index p = 0; p < s; ++p)
    for (Index q = 0; q < s; ++q) {
      if (p == q) continue;
      graph.edges(e, 0) = p;
      graph.edges(e, 1) = q;
      ++e;
    }
  graph.features = testutil::random_matrix(gen, e_count, 18, 1.0);
  graph.gaps = Vec::Zero(e_count);
  graph.anchors = Mat::Zero(e_count, 6);
  return graph;
}

AttentionInput random_attention(std::mt19937_64& gen, Index s, Index heads, Index dk,
                                Index dvh, Index max_degree) {
  AttentionInput in;
  in.n_heads = heads;
  in.k = testutil::random_matrix(gen, s, heads * dk, 1.0);
  in.q = testutil::random_matrix(gen, s, heads * dk, 1.0);
  in.v = testutil::random_matrix(gen, s, heads * dvh, 1.0);
  std::uniform_int_distribution<Index> deg_dist(1, max_degree);
  std::uniform_int_distribution<Index> node_dist(0, s - 1);
  std::vector<std::pair<Index, Index>> edges;
  for (Index p = 0; p < s; ++p) {
    const Index deg = deg_dist(gen);
    std::set<Index> seen;
    while (static_cast<Index>(seen.size()) < std::min(deg, s - 1)) {
      const Index q = node_dist(gen);
      if (q != p) seen.insert(q);
    }
    for (Index q : seen) edges.emplace_back(p, q);
  }
  // Interleave sources so grouping has to reorder rather than copy.
  std::shuffle(edges.begin(), edges.end(), gen);
  in.edges.resize(static_cast<Index>(edges.size()), 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    in.edges(static_cast<Index>(i), 0) = edges[i].first;
    in.edges(static_cast<Index>(i), 1) = edges[i].second;
  }
  const Index e_count = in.edges.rows();
  in.a_key = testutil::random_matrix(gen, e_count, dk, 1.0);
  in.a_que = testutil::random_matrix(gen, e_count, dk, 1.0);
  in.a_val = testutil::random_matrix(gen, e_count, heads * dvh, 1.0);
  return in;
}

// Dense reference: explicit per-node neighbor lists in input row order,
// Eigen segment arithmetic instead of the library's scalar accumulation.
Mat dense_attention(const AttentionInput& in) {
  const Index s = in.v.rows();
  const Index h = in.n_heads;
  const Index dk = in.k.cols() / h;
  const Index dvh = in.v.cols() / h;
  Mat out = Mat::Zero(s, in.v.cols());
  for (Index p = 0; p < s; ++p) {
    std::vector<Index> nbr;
    for (Index e = 0; e < in.edges.rows(); ++e)
      if (in.edges(e, 0) == p) nbr.push_back(e);
    if (nbr.empty()) continue;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(nbr.size()));
    for (Index head = 0; head < h; ++head) {
      Vec score(static_cast<Index>(nbr.size()));
      for (std::size_t j = 0; j < nbr.size(); ++j) {
        const Index e = nbr[j];
        const Index qn = in.edges(e, 1);
        const Vec que =
            in.q.row(p).segment(head * dk, dk).transpose() + in.a_que.row(e).transpose();
        const Vec key =
            in.k.row(qn).segment(head * dk, dk).transpose() + in.a_key.row(e).transpose();
        score[static_cast<Index>(j)] = que.dot(key) * inv_sqrt;
      }
      const Vec weights = ((score.array() - score.maxCoeff()).exp() /
                           (score.array() - score.maxCoeff()).exp().sum())
                              .matrix();
      for (std::size_t j = 0; j < nbr.size(); ++j) {
        const Index e = nbr[j];
        const Index qn = in.edges(e, 1);
        out.row(p).segment(head * dvh, dvh) +=
            weights[static_cast<Index>(j)] *
            (in.v.row(qn).segment(head * dvh, dvh) + in.a_val.row(e).segment(head * dvh, dvh));
      }
    }
  }
  return out;
}

// Scalar loss reference with its own bookkeeping.
double loss_oracle(const std::vector<Mat>& logits, const HierarchicalPartition& hp,
                   const Eigen::VectorXi& labels, const std::vector<double>& mu,
                   std::vector<double>* per_level = nullptr) {
  Index total_labeled = 0;
  for (Index p = 0; p < hp.point_count; ++p)
    if (labels[p] >= 0) ++total_labeled;
  double total = 0.0;
  if (per_level) per_level->clear();
  for (Index i = 1; i <= hp.level_count(); ++i) {
    const Mat& z = logits[static_cast<std::size_t>(i) - 1];
    const IndexVec to = hp.compose_to(i);
    const Index s = hp.size_at(i);
    const Index k = z.cols();
    double level_term = 0.0;
    for (Index c = 0; c < s; ++c) {
      std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
      double labeled = 0.0;
      for (Index p = 0; p < hp.point_count; ++p)
        if (to[p] == c && labels[p] >= 0) {
          counts[static_cast<std::size_t>(labels[p])] += 1.0;
          labeled += 1.0;
        }
      if (labeled == 0.0) continue;
      Vec soft = z.row(c).transpose();
      soft = (soft.array() - soft.maxCoeff()).exp();
      soft /= soft.sum();
      double entropy = 0.0;
      if (i == 1) {
        Index majority = 0;
        for (Index cls = 1; cls < k; ++cls)
          if (counts[static_cast<std::size_t>(cls)] > counts[static_cast<std::size_t>(majority)])
            majority = cls;
        entropy = -std::log(std::max(soft[majority], 1e-12));
      } else {
        for (Index cls = 0; cls < k; ++cls)
          if (counts[static_cast<std::size_t>(cls)] > 0.0)
            entropy -= counts[static_cast<std::size_t>(cls)] / labeled *
                       std::log(std::max(soft[cls], 1e-12));
      }
      const double weight = (i == 1 ? 1.0 : mu[static_cast<std::size_t>(i) - 2]) * labeled /
                            static_cast<double>(total_labeled);
      level_term += weight * entropy;
    }
    if (per_level) per_level->push_back(level_term);
    total += level_term;
  }
  return total;
}

KernelConfig toy_config(std::uint64_t seed) {
  KernelConfig config;
  config.d_point = 8;
  config.d_adj = 6;
  config.d_val = 8;
  config.d_key = 3;
  config.n_heads = 2;
  config.n_blocks_enc = 2;
  config.n_blocks_dec = 1;
  config.mu_weights = {7.0};
  config.n_min = 2;
  config.n_max = 8;
  config.seed = seed;
  return config;
}

struct ToyScene {
  MatX3 positions;
  Mat hf;
  HierarchicalPartition hp;
  std::vector<SuperpointGraph> graphs;
};

// 12 points in 4 level-1 superpoints in 2 level-2 superpoints, with complete
// adjacency at both levels. Dyadic coordinates keep order-changing sums exact.
ToyScene toy_scene(std::mt19937_64& gen, Index d_hf) {
  ToyScene scene;
  scene.positions = testutil::dyadic_positions(gen, 12);
  scene.hf = testutil::random_matrix(gen, 12, d_hf, 1.0);
  IndexVec l1(12), l2(4);
  l1 << 0, 0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3;
  l2 << 0, 0, 1, 1;
  scene.hp = manual_hp(scene.positions, {l1, l2});
  scene.graphs.push_back(complete_graph(gen, 4));
  scene.graphs.push_back(complete_graph(gen, 2));
  return scene;
}

}  // namespace

TEST_CASE("validate rejects inconsistent configs") {
  KernelConfig config = toy_config(0);
  CHECK_NOTHROW(validate(config));
  config.d_val = 9;  // not divisible by 2 heads
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
  config = toy_config(0);
  config.dropout_p = 1.0;
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
  config = toy_config(0);
  config.n_min = 0;
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
  config = toy_config(0);
  config.n_max = 1;
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
  config = toy_config(0);
  config.n_heads = 0;
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
  config = toy_config(0);
  config.d_key = 0;
  CHECK_THROWS_AS(validate(config), std::invalid_argument);
}

TEST_CASE("mlp_forward computes layered affine maps with LeakyReLU between") {
  Mlp mlp;
  mlp.layers.resize(2);
  mlp.layers[0].w.resize(1, 2);
  mlp.layers[0].w << 2.0, -1.0;
  mlp.layers[0].b = Vec::Constant(1, 0.25);
  mlp.layers[1].w.resize(1, 1);
  mlp.layers[1].w << -3.0;
  mlp.layers[1].b = Vec::Constant(1, 1.0);

  Mat input(2, 2);
  input << 1.0, 0.5, 0.0, 0.5;
  const Mat out = mlp_forward(mlp, input);
  REQUIRE(out.rows() == 2);
  REQUIRE(out.cols() == 1);
  // Row 0: pre-activation 1.75 stays positive, so out = -3*1.75 + 1.
  CHECK(out(0, 0) == -4.25);
  // Row 1: pre-activation -0.25 crosses the leak.
  CHECK(out(1, 0) == -3.0 * (-0.25 * 0.01) + 1.0);

  CHECK_THROWS_AS(mlp_forward(Mlp{}, input), std::invalid_argument);
  Mat wrong(2, 3);
  wrong.setZero();
  CHECK_THROWS_AS(mlp_forward(mlp, wrong), std::invalid_argument);
}

TEST_CASE("graph_norm analytic cases") {
  GraphNormParams params;
  params.scale = Vec::Ones(1);
  params.shift = Vec::Zero(1);
  params.mean_scale = Vec::Ones(1);

  Mat two(2, 1);
  two << 0.0, 2.0;
  const Mat normalized = graph_norm(two, IndexVec(), params);
  CHECK(normalized(0, 0) == -1.0);
  CHECK(normalized(1, 0) == 1.0);

  // A constant column hits the std floor and collapses to the shift.
  params.shift = Vec::Constant(1, 0.75);
  Mat constant = Mat::Constant(5, 1, 3.25);
  const Mat collapsed = graph_norm(constant, IndexVec(), params);
  for (Index r = 0; r < 5; ++r) CHECK(collapsed(r, 0) == 0.75);

  // mean_scale rescales the subtracted mean before the deviation pass.
  params.scale = Vec::Constant(1, 2.0);
  params.shift = Vec::Constant(1, -1.0);
  params.mean_scale = Vec::Constant(1, 0.5);
  Mat pair(2, 1);
  pair << 1.0, 3.0;
  const Mat shifted = graph_norm(pair, IndexVec(), params);
  // mean 2, scaled mean 1, deviations {0, 2}, std sqrt(2).
  CHECK(std::abs(shifted(0, 0) - (-1.0)) < 1e-12);
  CHECK(std::abs(shifted(1, 0) - (2.0 * 2.0 / std::sqrt(2.0) - 1.0)) < 1e-12);
}

TEST_CASE("graph_norm matches a per-sample recomputation") {
  auto gen = testutil::rng(90);
  for (int trial = 0; trial < 20; ++trial) {
    const Index s = 30, d = 5;
    const Mat features = testutil::random_matrix(gen, s, d, 2.0);
    GraphNormParams params;
    params.scale = testutil::random_matrix(gen, d, 1, 1.0).col(0);
    params.shift = testutil::random_matrix(gen, d, 1, 1.0).col(0);
    params.mean_scale = testutil::random_matrix(gen, d, 1, 1.0).col(0);
    IndexVec node_to_sample(s);
    std::uniform_int_distribution<Index> sample_dist(0, 2);
    for (Index i = 0; i < s; ++i) node_to_sample[i] = sample_dist(gen);

    const Mat out = graph_norm(features, node_to_sample, params);
    for (Index c = 0; c < d; ++c) {
      for (Index sample = 0; sample < 3; ++sample) {
        std::vector<Index> rows;
        for (Index i = 0; i < s; ++i)
          if (node_to_sample[i] == sample) rows.push_back(i);
        if (rows.empty()) continue;
        double mean = 0.0;
        for (Index r : rows) mean += features(r, c);
        mean /= static_cast<double>(rows.size());
        const double shifted_mean = params.mean_scale[c] * mean;
        double var = 0.0;
        for (Index r : rows) {
          const double dev = features(r, c) - shifted_mean;
          var += dev * dev;
        }
        const double std_dev =
            std::max(std::sqrt(var / static_cast<double>(rows.size())), 1e-5);
        for (Index r : rows) {
          const double want =
              params.scale[c] * (features(r, c) - shifted_mean) / std_dev + params.shift[c];
          CHECK(std::abs(out(r, c) - want) < 1e-12);
        }
      }
    }

    // Sample blocks are independent: normalizing each slice alone gives the
    // identical rows.
    for (Index sample = 0; sample < 3; ++sample) {
      std::vector<Index> rows;
      for (Index i = 0; i < s; ++i)
        if (node_to_sample[i] == sample) rows.push_back(i);
      if (rows.empty()) continue;
      Mat slice(static_cast<Index>(rows.size()), d);
      for (std::size_t j = 0; j < rows.size(); ++j) slice.row(static_cast<Index>(j)) =
          features.row(rows[j]);
      const Mat alone = graph_norm(slice, IndexVec(), params);
      for (std::size_t j = 0; j < rows.size(); ++j)
        for (Index c = 0; c < d; ++c) CHECK(alone(static_cast<Index>(j), c) == out(rows[j], c));
    }
  }
}

TEST_CASE("graph_norm validates its inputs") {
  GraphNormParams params;
  params.scale = Vec::Ones(2);
  params.shift = Vec::Zero(2);
  params.mean_scale = Vec::Ones(2);
  const Mat features = Mat::Zero(3, 2);
  CHECK_NOTHROW(graph_norm(features, IndexVec(), params));
  params.scale = Vec::Ones(3);
  CHECK_THROWS_AS(graph_norm(features, IndexVec(), params), std::invalid_argument);
  params.scale = Vec::Ones(2);
  IndexVec wrong_length(2);
  wrong_length << 0, 0;
  CHECK_THROWS_AS(graph_norm(features, wrong_length, params), std::invalid_argument);
  IndexVec negative(3);
  negative << 0, -1, 0;
  CHECK_THROWS_AS(graph_norm(features, negative, params), std::invalid_argument);
}

TEST_CASE("maxpool_children pools and validates") {
  Mat children(4, 2);
  children << 1.0, -2.0, 3.0, 0.5, -1.0, 4.0, 2.0, 2.0;
  IndexVec parent_of(4);
  parent_of << 1, 0, 1, 0;
  const Mat pooled = maxpool_children(children, parent_of, 2);
  CHECK(pooled(0, 0) == 3.0);
  CHECK(pooled(0, 1) == 2.0);
  CHECK(pooled(1, 0) == 1.0);
  CHECK(pooled(1, 1) == 4.0);

  // Child order never matters, and pooling dominates every child.
  auto gen = testutil::rng(91);
  const Mat random_children = testutil::random_matrix(gen, 40, 6, 2.0);
  IndexVec parents(40);
  std::uniform_int_distribution<Index> parent_dist(0, 4);
  for (Index i = 0; i < 40; ++i) parents[i] = parent_dist(gen);
  for (Index p = 0; p < 5; ++p) parents[p] = p;  // nobody childless
  const Mat base = maxpool_children(random_children, parents, 5);
  std::vector<Index> order(40);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  Mat shuffled(40, 6);
  IndexVec shuffled_parents(40);
  for (Index i = 0; i < 40; ++i) {
    shuffled.row(i) = random_children.row(order[static_cast<std::size_t>(i)]);
    shuffled_parents[i] = parents[order[static_cast<std::size_t>(i)]];
  }
  const Mat again = maxpool_children(shuffled, shuffled_parents, 5);
  for (Index p = 0; p < 5; ++p)
    for (Index c = 0; c < 6; ++c) CHECK(again(p, c) == base(p, c));
  for (Index i = 0; i < 40; ++i)
    for (Index c = 0; c < 6; ++c) CHECK(base(parents[i], c) >= random_children(i, c));

  // Single child passes through untouched.
  Mat lone(1, 3);
  lone << 0.5, -0.25, 7.0;
  IndexVec lone_parent(1);
  lone_parent << 0;
  const Mat pass = maxpool_children(lone, lone_parent, 1);
  for (Index c = 0; c < 3; ++c) CHECK(pass(0, c) == lone(0, c));

  IndexVec gap_parent(1);
  gap_parent << 0;
  CHECK_THROWS_AS(maxpool_children(lone, gap_parent, 2), std::invalid_argument);
  IndexVec bad(1);
  bad << 5;
  CHECK_THROWS_AS(maxpool_children(lone, bad, 1), std::invalid_argument);
}

TEST_CASE("attention_forward matches the dense oracle") {
  auto gen = testutil::rng(92);
  for (int trial = 0; trial < 50; ++trial) {
    const Index s = 4 + (trial % 5);
    const Index heads = 1 + (trial % 2);
    const AttentionInput in = random_attention(gen, s, heads, 2 + (trial % 2), 2, 3);
    AttentionCache cache;
    const Mat out = attention_forward(in, &cache);
    const Mat want = dense_attention(in);
    REQUIRE(out.rows() == s);
    REQUIRE(out.cols() == in.v.cols());
    for (Index r = 0; r < out.rows(); ++r)
      for (Index c = 0; c < out.cols(); ++c) CHECK(std::abs(out(r, c) - want(r, c)) < 1e-12);

    // Softmax weights sum to one per node and head.
    for (Index p = 0; p < s; ++p) {
      const Index begin = cache.offsets[static_cast<std::size_t>(p)];
      const Index end = cache.offsets[static_cast<std::size_t>(p) + 1];
      if (begin == end) continue;
      for (Index head = 0; head < heads; ++head) {
        double sum = 0.0;
        for (Index j = begin; j < end; ++j)
          sum += cache.weights(cache.edge_order[static_cast<std::size_t>(j)], head);
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("attention_forward special neighborhoods") {
  auto gen = testutil::rng(93);
  // A single neighbor takes all the weight, so the output row is exactly
  // V + a_val regardless of scores.
  AttentionInput in;
  in.n_heads = 2;
  in.k = testutil::random_matrix(gen, 3, 4, 1.0);
  in.q = testutil::random_matrix(gen, 3, 4, 1.0);
  in.v = testutil::random_matrix(gen, 3, 6, 1.0);
  in.edges.resize(3, 2);
  in.edges << 0, 2, 1, 0, 2, 1;
  in.a_key = testutil::random_matrix(gen, 3, 2, 1.0);
  in.a_que = testutil::random_matrix(gen, 3, 2, 1.0);
  in.a_val = testutil::random_matrix(gen, 3, 6, 1.0);
  const Mat out = attention_forward(in);
  for (Index e = 0; e < 3; ++e) {
    const Index p = in.edges(e, 0), q = in.edges(e, 1);
    for (Index c = 0; c < 6; ++c) CHECK(out(p, c) == in.v(q, c) + in.a_val(e, c));
  }

  // All-equal scores reduce to the plain neighborhood mean.
  AttentionInput uniform = random_attention(gen, 6, 2, 3, 2, 4);
  uniform.q.setZero();
  uniform.a_que.setZero();
  const Mat mean_out = attention_forward(uniform);
  for (Index p = 0; p < 6; ++p) {
    std::vector<Index> nbr;
    for (Index e = 0; e < uniform.edges.rows(); ++e)
      if (uniform.edges(e, 0) == p) nbr.push_back(e);
    if (nbr.empty()) continue;
    for (Index head = 0; head < 2; ++head)
      for (Index d = 0; d < 2; ++d) {
        double mean = 0.0;
        for (Index e : nbr)
          mean += uniform.v(uniform.edges(e, 1), head * 2 + d) + uniform.a_val(e, head * 2 + d);
        mean /= static_cast<double>(nbr.size());
        CHECK(std::abs(mean_out(p, head * 2 + d) - mean) < 1e-12);
      }
  }

  // A node with no outgoing edge yields a zero row, or an error when strict.
  AttentionInput lonely;
  lonely.n_heads = 1;
  lonely.k = testutil::random_matrix(gen, 3, 2, 1.0);
  lonely.q = testutil::random_matrix(gen, 3, 2, 1.0);
  lonely.v = testutil::random_matrix(gen, 3, 2, 1.0);
  lonely.edges.resize(2, 2);
  lonely.edges << 0, 1, 1, 0;
  lonely.a_key = Mat::Zero(2, 2);
  lonely.a_que = Mat::Zero(2, 2);
  lonely.a_val = Mat::Zero(2, 2);
  const Mat zero_row = attention_forward(lonely);
  CHECK(zero_row(2, 0) == 0.0);
  CHECK(zero_row(2, 1) == 0.0);
  lonely.strict = true;
  CHECK_THROWS_AS(attention_forward(lonely), std::invalid_argument);
}

TEST_CASE("attention_forward is exactly permutation equivariant") {
  auto gen = testutil::rng(94);
  for (int trial = 0; trial < 10; ++trial) {
    const Index s = 8;
    const AttentionInput in = random_attention(gen, s, 2, 3, 2, 4);
    std::vector<Index> perm(static_cast<std::size_t>(s));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), gen);

    AttentionInput moved = in;
    for (Index i = 0; i < s; ++i) {
      moved.k.row(perm[static_cast<std::size_t>(i)]) = in.k.row(i);
      moved.q.row(perm[static_cast<std::size_t>(i)]) = in.q.row(i);
      moved.v.row(perm[static_cast<std::size_t>(i)]) = in.v.row(i);
    }
    // Edge rows keep their order; only the endpoint ids are renamed.
    for (Index e = 0; e < in.edges.rows(); ++e) {
      moved.edges(e, 0) = perm[static_cast<std::size_t>(in.edges(e, 0))];
      moved.edges(e, 1) = perm[static_cast<std::size_t>(in.edges(e, 1))];
    }
    const Mat base = attention_forward(in);
    const Mat after = attention_forward(moved);
    for (Index i = 0; i < s; ++i)
      for (Index c = 0; c < base.cols(); ++c)
        CHECK(after(perm[static_cast<std::size_t>(i)], c) == base(i, c));
  }
}

TEST_CASE("attention_forward is neighbor-order invariant") {
  auto gen = testutil::rng(95);
  const AttentionInput in = random_attention(gen, 10, 2, 3, 2, 5);
  AttentionInput shuffled = in;
  std::vector<Index> order(static_cast<std::size_t>(in.edges.rows()));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), gen);
  for (std::size_t i = 0; i < order.size(); ++i) {
    shuffled.edges.row(static_cast<Index>(i)) = in.edges.row(order[i]);
    shuffled.a_key.row(static_cast<Index>(i)) = in.a_key.row(order[i]);
    shuffled.a_que.row(static_cast<Index>(i)) = in.a_que.row(order[i]);
    shuffled.a_val.row(static_cast<Index>(i)) = in.a_val.row(order[i]);
  }
  const Mat base = attention_forward(in);
  const Mat after = attention_forward(shuffled);
  for (Index r = 0; r < base.rows(); ++r)
    for (Index c = 0; c < base.cols(); ++c) CHECK(std::abs(after(r, c) - base(r, c)) < 1e-12);
}

TEST_CASE("attention_forward validates shapes and ranges") {
  auto gen = testutil::rng(96);
  AttentionInput in = random_attention(gen, 5, 2, 2, 2, 3);
  AttentionInput bad = in;
  bad.k = testutil::random_matrix(gen, 4, 4, 1.0);
  CHECK_THROWS_AS(attention_forward(bad), std::invalid_argument);
  bad = in;
  bad.k = testutil::random_matrix(gen, 5, 3, 1.0);
  bad.q = testutil::random_matrix(gen, 5, 3, 1.0);
  CHECK_THROWS_AS(attention_forward(bad), std::invalid_argument);
  bad = in;
  bad.a_key = testutil::random_matrix(gen, in.edges.rows(), 3, 1.0);
  CHECK_THROWS_AS(attention_forward(bad), std::invalid_argument);
  bad = in;
  bad.a_val = testutil::random_matrix(gen, in.edges.rows(), 3, 1.0);
  CHECK_THROWS_AS(attention_forward(bad), std::invalid_argument);
  bad = in;
  bad.edges(0, 1) = 99;
  CHECK_THROWS_AS(attention_forward(bad), std::invalid_argument);
}

TEST_CASE("attention_backward matches central finite differences") {
  auto gen = testutil::rng(97);
  const double h = 1e-5;
  for (int trial = 0; trial < 50; ++trial) {
    const Index s = 4 + (trial % 4);
    const Index heads = 1 + (trial % 2);
    AttentionInput in = random_attention(gen, s, heads, 2, 2, 3);
    const Mat grad_out = testutil::random_matrix(gen, s, in.v.cols(), 1.0);

    AttentionCache cache;
    attention_forward(in, &cache);
    const AttentionGrads grads = attention_backward(in, cache, grad_out);

    const auto objective = [&]() {
      return (attention_forward(in).array() * grad_out.array()).sum();
    };
    const auto check_tensor = [&](Mat& tensor, const Mat& analytic) {
      REQUIRE(analytic.rows() == tensor.rows());
      REQUIRE(analytic.cols() == tensor.cols());
      for (Index r = 0; r < tensor.rows(); ++r)
        for (Index c = 0; c < tensor.cols(); ++c) {
          const double keep = tensor(r, c);
          tensor(r, c) = keep + h;
          const double up = objective();
          tensor(r, c) = keep - h;
          const double down = objective();
          tensor(r, c) = keep;
          const double fd = (up - down) / (2.0 * h);
          const double ana = analytic(r, c);
          const double rel =
              std::abs(fd - ana) / std::max({std::abs(fd), std::abs(ana), 1e-8});
          CHECK(rel <= 1e-4);
        }
    };
    check_tensor(in.k, grads.k);
    check_tensor(in.q, grads.q);
    check_tensor(in.v, grads.v);
    check_tensor(in.a_key, grads.a_key);
    check_tensor(in.a_que, grads.a_que);
    check_tensor(in.a_val, grads.a_val);
  }
}

TEST_CASE("attention_backward zero upstream gradient and input validation") {
  auto gen = testutil::rng(98);
  AttentionInput in = random_attention(gen, 6, 2, 2, 2, 3);
  AttentionCache cache;
  attention_forward(in, &cache);
  const AttentionGrads grads =
      attention_backward(in, cache, Mat::Zero(6, in.v.cols()));
  CHECK(grads.k.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.q.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.v.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.a_key.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.a_que.cwiseAbs().maxCoeff() == 0.0);
  CHECK(grads.a_val.cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(attention_backward(in, cache, Mat::Zero(6, 1)), std::invalid_argument);
  AttentionCache stale = cache;
  stale.weights = Mat::Zero(1, 2);
  CHECK_THROWS_AS(attention_backward(in, stale, Mat::Zero(6, in.v.cols())),
                  std::invalid_argument);
}

TEST_CASE("transformer_stack residual identities") {
  auto gen = testutil::rng(99);
  const KernelConfig config = toy_config(12);
  const Index s = 5;
  SuperpointGraph graph = complete_graph(gen, s);
  const Mat input = testutil::random_matrix(gen, s, config.d_val, 1.0);
  const Mat adj_zero = Mat::Zero(graph.edge_count(), 2 * config.d_key + config.d_val);

  AttentionBlockParams block;
  block.norm.scale = Vec::Ones(config.d_val);
  block.norm.shift = Vec::Zero(config.d_val);
  block.norm.mean_scale = Vec::Ones(config.d_val);
  block.w_key = Mat::Zero(config.n_heads * config.d_key, config.d_val);
  block.w_que = Mat::Zero(config.n_heads * config.d_key, config.d_val);
  block.w_val = Mat::Zero(config.d_val, config.d_val);

  // Zero value path: every block adds exactly nothing.
  const Mat frozen = transformer_stack(input, graph, adj_zero, {block, block}, config);
  for (Index r = 0; r < s; ++r)
    for (Index c = 0; c < config.d_val; ++c) CHECK(frozen(r, c) == input(r, c));

  // Zero K/Q with a real value path: one block adds the neighborhood mean of
  // the projected normalized features.
  block.w_val = testutil::random_matrix(gen, config.d_val, config.d_val, 1.0);
  const Mat stepped = transformer_stack(input, graph, adj_zero, {block}, config);
  const Mat y = graph_norm(input, IndexVec(), block.norm);
  const Mat v = y * block.w_val.transpose();
  for (Index p = 0; p < s; ++p) {
    Vec mean = Vec::Zero(config.d_val);
    Index deg = 0;
    for (Index e = 0; e < graph.edge_count(); ++e)
      if (graph.edges(e, 0) == p) {
        mean += v.row(graph.edges(e, 1)).transpose();
        ++deg;
      }
    mean /= static_cast<double>(deg);
    for (Index c = 0; c < config.d_val; ++c)
      CHECK(std::abs(stepped(p, c) - (input(p, c) + mean[c])) < 1e-12);
  }

  // Width checks.
  CHECK_THROWS_AS(
      transformer_stack(testutil::random_matrix(gen, s, 3, 1.0), graph, adj_zero, {block},
                        config),
      std::invalid_argument);
  CHECK_THROWS_AS(transformer_stack(input, graph, Mat::Zero(graph.edge_count(), 4), {block},
                                    config),
                  std::invalid_argument);
  CHECK_THROWS_AS(
      transformer_stack(input, graph, Mat::Zero(2, 2 * config.d_key + config.d_val), {block},
                        config),
      std::invalid_argument);
}

TEST_CASE("relative_positions centers and scales per parent") {
  MatX3 positions(3, 3);
  positions << 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 5.0, 5.0, 5.0;
  IndexVec l1(3);
  l1 << 0, 0, 1;
  const HierarchicalPartition hp = manual_hp(positions, {l1});
  const std::vector<MatX3> x = relative_positions(hp, positions, Vec3(1.0, 1.0, 1.0));
  REQUIRE(x.size() == 2);

  // Symmetric pair maps to unit offsets; a singleton collapses to zero.
  CHECK(x[0].row(0).transpose() == Vec3(-1.0, 0.0, 0.0));
  CHECK(x[0].row(1).transpose() == Vec3(1.0, 0.0, 0.0));
  CHECK(x[0].row(2).norm() == 0.0);

  // Top level is normalized against the scene center.
  REQUIRE(x[1].rows() == 2);
  double max_norm = 0.0;
  for (Index c = 0; c < 2; ++c) max_norm = std::max(max_norm, x[1].row(c).norm());
  CHECK(std::abs(max_norm - 1.0) < 1e-9);
  const Vec3 expect_dir = (hp.levels[0].centroids.row(1).transpose() - Vec3(1.0, 1.0, 1.0));
  CHECK(std::abs(x[1].row(1).transpose().dot(expect_dir.normalized()) - x[1].row(1).norm()) <
        1e-12);

  // Every parent's farthest child sits at norm 1 in bigger hierarchies too.
  auto gen = testutil::rng(100);
  const MatX3 cloud = testutil::random_positions(gen, 60, 3.0);
  IndexVec map(60);
  std::uniform_int_distribution<Index> parent_dist(0, 5);
  for (Index i = 0; i < 60; ++i) map[i] = parent_dist(gen);
  for (Index p = 0; p < 6; ++p) map[p] = p;
  const HierarchicalPartition big = manual_hp(cloud, {map});
  const std::vector<MatX3> xb =
      relative_positions(big, cloud, cloud.colwise().mean().transpose());
  Vec max_by_parent = Vec::Zero(6);
  for (Index i = 0; i < 60; ++i)
    max_by_parent[map[i]] = std::max(max_by_parent[map[i]], xb[0].row(i).norm());
  for (Index p = 0; p < 6; ++p) CHECK(std::abs(max_by_parent[p] - 1.0) < 1e-9);

  // Coincident children give zeros rather than dividing by zero.
  MatX3 stacked(2, 3);
  stacked << 4.0, 4.0, 4.0, 4.0, 4.0, 4.0;
  IndexVec both(2);
  both << 0, 0;
  const HierarchicalPartition tiny = manual_hp(stacked, {both});
  const std::vector<MatX3> xt = relative_positions(tiny, stacked, Vec3::Zero());
  CHECK(xt[0].cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(relative_positions(hp, MatX3(1, 3), Vec3::Zero()), std::invalid_argument);
}

TEST_CASE("init_params is deterministic with documented structure and bounds") {
  const KernelConfig config = toy_config(21);
  ParamBundle a = init_params(config, 2, 4, 5);
  ParamBundle b = init_params(config, 2, 4, 5);
  KernelConfig other = config;
  other.seed = 22;
  ParamBundle c = init_params(other, 2, 4, 5);

  std::vector<TensorRef> ra = enumerate_tensors(a);
  std::vector<TensorRef> rb = enumerate_tensors(b);
  std::vector<TensorRef> rc = enumerate_tensors(c);
  REQUIRE(ra.size() == rb.size());
  REQUIRE(ra.size() == rc.size());
  // 6 point tensors, 34 for the full level, 24 for the coarsest.
  CHECK(ra.size() == 64);
  std::set<std::string> names;
  bool anywhere_different = false;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    CHECK(ra[i].name == rb[i].name);
    names.insert(ra[i].name);
    const Index count = ra[i].rows * ra[i].cols;
    for (Index j = 0; j < count; ++j) {
      CHECK(ra[i].data[j] == rb[i].data[j]);
      if (ra[i].data[j] != rc[i].data[j]) anywhere_different = true;
    }
  }
  CHECK(names.size() == ra.size());
  CHECK(anywhere_different);

  // Structure: widths, the nano/full input split, and the missing decoder on
  // the coarsest level.
  REQUIRE(a.point_mlp.layers.size() == 3);
  CHECK(a.point_mlp.layers[0].w.cols() == 5 + 3);
  CHECK(a.point_mlp.layers[2].w.rows() == config.d_point);
  REQUIRE(a.levels.size() == 2);
  CHECK(a.levels[0].enc_mlp.layers[0].w.cols() == config.d_point + 3);
  CHECK(a.levels[1].enc_mlp.layers[0].w.cols() == config.d_val + 3);
  CHECK(a.levels[0].adj_mlp.layers[0].w.cols() == 18);
  CHECK(a.levels[0].adj_mlp.out_dim() == 2 * config.d_key + config.d_val);
  CHECK(a.levels[0].dec_mlp.layers.size() == 2);
  CHECK(a.levels[0].dec_mlp.layers[0].w.cols() == 2 * config.d_val + 3);
  CHECK(a.levels[1].dec_mlp.layers.empty());
  CHECK(a.levels[0].enc_blocks.size() == 2);
  CHECK(a.levels[0].dec_blocks.size() == 1);
  CHECK(a.levels[1].dec_blocks.empty());
  CHECK(a.levels[0].classifier_w.rows() == 4);
  CHECK(a.levels[0].classifier_w.cols() == config.d_val);

  // Uniform bounds scale with fan-in; GraphNorm starts at identity.
  for (const Mlp* mlp : {&a.point_mlp, &a.levels[0].enc_mlp, &a.levels[0].adj_mlp}) {
    for (const LinearLayer& layer : mlp->layers) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(layer.w.cols()));
      CHECK(layer.w.cwiseAbs().maxCoeff() <= bound);
      CHECK(layer.b.cwiseAbs().maxCoeff() <= bound);
    }
  }
  CHECK(a.levels[0].enc_blocks[0].norm.scale == Vec::Ones(config.d_val));
  CHECK(a.levels[0].enc_blocks[0].norm.shift == Vec::Zero(config.d_val));
  CHECK(a.levels[0].enc_blocks[0].norm.mean_scale == Vec::Ones(config.d_val));

  KernelConfig nano = config;
  nano.nano_mode = true;
  ParamBundle n = init_params(nano, 2, 4, 5);
  CHECK(n.point_mlp.layers.empty());
  CHECK(n.levels[0].enc_mlp.layers[0].w.cols() == 5 + 3);
  std::vector<TensorRef> rn = enumerate_tensors(n);
  CHECK(rn.size() == 58);

  CHECK_THROWS_AS(init_params(config, 0, 4, 5), std::invalid_argument);
  CHECK_THROWS_AS(init_params(config, 2, 1, 5), std::invalid_argument);
  CHECK_THROWS_AS(init_params(config, 2, 4, 0), std::invalid_argument);
}

TEST_CASE("save_params and load_params round-trip bit for bit") {
  const KernelConfig config = toy_config(31);
  ParamBundle source = init_params(config, 2, 4, 5);
  const std::string blob = testutil::temp_path("params.bin");
  const std::string manifest = testutil::temp_path("params.json");
  save_params(source, blob, manifest);

  ParamBundle target = init_params(KernelConfig(toy_config(77)), 2, 4, 5);
  load_params(target, blob, manifest);
  std::vector<TensorRef> rs = enumerate_tensors(source);
  std::vector<TensorRef> rt = enumerate_tensors(target);
  REQUIRE(rs.size() == rt.size());
  for (std::size_t i = 0; i < rs.size(); ++i) {
    CHECK(rs[i].name == rt[i].name);
    const Index count = rs[i].rows * rs[i].cols;
    for (Index j = 0; j < count; ++j) CHECK(rs[i].data[j] == rt[i].data[j]);
  }

  // A second save of the loaded bundle reproduces both files byte for byte.
  const std::string blob2 = testutil::temp_path("params2.bin");
  const std::string manifest2 = testutil::temp_path("params2.json");
  save_params(target, blob2, manifest2);
  CHECK(testutil::read_file(blob2) == testutil::read_file(blob));
  CHECK(testutil::read_file(manifest2) == testutil::read_file(manifest));

  // Structural mismatches are refused.
  KernelConfig wider = toy_config(31);
  wider.d_val = 16;
  ParamBundle wrong_shape = init_params(wider, 2, 4, 5);
  CHECK_THROWS_AS(load_params(wrong_shape, blob, manifest), std::invalid_argument);
  ParamBundle wrong_depth = init_params(config, 1, 4, 5);
  CHECK_THROWS_AS(load_params(wrong_depth, blob, manifest), std::invalid_argument);
  ParamBundle fresh = init_params(config, 2, 4, 5);
  CHECK_THROWS_AS(load_params(fresh, blob, "/nonexistent/manifest.json"),
                  std::runtime_error);
  std::remove(blob.c_str());
  std::remove(blob2.c_str());
  std::remove(manifest.c_str());
  std::remove(manifest2.c_str());
}

TEST_CASE("forward_full equals a scripted recomputation from the primitives") {
  auto gen = testutil::rng(101);
  const KernelConfig config = toy_config(41);
  const Index d_hf = 5, n_classes = 4;
  const ToyScene scene = toy_scene(gen, d_hf);
  const ParamBundle params = init_params(config, 2, n_classes, d_hf);

  const std::vector<Mat> logits = forward_full(scene.hf, scene.positions, scene.hp,
                                               scene.graphs, params, config);
  REQUIRE(logits.size() == 2);
  REQUIRE(logits[0].rows() == 4);
  REQUIRE(logits[1].rows() == 2);
  REQUIRE(logits[0].cols() == n_classes);
  REQUIRE(logits[1].cols() == n_classes);
  CHECK(logits[0].allFinite());
  CHECK(logits[1].allFinite());

  // Recompute the whole dataflow step by step with the public pieces.
  const Vec3 scene_center = scene.positions.colwise().mean().transpose();
  const std::vector<MatX3> x = relative_positions(scene.hp, scene.positions, scene_center);

  Mat input0(12, 3 + d_hf);
  input0 << x[0], scene.hf;
  const Mat g0 = mlp_forward(params.point_mlp, input0);
  const Mat pooled1 = maxpool_children(g0, scene.hp.levels[0].super_index, 4);
  Mat enc1_in(4, 3 + g0.cols());
  enc1_in << x[1], pooled1;
  Mat g1 = mlp_forward(params.levels[0].enc_mlp, enc1_in);
  const Mat adj1 = mlp_forward(params.levels[0].adj_mlp, scene.graphs[0].features);
  const Index dk = config.d_key, dv = config.d_val;
  const auto run_blocks = [&](Mat g, const SuperpointGraph& graph, const Mat& adj,
                              const std::vector<AttentionBlockParams>& blocks) {
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
  };
  g1 = run_blocks(g1, scene.graphs[0], adj1, params.levels[0].enc_blocks);

  const Mat pooled2 = maxpool_children(g1, scene.hp.levels[1].super_index, 2);
  Mat enc2_in(2, 3 + dv);
  enc2_in << x[2], pooled2;
  Mat g2 = mlp_forward(params.levels[1].enc_mlp, enc2_in);
  const Mat adj2 = mlp_forward(params.levels[1].adj_mlp, scene.graphs[1].features);
  g2 = run_blocks(g2, scene.graphs[1], adj2, params.levels[1].enc_blocks);

  const Mat h2 = g2;
  Mat dec1_in(4, 3 + dv + dv);
  for (Index c = 0; c < 4; ++c)
    dec1_in.row(c) << x[1].row(c), g1.row(c), h2.row(scene.hp.levels[1].super_index[c]);
  Mat h1 = mlp_forward(params.levels[0].dec_mlp, dec1_in);
  h1 = run_blocks(h1, scene.graphs[0], adj1, params.levels[0].dec_blocks);

  const Mat want1 =
      (h1 * params.levels[0].classifier_w.transpose()).rowwise() +
      params.levels[0].classifier_b.transpose();
  const Mat want2 =
      (h2 * params.levels[1].classifier_w.transpose()).rowwise() +
      params.levels[1].classifier_b.transpose();
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < n_classes; ++c) CHECK(logits[0](r, c) == want1(r, c));
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < n_classes; ++c) CHECK(logits[1](r, c) == want2(r, c));
}

TEST_CASE("forward_full nano mode feeds mean point features to level one") {
  auto gen = testutil::rng(102);
  KernelConfig config = toy_config(42);
  config.nano_mode = true;
  const Index d_hf = 5, n_classes = 3;
  const ToyScene scene = toy_scene(gen, d_hf);
  const ParamBundle params = init_params(config, 2, n_classes, d_hf);

  const std::vector<Mat> logits = forward_full(scene.hf, scene.positions, scene.hp,
                                               scene.graphs, params, config);
  REQUIRE(logits.size() == 2);

  const Vec3 scene_center = scene.positions.colwise().mean().transpose();
  const std::vector<MatX3> x = relative_positions(scene.hp, scene.positions, scene_center);
  Mat mean_hf = Mat::Zero(4, d_hf);
  Vec counts = Vec::Zero(4);
  for (Index p = 0; p < 12; ++p) {
    mean_hf.row(scene.hp.levels[0].super_index[p]) += scene.hf.row(p);
    counts[scene.hp.levels[0].super_index[p]] += 1.0;
  }
  for (Index c = 0; c < 4; ++c) mean_hf.row(c) /= counts[c];

  const Mat g1 = encode_pooled(mean_hf, x[1], scene.graphs[0], params.levels[0], config);
  const Mat g2 = encode_level(g1, x[2], scene.hp.levels[1].super_index, scene.graphs[1],
                              params.levels[1], config);
  const Mat h1 = decode_level(g1, g2, x[1], scene.hp.levels[1].super_index, scene.graphs[0],
                              params.levels[0], config);
  const Mat want1 =
      (h1 * params.levels[0].classifier_w.transpose()).rowwise() +
      params.levels[0].classifier_b.transpose();
  const Mat want2 =
      (g2 * params.levels[1].classifier_w.transpose()).rowwise() +
      params.levels[1].classifier_b.transpose();
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < n_classes; ++c) CHECK(logits[0](r, c) == want1(r, c));
  for (Index r = 0; r < 2; ++r)
    for (Index c = 0; c < n_classes; ++c) CHECK(logits[1](r, c) == want2(r, c));
}

TEST_CASE("forward_full is exactly equivariant to id permutations") {
  auto gen = testutil::rng(103);
  const KernelConfig config = toy_config(43);
  const Index d_hf = 5, n_classes = 4;
  const ToyScene scene = toy_scene(gen, d_hf);
  const ParamBundle params = init_params(config, 2, n_classes, d_hf);
  const std::vector<Mat> base = forward_full(scene.hf, scene.positions, scene.hp,
                                             scene.graphs, params, config);

  std::vector<Index> pi(12), sigma1(4), sigma2(2);
  std::iota(pi.begin(), pi.end(), 0);
  std::iota(sigma1.begin(), sigma1.end(), 0);
  std::iota(sigma2.begin(), sigma2.end(), 0);
  std::shuffle(pi.begin(), pi.end(), gen);
  std::shuffle(sigma1.begin(), sigma1.end(), gen);
  std::shuffle(sigma2.begin(), sigma2.end(), gen);

  MatX3 positions(12, 3);
  Mat hf(12, d_hf);
  HierarchicalPartition hp = scene.hp;
  for (Index p = 0; p < 12; ++p) {
    positions.row(pi[static_cast<std::size_t>(p)]) = scene.positions.row(p);
    hf.row(pi[static_cast<std::size_t>(p)]) = scene.hf.row(p);
    hp.levels[0].super_index[pi[static_cast<std::size_t>(p)]] =
        sigma1[static_cast<std::size_t>(scene.hp.levels[0].super_index[p])];
  }
  for (Index c = 0; c < 4; ++c) {
    const Index m = sigma1[static_cast<std::size_t>(c)];
    hp.levels[0].centroids.row(m) = scene.hp.levels[0].centroids.row(c);
    hp.levels[0].point_counts[m] = scene.hp.levels[0].point_counts[c];
    hp.levels[0].radii[m] = scene.hp.levels[0].radii[c];
    hp.levels[0].mean_features.row(m) = scene.hp.levels[0].mean_features.row(c);
    hp.levels[1].super_index[m] =
        sigma2[static_cast<std::size_t>(scene.hp.levels[1].super_index[c])];
  }
  for (Index c = 0; c < 2; ++c) {
    const Index m = sigma2[static_cast<std::size_t>(c)];
    hp.levels[1].centroids.row(m) = scene.hp.levels[1].centroids.row(c);
    hp.levels[1].point_counts[m] = scene.hp.levels[1].point_counts[c];
    hp.levels[1].radii[m] = scene.hp.levels[1].radii[c];
    hp.levels[1].mean_features.row(m) = scene.hp.levels[1].mean_features.row(c);
  }
  // Edge rows stay in place; only endpoint ids are renamed.
  std::vector<SuperpointGraph> graphs = scene.graphs;
  for (Index e = 0; e < graphs[0].edge_count(); ++e) {
    graphs[0].edges(e, 0) = sigma1[static_cast<std::size_t>(scene.graphs[0].edges(e, 0))];
    graphs[0].edges(e, 1) = sigma1[static_cast<std::size_t>(scene.graphs[0].edges(e, 1))];
  }
  for (Index e = 0; e < graphs[1].edge_count(); ++e) {
    graphs[1].edges(e, 0) = sigma2[static_cast<std::size_t>(scene.graphs[1].edges(e, 0))];
    graphs[1].edges(e, 1) = sigma2[static_cast<std::size_t>(scene.graphs[1].edges(e, 1))];
  }

  const std::vector<Mat> moved = forward_full(hf, positions, hp, graphs, params, config);
  for (Index c = 0; c < 4; ++c)
    for (Index k = 0; k < n_classes; ++k)
      CHECK(moved[0](sigma1[static_cast<std::size_t>(c)], k) == base[0](c, k));
  for (Index c = 0; c < 2; ++c)
    for (Index k = 0; k < n_classes; ++k)
      CHECK(moved[1](sigma2[static_cast<std::size_t>(c)], k) == base[1](c, k));
}

TEST_CASE("forward_full validates its inputs") {
  auto gen = testutil::rng(104);
  const KernelConfig config = toy_config(44);
  const ToyScene scene = toy_scene(gen, 5);
  const ParamBundle params = init_params(config, 2, 4, 5);
  std::vector<SuperpointGraph> one_graph = {scene.graphs[0]};
  CHECK_THROWS_AS(
      forward_full(scene.hf, scene.positions, scene.hp, one_graph, params, config),
      std::invalid_argument);
  const ParamBundle shallow = init_params(config, 1, 4, 5);
  CHECK_THROWS_AS(
      forward_full(scene.hf, scene.positions, scene.hp, scene.graphs, shallow, config),
      std::invalid_argument);
  CHECK_THROWS_AS(forward_full(Mat::Zero(5, 5), scene.positions, scene.hp, scene.graphs,
                               params, config),
                  std::invalid_argument);
}

TEST_CASE("hierarchical_loss matches the scalar oracle") {
  auto gen = testutil::rng(105);
  std::uniform_int_distribution<int> label_dist(-1, 3);
  for (int trial = 0; trial < 20; ++trial) {
    const Index n = 30;
    const MatX3 positions = testutil::random_positions(gen, n, 2.0);
    IndexVec l1(n), l2(5);
    std::uniform_int_distribution<Index> l1_dist(0, 4), l2_dist(0, 1);
    for (Index i = 0; i < n; ++i) l1[i] = l1_dist(gen);
    for (Index i = 0; i < 5; ++i) l1[i] = i;
    for (Index i = 0; i < 5; ++i) l2[i] = l2_dist(gen);
    l2[0] = 0;
    l2[1] = 1;
    const HierarchicalPartition hp = manual_hp(positions, {l1, l2});

    Eigen::VectorXi labels(n);
    bool any = false;
    for (Index i = 0; i < n; ++i) {
      labels[i] = label_dist(gen);
      any = any || labels[i] >= 0;
    }
    if (!any) labels[0] = 1;

    const std::vector<double> mu = {3.5};
    std::vector<Mat> logits = {testutil::random_matrix(gen, 5, 4, 2.0),
                               testutil::random_matrix(gen, 2, 4, 2.0)};
    const LossBreakdown got = hierarchical_loss(logits, hp, labels, mu);
    std::vector<double> per_level;
    const double want = loss_oracle(logits, hp, labels, mu, &per_level);
    CHECK(std::abs(got.total - want) < 1e-10);
    REQUIRE(got.per_level.size() == 2);
    CHECK(std::abs(got.per_level[0] - per_level[0]) < 1e-10);
    CHECK(std::abs(got.per_level[1] - per_level[1]) < 1e-10);
    CHECK(got.total >= 0.0);
    CHECK(std::abs(got.total - (got.per_level[0] + got.per_level[1])) < 1e-12);
  }
}

TEST_CASE("hierarchical_loss edge cases") {
  MatX3 positions = MatX3::Zero(8, 3);
  for (Index i = 0; i < 8; ++i) positions(i, 0) = static_cast<double>(i);
  IndexVec l1(8), l2(4);
  l1 << 0, 0, 1, 1, 2, 2, 3, 3;
  l2 << 0, 0, 1, 1;
  const HierarchicalPartition hp = manual_hp(positions, {l1, l2});

  // Pure superpoints with a wide logit margin on the right class reach an
  // exact zero: the softmax rounds to 1 and log(1) is 0.
  Eigen::VectorXi labels(8);
  labels << 0, 0, 0, 0, 2, 2, 2, 2;
  Mat z1 = Mat::Zero(4, 3), z2 = Mat::Zero(2, 3);
  z1(0, 0) = z1(1, 0) = 40.0;
  z1(2, 2) = z1(3, 2) = 40.0;
  z2(0, 0) = 40.0;
  z2(1, 2) = 40.0;
  const LossBreakdown zero = hierarchical_loss({z1, z2}, hp, labels, {5.0});
  CHECK(zero.total == 0.0);
  CHECK(zero.per_level[0] == 0.0);
  CHECK(zero.per_level[1] == 0.0);

  // mu = 0 silences everything beyond level one.
  auto gen = testutil::rng(106);
  std::vector<Mat> noisy = {testutil::random_matrix(gen, 4, 3, 2.0),
                            testutil::random_matrix(gen, 2, 3, 2.0)};
  const LossBreakdown collapsed = hierarchical_loss(noisy, hp, labels, {0.0});
  CHECK(collapsed.per_level[1] == 0.0);
  CHECK(collapsed.total == collapsed.per_level[0]);

  // Fully unlabeled superpoints are skipped: garbage logits there change
  // nothing. Points labeled -1 drop out of histograms and normalization.
  Eigen::VectorXi holes(8);
  holes << 1, 1, -1, -1, 2, -1, 2, 2;
  std::vector<Mat> base_logits = {testutil::random_matrix(gen, 4, 3, 1.0),
                                  testutil::random_matrix(gen, 2, 3, 1.0)};
  const LossBreakdown before = hierarchical_loss(base_logits, hp, holes, {5.0});
  base_logits[0].row(1).setConstant(1e9);  // superpoint {2,3} is all unlabeled
  const LossBreakdown after = hierarchical_loss(base_logits, hp, holes, {5.0});
  CHECK(before.total == after.total);
  CHECK(std::abs(before.total - loss_oracle(base_logits, hp, holes, {5.0})) < 1e-10);

  // Majority ties resolve to the smallest class id.
  Eigen::VectorXi tied(8);
  tied << 0, 1, 0, 1, 0, 1, 0, 1;
  Mat t1 = Mat::Zero(4, 3), t2 = Mat::Zero(2, 3);
  t1.col(0).setConstant(40.0);
  t2.col(0).setConstant(40.0);
  const LossBreakdown tie_zero = hierarchical_loss({t1, t2}, hp, tied, {5.0});
  CHECK(tie_zero.per_level[0] == 0.0);

  // Validation.
  Eigen::VectorXi all_unlabeled = Eigen::VectorXi::Constant(8, -1);
  CHECK_THROWS_AS(hierarchical_loss({z1, z2}, hp, all_unlabeled, {5.0}),
                  std::invalid_argument);
  Eigen::VectorXi bad = labels;
  bad[0] = -2;
  CHECK_THROWS_AS(hierarchical_loss({z1, z2}, hp, bad, {5.0}), std::invalid_argument);
  CHECK_THROWS_AS(hierarchical_loss({z1, z2}, hp, labels, {}), std::invalid_argument);
  CHECK_THROWS_AS(hierarchical_loss({z1}, hp, labels, {5.0}), std::invalid_argument);
  CHECK_THROWS_AS(hierarchical_loss({Mat::Zero(3, 3), z2}, hp, labels, {5.0}),
                  std::invalid_argument);
  Eigen::VectorXi high = labels;
  high[0] = 7;  // more classes than logit columns
  CHECK_THROWS_AS(hierarchical_loss({z1, z2}, hp, high, {5.0}), std::invalid_argument);
}

TEST_CASE("superpoint_dropout keeps subtrees consistent") {
  auto gen = testutil::rng(107);
  const Index n = 60;
  const MatX3 positions = testutil::random_positions(gen, n, 3.0);
  IndexVec l1(n), l2(12), l3(4);
  for (Index i = 0; i < n; ++i) l1[i] = i % 12;
  for (Index i = 0; i < 12; ++i) l2[i] = i % 4;
  for (Index i = 0; i < 4; ++i) l3[i] = i % 2;
  const HierarchicalPartition hp = manual_hp(positions, {l1, l2, l3});

  // p = 0 keeps everything.
  const DropoutView all = superpoint_dropout(hp, 0.0, 9);
  for (const auto& level : all.level_keep)
    for (std::uint8_t kept : level) CHECK(kept == 1);
  for (std::uint8_t kept : all.point_keep) CHECK(kept == 1);

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const DropoutView view = superpoint_dropout(hp, 0.5, seed);
    REQUIRE(view.level_keep.size() == 3);
    // Survival implies the parent survived, every level keeps something, and
    // points follow their level-1 superpoint.
    for (std::size_t i = 0; i + 1 < view.level_keep.size(); ++i) {
      const IndexVec& parent_of = hp.levels[i + 1].super_index;
      for (std::size_t c = 0; c < view.level_keep[i].size(); ++c)
        if (view.level_keep[i][c])
          CHECK(view.level_keep[i + 1][static_cast<std::size_t>(parent_of[static_cast<Index>(c)])] == 1);
    }
    for (const auto& level : view.level_keep) {
      Index kept = 0;
      for (std::uint8_t k : level) kept += k;
      CHECK(kept >= 1);
    }
    for (Index p = 0; p < n; ++p)
      CHECK(view.point_keep[static_cast<std::size_t>(p)] ==
            view.level_keep[0][static_cast<std::size_t>(hp.levels[0].super_index[p])]);
  }

  // Determinism per seed.
  const DropoutView a = superpoint_dropout(hp, 0.5, 1234);
  const DropoutView b = superpoint_dropout(hp, 0.5, 1234);
  CHECK(a.level_keep == b.level_keep);
  CHECK(a.point_keep == b.point_keep);

  CHECK_THROWS_AS(superpoint_dropout(hp, 1.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(superpoint_dropout(hp, -0.1, 0), std::invalid_argument);
}

TEST_CASE("superpoint_dropout drop rate stays in the binomial band") {
  // One flat level with 10000 superpoints: kept count is Binomial(n, 0.8);
  // the redraw rule only triggers on the all-dropped draw, which at this size
  // never happens.
  const Index n = 10000;
  MatX3 positions(n, 3);
  for (Index i = 0; i < n; ++i)
    positions.row(i) = Vec3(static_cast<double>(i), 0.0, 0.0).transpose();
  const HierarchicalPartition hp =
      manual_hp(positions, {IndexVec::LinSpaced(n, 0, n - 1)});
  const DropoutView view = superpoint_dropout(hp, 0.2, 4242);
  Index kept = 0;
  for (std::uint8_t k : view.level_keep[0]) kept += k;
  // 3 sigma around 8000 with sigma = sqrt(10000 * 0.2 * 0.8) = 40.
  CHECK(kept >= 7880);
  CHECK(kept <= 8120);

  const DropoutView other = superpoint_dropout(hp, 0.2, 4243);
  CHECK(view.level_keep[0] != other.level_keep[0]);
}

TEST_CASE("tanh_sample_count pinned values") {
  CHECK(tanh_sample_count(10, 32, 128) == 10);
  CHECK(tanh_sample_count(0, 32, 128) == 0);
  CHECK(tanh_sample_count(32, 32, 128) == 32);
  CHECK(tanh_sample_count(128, 32, 128) == 97);
  CHECK(tanh_sample_count(100000, 32, 128) == 100000);
  // Once tanh saturates the kept fraction approaches one from below.
  for (Index n : {1000, 2000, 10000})
    CHECK(tanh_sample_count(n, 32, 128) == n);
  CHECK(tanh_sample_count(200, 32, 128) ==
        static_cast<Index>(std::llround(200 * std::tanh(200.0 / 128.0))));
  CHECK_THROWS_AS(tanh_sample_count(-1, 32, 128), std::invalid_argument);
  CHECK_THROWS_AS(tanh_sample_count(10, 0, 128), std::invalid_argument);
  CHECK_THROWS_AS(tanh_sample_count(10, 32, 16), std::invalid_argument);
}

TEST_CASE("sample_superpoint_points draws sorted unique members") {
  auto gen = testutil::rng(108);
  const Index n = 245;
  const MatX3 positions = testutil::random_positions(gen, n, 2.0);
  IndexVec l1(n);
  for (Index i = 0; i < n; ++i) l1[i] = i < 200 ? 0 : (i < 240 ? 1 : 2);
  const HierarchicalPartition hp = manual_hp(positions, {l1});

  const auto samples = sample_superpoint_points(hp, 32, 128, 7);
  REQUIRE(samples.size() == 3);
  CHECK(static_cast<Index>(samples[0].size()) == tanh_sample_count(200, 32, 128));
  CHECK(static_cast<Index>(samples[1].size()) == tanh_sample_count(40, 32, 128));
  CHECK(static_cast<Index>(samples[2].size()) == 5);  // fewer points than n_min
  for (std::size_t c = 0; c < samples.size(); ++c) {
    for (std::size_t j = 0; j + 1 < samples[c].size(); ++j)
      CHECK(samples[c][j] < samples[c][j + 1]);
    for (Index p : samples[c])
      CHECK(hp.levels[0].super_index[p] == static_cast<Index>(c));
  }
  // The undersized superpoint keeps every member.
  CHECK(samples[2] == std::vector<Index>({240, 241, 242, 243, 244}));

  const auto again = sample_superpoint_points(hp, 32, 128, 7);
  CHECK(again == samples);
  const auto different = sample_superpoint_points(hp, 32, 128, 8);
  CHECK(different[0] != samples[0]);
}
