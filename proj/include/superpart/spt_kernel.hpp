#pragma once

#include "superpart/core.hpp"
#include "superpart/hierarchy.hpp"
#include "superpart/spgraph.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace superpart {

// Desk-scale numeric reference of the superpoint transformer: encoder and
// decoder dataflow, sparse self-attention with analytic gradients, GraphNorm,
// the hierarchical loss and the superpoint augmentations. Forward and
// gradient-check only; there is no training loop.

struct KernelConfig {
  Index d_point{128};
  Index d_adj{32};
  Index d_val{64};
  Index d_key{4};  // per head
  Index n_heads{16};
  Index n_blocks_enc{3};
  Index n_blocks_dec{1};
  std::vector<double> mu_weights{50.0};  // loss weights for levels 2..I
  double dropout_p{0.2};
  Index n_min{32};
  Index n_max{128};
  bool nano_mode{false};  // skip the point path, feed mean point features to level 1
  std::uint64_t seed{0};
};

void validate(const KernelConfig& config);

// y = x * w^T + b per row; LeakyReLU(0.01) between layers, linear output.
struct LinearLayer {
  Mat w;  // out x in
  Vec b;  // out
};

struct Mlp {
  std::vector<LinearLayer> layers;
  Index out_dim() const { return layers.empty() ? 0 : layers.back().w.rows(); }
};

Mat mlp_forward(const Mlp& mlp, const Mat& input);

struct GraphNormParams {
  Vec scale, shift, mean_scale;  // one entry per feature column
};

// Per sample graph and per column: y = scale * (x - mean_scale * mean) / std
// + shift, std computed after the mean shift and floored at 1e-5. An empty
// node_to_sample means one sample. Column reductions run over sorted values
// so the result does not depend on node ordering.
Mat graph_norm(const Mat& features, const IndexVec& node_to_sample,
               const GraphNormParams& params);

struct AttentionBlockParams {
  GraphNormParams norm;
  Mat w_key, w_que;  // (n_heads * d_key) x d_val
  Mat w_val;         // d_val x d_val
};

struct LevelParams {
  Mlp enc_mlp;
  Mlp adj_mlp;  // 18 edge features -> [a_key | a_que | a_val]
  Mlp dec_mlp;  // empty on the coarsest level
  std::vector<AttentionBlockParams> enc_blocks, dec_blocks;
  Mat classifier_w;  // n_classes x d_val
  Vec classifier_b;
};

struct ParamBundle {
  Mlp point_mlp;  // empty in nano mode
  std::vector<LevelParams> levels;
};

// Deterministic init from config.seed: weights and biases uniform in
// (-1/sqrt(fan_in), 1/sqrt(fan_in)), GraphNorm scale 1 / shift 0 /
// mean_scale 1.
ParamBundle init_params(const KernelConfig& config, Index level_count, Index n_classes,
                        Index d_hf);

struct TensorRef {
  std::string name;
  double* data;
  Index rows, cols;  // vectors have cols = 1
};

std::vector<TensorRef> enumerate_tensors(ParamBundle& bundle);

// Flat little-endian f64 blob plus a JSON manifest of names, shapes and byte
// offsets; round-trips bit for bit. load_params requires the target bundle
// to already have the manifest's exact structure.
void save_params(const ParamBundle& bundle, const std::string& blob_path,
                 const std::string& manifest_path);
void load_params(ParamBundle& bundle, const std::string& blob_path,
                 const std::string& manifest_path);

// Positions of each element relative to its parent, scaled so the farthest
// child of every parent sits at norm 1 (radius floor 1e-9; coincident
// children give zeros). Index 0 holds points relative to their level-1
// parent; index I holds level-I centroids relative to scene_center.
std::vector<MatX3> relative_positions(const HierarchicalPartition& hp, const MatX3& positions,
                                      const Vec3& scene_center);

struct AttentionInput {
  Index n_heads{1};
  Mat k, q;          // S x (n_heads * d_key)
  Mat v;             // S x d_val
  EdgeList edges;    // E x 2; row (p, q) lets p attend to q
  Mat a_key, a_que;  // E x d_key, shared across heads
  Mat a_val;         // E x d_val, sliced per head
  bool strict{false};  // error on nodes without neighbors instead of zero rows
};

struct AttentionCache {
  std::vector<Index> offsets;   // per-node slices into edge_order
  std::vector<Index> edge_order;  // edge ids grouped by source, input order kept
  Mat weights;                  // E x n_heads softmax weights
};

// score(p,q) = sum_d (Q_p + A_que)_d (K_q + A_key)_d / sqrt(|N(p)|), softmax
// over neighbors (max-subtracted), output = sum_q w (V_q + A_val), heads
// concatenated. The residual is the caller's. Nodes without neighbors
// produce zero rows unless strict.
Mat attention_forward(const AttentionInput& in, AttentionCache* cache = nullptr);

struct AttentionGrads {
  Mat k, q, v, a_key, a_que, a_val;
};

AttentionGrads attention_backward(const AttentionInput& in, const AttentionCache& cache,
                                  const Mat& grad_out);

// Componentwise max over the children of each parent; every parent must
// have at least one child.
Mat maxpool_children(const Mat& child_features, const IndexVec& parent_of, Index parent_count);

// adj_mlp applied to the 18 adjacency features of every edge.
Mat adjacency_encodings(const SuperpointGraph& graph, const LevelParams& params);

// n blocks of GraphNorm -> K/Q/V projection -> attention -> residual.
Mat transformer_stack(const Mat& input, const SuperpointGraph& graph, const Mat& adj,
                      const std::vector<AttentionBlockParams>& blocks,
                      const KernelConfig& config);

// enc_mlp([x | pooled]) followed by the encoder transformer stack.
Mat encode_pooled(const Mat& pooled, const MatX3& x_level, const SuperpointGraph& graph,
                  const LevelParams& params, const KernelConfig& config);

Mat encode_level(const Mat& child_features, const MatX3& x_level, const IndexVec& parent_of_child,
                 const SuperpointGraph& graph, const LevelParams& params,
                 const KernelConfig& config);

// dec_mlp([x | g | h_above(parent)]) followed by the decoder stack.
Mat decode_level(const Mat& g_level, const Mat& h_above, const MatX3& x_level,
                 const IndexVec& parent_of, const SuperpointGraph& graph,
                 const LevelParams& params, const KernelConfig& config);

// Full pass: point embedding (or mean features in nano mode), encoder up,
// decoder down with h_I = g_I, one linear classifier per level. Returns
// logits for levels 1..I.
std::vector<Mat> forward_full(const Mat& point_features, const MatX3& positions,
                              const HierarchicalPartition& hp,
                              const std::vector<SuperpointGraph>& graphs,
                              const ParamBundle& params, const KernelConfig& config);

struct LossBreakdown {
  double total{0.0};
  std::vector<double> per_level;
};

// Level 1 compares against the one-hot majority label of each superpoint,
// deeper levels against the label distribution, each term weighted by the
// superpoint's labeled point count over the total labeled count (times mu
// beyond level 1). Fully unlabeled superpoints are skipped; log is clamped
// at 1e-12; the total is nonnegative.
LossBreakdown hierarchical_loss(const std::vector<Mat>& logits, const HierarchicalPartition& hp,
                                const Eigen::VectorXi& labels,
                                const std::vector<double>& mu_weights);

struct DropoutView {
  std::vector<std::vector<std::uint8_t>> level_keep;  // effective survival per level 1..I
  std::vector<std::uint8_t> point_keep;
};

// Independent drops at every level with probability p_drop; a dropped
// superpoint removes its whole subtree. Redraws until every level keeps at
// least one superpoint. Deterministic per seed.
DropoutView superpoint_dropout(const HierarchicalPartition& hp, double p_drop,
                               std::uint64_t seed);

// min(n, max(n_min, round(n * tanh(n / n_max)))).
Index tanh_sample_count(Index n, Index n_min, Index n_max);

// Uniform without-replacement subsets of every level-1 superpoint's points,
// sized by tanh_sample_count, sorted ascending. Deterministic per seed.
std::vector<std::vector<Index>> sample_superpoint_points(const HierarchicalPartition& hp,
                                                         Index n_min, Index n_max,
                                                         std::uint64_t seed);

}  // namespace superpart
