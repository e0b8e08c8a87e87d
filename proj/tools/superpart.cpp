#include "superpart/cloud_io.hpp"
#include "superpart/core.hpp"
#include "superpart/cut_pursuit.hpp"
#include "superpart/features.hpp"
#include "superpart/hierarchy.hpp"
#include "superpart/metrics.hpp"
#include "superpart/neighborhood.hpp"
#include "superpart/parallel.hpp"
#include "superpart/spgraph.hpp"
#include "superpart/sph1.hpp"
#include "superpart/spt_kernel.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace sp = superpart;

namespace {

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> values;
  std::stringstream stream(text);
  std::string token;
  while (std::getline(stream, token, ',')) {
    if (token.empty()) continue;
    values.push_back(std::stod(token));
  }
  sp::require(!values.empty(), "expected a comma-separated list of numbers");
  return values;
}

sp::PointCloud load_cloud(const std::string& path, double voxel) {
  sp::PointCloud cloud = sp::read_cloud(path);
  if (voxel > 0.0) cloud = sp::voxel_subsample(cloud, voxel).cloud;
  return cloud;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error(path + ": cannot open for writing");
  out << content;
  out.flush();
  if (!out) throw std::runtime_error(path + ": write failed");
}

double ms_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
      .count();
}

struct FeaturesArgs {
  std::string input, out;
  double voxel{0.0};
  sp::Index k{50};
  double mu{0.0};
};

int run_features(const FeaturesArgs& args) {
  const sp::PointCloud cloud = load_cloud(args.input, args.voxel);
  sp::FeatureConfig config;
  config.k_feat = args.k;
  config.mu = args.mu;
  config.include_spatial = args.mu > 0.0;
  const sp::PointFeatureTable table = sp::assemble_point_features(cloud, config);
  const sp::Mat features = table.concatenated();

  std::string csv = "x,y,z";
  const char* geometric[] = {"linearity", "planarity", "scattering", "verticality", "elevation"};
  for (const char* name : geometric) csv += std::string(",") + name;
  for (sp::Index r = 0; r < table.radiometric.cols(); ++r)
    csv += ",radio_" + std::to_string(r);
  if (table.spatial.rows() > 0) csv += ",sx,sy,sz";
  csv += "\n";
  char buffer[64];
  for (sp::Index p = 0; p < cloud.size(); ++p) {
    for (int a = 0; a < 3; ++a) {
      std::snprintf(buffer, sizeof(buffer), a == 0 ? "%.9g" : ",%.9g", cloud.positions(p, a));
      csv += buffer;
    }
    for (sp::Index c = 0; c < features.cols(); ++c) {
      std::snprintf(buffer, sizeof(buffer), ",%.9g", features(p, c));
      csv += buffer;
    }
    csv += "\n";
  }
  write_text_file(args.out, csv);
  std::cout << "wrote " << cloud.size() << " feature rows to " << args.out << "\n";
  return 0;
}

struct PartitionArgs {
  std::string input, out, lambda;
  double voxel{0.0};
  bool weighted_fidelity{false};
  std::uint64_t seed{0};
  int threads{0};
  sp::Index k_feat{50};
  sp::Index k_graph{10};
};

sp::Sph1File build_partition(const PartitionArgs& args) {
  const sp::PointCloud cloud = load_cloud(args.input, args.voxel);
  sp::FeatureConfig feature_config;
  feature_config.k_feat = args.k_feat;
  const sp::Mat signal = sp::assemble_point_features(cloud, feature_config).concatenated();
  const sp::WeightedGraph graph = sp::build_knn_graph(cloud.positions, args.k_graph);

  sp::HierarchyConfig config;
  config.weighted_fidelity = args.weighted_fidelity;
  config.solver.seed = args.seed;
  sp::Sph1File file;
  file.hierarchy =
      sp::build_hierarchy(signal, graph, cloud.positions, parse_list(args.lambda), config);
  return file;
}

int run_partition(const PartitionArgs& args) {
  if (args.threads > 0) sp::set_thread_count(args.threads);
  const sp::Sph1File file = build_partition(args);
  sp::write_sph1(args.out, file);
  std::cout << "levels:";
  for (const sp::HierarchyLevel& level : file.hierarchy.levels)
    std::cout << " " << level.component_count();
  std::cout << " (from " << file.hierarchy.point_count << " points) -> " << args.out << "\n";
  return 0;
}

struct GraphArgs {
  std::string partition, input, out;
  sp::Index level{1};
  double eps{0.1};
  int steps{3};
  double voxel{0.0};
};

int run_graph(const GraphArgs& args) {
  sp::Sph1File file = sp::read_sph1(args.partition);
  const sp::PointCloud cloud = load_cloud(args.input, args.voxel);
  sp::require(cloud.size() == file.hierarchy.point_count,
              "input cloud does not match the partition (check --voxel)");

  sp::SpgraphConfig config;
  config.eps = args.eps;
  config.num_steps = args.steps;
  config.voxel = args.voxel;
  sp::SuperpointGraph graph =
      sp::build_superpoint_graph(file.hierarchy, args.level, cloud.positions, config);
  sp::compute_adjacency_features(file.hierarchy, cloud.positions, graph, config);

  if (file.graphs.empty())
    file.graphs.resize(static_cast<std::size_t>(file.hierarchy.level_count()));
  for (std::size_t i = 0; i < file.graphs.size(); ++i)
    if (file.graphs[i].edge_count() == 0) file.graphs[i].level = static_cast<sp::Index>(i) + 1;
  file.graphs[static_cast<std::size_t>(args.level) - 1] = std::move(graph);
  sp::write_sph1(args.out, file);
  std::cout << "level " << args.level << ": "
            << file.graphs[static_cast<std::size_t>(args.level) - 1].edge_count()
            << " oriented edges -> " << args.out << "\n";
  return 0;
}

struct OracleArgs {
  std::string partition, labels_from_input, csv;
  sp::Index level{1};
  double voxel{0.0};
};

int run_oracle(const OracleArgs& args) {
  const sp::Sph1File file = sp::read_sph1(args.partition);
  const sp::PointCloud cloud = load_cloud(args.labels_from_input, args.voxel);
  sp::require(cloud.size() == file.hierarchy.point_count,
              "labels cloud does not match the partition (check --voxel)");
  sp::require(cloud.has_labels(), "input cloud has no labels");

  const sp::OracleResult oracle = sp::oracle_assign(file.hierarchy, cloud.labels, args.level);
  const sp::MiouReport report = sp::confusion_and_miou(oracle.point_pred, cloud.labels);
  sp::require(report.defined, "no labeled points to evaluate");

  std::string csv = "metric,value\n";
  char line[96];
  for (sp::Index k = 0; k < report.per_class_iou.size(); ++k) {
    if (!report.class_present[static_cast<std::size_t>(k)]) continue;
    std::snprintf(line, sizeof(line), "iou_class_%lld,%.6f\n", static_cast<long long>(k),
                  report.per_class_iou[k]);
    csv += line;
  }
  std::snprintf(line, sizeof(line), "miou,%.6f\noa,%.6f\ncomponent_count,%lld\nevaluated,%lld\n",
                report.miou, report.oa,
                static_cast<long long>(file.hierarchy.size_at(args.level)),
                static_cast<long long>(report.evaluated));
  csv += line;
  write_text_file(args.csv, csv);
  std::cout << "oracle level " << args.level << ": miou " << report.miou << ", oa " << report.oa
            << " -> " << args.csv << "\n";
  return 0;
}

struct SweepArgs {
  std::string input, mode, grid, csv;
};

int run_sweep(const SweepArgs& args) {
  const sp::PointCloud cloud = sp::read_cloud(args.input);
  sp::SweepMode mode;
  if (args.mode == "partition")
    mode = sp::SweepMode::kPartition;
  else if (args.mode == "voxel")
    mode = sp::SweepMode::kVoxel;
  else
    throw std::invalid_argument("--mode must be partition or voxel");
  const std::vector<sp::SweepRow> rows = sp::purity_sweep(cloud, parse_list(args.grid), mode);
  write_text_file(args.csv, sp::sweep_to_csv(rows));
  std::cout << rows.size() << " sweep rows -> " << args.csv << "\n";
  return 0;
}

struct BenchArgs {
  std::string input, lambda{"0.2,0.8"};
  int repeat{1};
  double voxel{0.0};
  double eps{0.5};
};

int run_bench(const BenchArgs& args) {
  sp::require(args.repeat >= 1, "--repeat must be >= 1");
  std::map<std::string, double> totals;
  std::vector<std::string> order;
  auto record = [&](const std::string& stage, double ms) {
    if (!totals.count(stage)) order.push_back(stage);
    totals[stage] += ms;
  };

  for (int r = 0; r < args.repeat; ++r) {
    auto t0 = std::chrono::steady_clock::now();
    sp::PointCloud cloud = sp::read_cloud(args.input);
    record("read", ms_since(t0));

    if (args.voxel > 0.0) {
      t0 = std::chrono::steady_clock::now();
      cloud = sp::voxel_subsample(cloud, args.voxel).cloud;
      record("voxel", ms_since(t0));
    }

    t0 = std::chrono::steady_clock::now();
    sp::FeatureConfig feature_config;
    const sp::Mat signal = sp::assemble_point_features(cloud, feature_config).concatenated();
    record("features", ms_since(t0));

    t0 = std::chrono::steady_clock::now();
    const sp::WeightedGraph graph = sp::build_knn_graph(cloud.positions, 10);
    record("adjacency", ms_since(t0));

    t0 = std::chrono::steady_clock::now();
    sp::HierarchyConfig config;
    const sp::HierarchicalPartition hp =
        sp::build_hierarchy(signal, graph, cloud.positions, parse_list(args.lambda), config);
    record("partition", ms_since(t0));

    t0 = std::chrono::steady_clock::now();
    sp::SpgraphConfig graph_config;
    graph_config.eps = args.eps;
    graph_config.voxel = args.voxel;
    for (sp::Index level = 1; level <= hp.level_count(); ++level) {
      sp::SuperpointGraph level_graph =
          sp::build_superpoint_graph(hp, level, cloud.positions, graph_config);
      sp::compute_adjacency_features(hp, cloud.positions, level_graph, graph_config);
    }
    record("graphs", ms_since(t0));
  }

  std::string csv = "stage,ms\n";
  char line[96];
  double total = 0.0;
  for (const std::string& stage : order) {
    const double mean = totals[stage] / args.repeat;
    total += mean;
    std::snprintf(line, sizeof(line), "%s,%.3f\n", stage.c_str(), mean);
    csv += line;
  }
  std::snprintf(line, sizeof(line), "total,%.3f\n", total);
  csv += line;
  std::cout << csv;
  return 0;
}

// kernel-check: property suite for the numeric kernel on a generated scene.

struct CheckReporter {
  bool all_passed{true};
  void report(const std::string& name, bool passed) {
    std::cout << (passed ? "[PASS] " : "[FAIL] ") << name << "\n";
    all_passed = all_passed && passed;
  }
};

struct ToyScene {
  sp::PointCloud cloud;
  sp::Mat point_features;
  sp::HierarchicalPartition hp;
  std::vector<sp::SuperpointGraph> graphs;
};

ToyScene make_toy_scene(std::uint64_t seed) {
  std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ULL + 1);
  std::normal_distribution<double> noise(0.0, 0.35);

  ToyScene scene;
  const int per_blob = 80;
  scene.cloud.positions.resize(4 * per_blob, 3);
  scene.cloud.labels.resize(4 * per_blob);
  int row = 0;
  for (int blob = 0; blob < 4; ++blob) {
    const double cx = 5.0 * (blob % 2), cy = 5.0 * (blob / 2);
    for (int i = 0; i < per_blob; ++i, ++row) {
      scene.cloud.positions.row(row) << cx + noise(rng), cy + noise(rng), 0.2 * noise(rng);
      scene.cloud.labels[row] = blob % 3;
    }
  }

  scene.point_features.resize(scene.cloud.size(), 5);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  for (sp::Index p = 0; p < scene.cloud.size(); ++p)
    for (sp::Index c = 0; c < 5; ++c) scene.point_features(p, c) = uniform(rng);

  const sp::WeightedGraph graph = sp::build_knn_graph(scene.cloud.positions, 6);
  scene.hp = sp::build_hierarchy(scene.cloud.positions, graph, scene.cloud.positions,
                                 {0.5, 4.0});
  sp::SpgraphConfig graph_config;
  graph_config.eps = 8.0;
  for (sp::Index level = 1; level <= scene.hp.level_count(); ++level) {
    sp::SuperpointGraph level_graph =
        sp::build_superpoint_graph(scene.hp, level, scene.cloud.positions, graph_config);
    sp::compute_adjacency_features(scene.hp, scene.cloud.positions, level_graph, graph_config);
    scene.graphs.push_back(std::move(level_graph));
  }
  return scene;
}

sp::AttentionInput random_attention_input(std::mt19937_64& rng, sp::Index s, sp::Index n_heads,
                                          sp::Index d_key, sp::Index d_val) {
  std::uniform_real_distribution<double> uniform(-1.0, 1.0);
  auto fill = [&](sp::Mat& m, sp::Index rows, sp::Index cols) {
    m.resize(rows, cols);
    for (sp::Index r = 0; r < rows; ++r)
      for (sp::Index c = 0; c < cols; ++c) m(r, c) = uniform(rng);
  };
  sp::AttentionInput in;
  in.n_heads = n_heads;
  fill(in.k, s, n_heads * d_key);
  fill(in.q, s, n_heads * d_key);
  fill(in.v, s, d_val);

  std::vector<std::pair<sp::Index, sp::Index>> pairs;
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  for (sp::Index p = 0; p < s; ++p)
    for (sp::Index q = 0; q < s; ++q)
      if (p != q && coin(rng) < 0.5) pairs.emplace_back(p, q);
  if (pairs.empty()) pairs.emplace_back(0, s - 1);
  in.edges.resize(static_cast<sp::Index>(pairs.size()), 2);
  for (std::size_t e = 0; e < pairs.size(); ++e) {
    in.edges(static_cast<sp::Index>(e), 0) = pairs[e].first;
    in.edges(static_cast<sp::Index>(e), 1) = pairs[e].second;
  }
  fill(in.a_key, in.edges.rows(), d_key);
  fill(in.a_que, in.edges.rows(), d_key);
  fill(in.a_val, in.edges.rows(), d_val);
  return in;
}

// Independent recomputation with plain loops over the edge list.
sp::Mat dense_attention_oracle(const sp::AttentionInput& in) {
  const sp::Index s = in.v.rows(), h = in.n_heads;
  const sp::Index dk = in.k.cols() / h, dvh = in.v.cols() / h;
  sp::Mat out = sp::Mat::Zero(s, in.v.cols());
  for (sp::Index p = 0; p < s; ++p) {
    std::vector<sp::Index> nbr;
    for (sp::Index e = 0; e < in.edges.rows(); ++e)
      if (in.edges(e, 0) == p) nbr.push_back(e);
    if (nbr.empty()) continue;
    for (sp::Index head = 0; head < h; ++head) {
      std::vector<double> score;
      for (sp::Index e : nbr) {
        double dot = 0.0;
        for (sp::Index d = 0; d < dk; ++d)
          dot += (in.q(p, head * dk + d) + in.a_que(e, d)) *
                 (in.k(in.edges(e, 1), head * dk + d) + in.a_key(e, d));
        score.push_back(dot / std::sqrt(static_cast<double>(nbr.size())));
      }
      double max_score = score[0];
      for (double v : score) max_score = std::max(max_score, v);
      double sum = 0.0;
      for (double& v : score) {
        v = std::exp(v - max_score);
        sum += v;
      }
      for (std::size_t j = 0; j < nbr.size(); ++j) {
        const sp::Index e = nbr[j];
        for (sp::Index d = 0; d < dvh; ++d)
          out(p, head * dvh + d) += score[j] / sum *
                                    (in.v(in.edges(e, 1), head * dvh + d) +
                                     in.a_val(e, head * dvh + d));
      }
    }
  }
  return out;
}

double finite_difference_max_rel_error(sp::AttentionInput in, const sp::Mat& grad_out) {
  sp::AttentionCache cache;
  sp::attention_forward(in, &cache);
  const sp::AttentionGrads grads = sp::attention_backward(in, cache, grad_out);

  const double h = 1e-5;
  double max_rel = 0.0;
  auto probe = [&](sp::Mat& target, const sp::Mat& analytic) {
    for (sp::Index r = 0; r < target.rows(); ++r)
      for (sp::Index c = 0; c < target.cols(); ++c) {
        const double saved = target(r, c);
        target(r, c) = saved + h;
        const double up = (sp::attention_forward(in).array() * grad_out.array()).sum();
        target(r, c) = saved - h;
        const double down = (sp::attention_forward(in).array() * grad_out.array()).sum();
        target(r, c) = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic(r, c)), 1e-8});
        max_rel = std::max(max_rel, std::abs(numeric - analytic(r, c)) / denom);
      }
  };
  probe(in.k, grads.k);
  probe(in.q, grads.q);
  probe(in.v, grads.v);
  probe(in.a_key, grads.a_key);
  probe(in.a_que, grads.a_que);
  probe(in.a_val, grads.a_val);
  return max_rel;
}

double loss_oracle(const std::vector<sp::Mat>& logits, const sp::HierarchicalPartition& hp,
                   const Eigen::VectorXi& labels, const std::vector<double>& mu) {
  sp::Index total_labeled = 0;
  for (sp::Index p = 0; p < labels.size(); ++p)
    if (labels[p] >= 0) ++total_labeled;
  double total = 0.0;
  for (sp::Index i = 1; i <= hp.level_count(); ++i) {
    const sp::IndexVec to_level = hp.compose_to(i);
    const sp::Mat& z = logits[static_cast<std::size_t>(i) - 1];
    for (sp::Index c = 0; c < hp.size_at(i); ++c) {
      std::map<int, sp::Index> votes;
      sp::Index labeled = 0;
      for (sp::Index p = 0; p < labels.size(); ++p)
        if (to_level[p] == c && labels[p] >= 0) {
          ++votes[labels[p]];
          ++labeled;
        }
      if (labeled == 0) continue;
      std::vector<double> soft(static_cast<std::size_t>(z.cols()));
      double max_logit = z.row(c).maxCoeff(), sum = 0.0;
      for (sp::Index k = 0; k < z.cols(); ++k) {
        soft[static_cast<std::size_t>(k)] = std::exp(z(c, k) - max_logit);
        sum += soft[static_cast<std::size_t>(k)];
      }
      for (double& v : soft) v /= sum;
      double entropy = 0.0;
      if (i == 1) {
        int majority = votes.begin()->first;
        for (const auto& [cls, count] : votes)
          if (count > votes[majority]) majority = cls;
        entropy = -std::log(std::max(soft[static_cast<std::size_t>(majority)], 1e-12));
      } else {
        for (const auto& [cls, count] : votes)
          entropy -= static_cast<double>(count) / labeled *
                     std::log(std::max(soft[static_cast<std::size_t>(cls)], 1e-12));
      }
      const double weight = i == 1 ? 1.0 : mu[static_cast<std::size_t>(i) - 2];
      total += weight * static_cast<double>(labeled) / static_cast<double>(total_labeled) *
               entropy;
    }
  }
  return total;
}

int run_kernel_check(std::uint64_t seed, bool nano) {
  CheckReporter check;
  std::mt19937_64 rng(seed * 0x2545f4914f6cdd1dULL + 99);

  sp::KernelConfig config;
  config.seed = seed;
  config.nano_mode = nano;
  config.d_point = 24;
  config.d_adj = nano ? 16 : 12;
  config.d_val = nano ? 16 : 24;
  config.d_key = nano ? 2 : 3;
  config.n_heads = nano ? 2 : 4;
  config.mu_weights = {7.0};

  // Attention: dense-loop oracle, weight normalization, gradients.
  double max_oracle_gap = 0.0, max_weight_gap = 0.0, max_fd = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    sp::AttentionInput in = random_attention_input(rng, 6, 2, 3, 4);
    sp::AttentionCache cache;
    const sp::Mat out = sp::attention_forward(in, &cache);
    max_oracle_gap =
        std::max(max_oracle_gap, (out - dense_attention_oracle(in)).cwiseAbs().maxCoeff());
    for (sp::Index p = 0; p < 6; ++p) {
      for (sp::Index head = 0; head < 2; ++head) {
        double sum = 0.0;
        bool any = false;
        for (sp::Index e = 0; e < in.edges.rows(); ++e)
          if (in.edges(e, 0) == p) {
            sum += cache.weights(e, head);
            any = true;
          }
        if (any) max_weight_gap = std::max(max_weight_gap, std::abs(sum - 1.0));
      }
    }
    sp::Mat grad_out(6, 4);
    std::uniform_real_distribution<double> uniform(-1.0, 1.0);
    for (sp::Index r = 0; r < 6; ++r)
      for (sp::Index c = 0; c < 4; ++c) grad_out(r, c) = uniform(rng);
    max_fd = std::max(max_fd, finite_difference_max_rel_error(in, grad_out));
  }
  check.report("attention matches dense-loop oracle (1e-12)", max_oracle_gap <= 1e-12);
  check.report("attention weights sum to 1 (1e-12)", max_weight_gap <= 1e-12);
  check.report("analytic gradients match finite differences (1e-4)", max_fd <= 1e-4);

  // Scene-level checks.
  const ToyScene scene = make_toy_scene(seed);
  const sp::Index levels = scene.hp.level_count();
  sp::ParamBundle params = sp::init_params(config, levels, 3, 5);
  const std::vector<sp::Mat> logits = sp::forward_full(
      scene.point_features, scene.cloud.positions, scene.hp, scene.graphs, params, config);
  bool shapes_ok = static_cast<sp::Index>(logits.size()) == levels;
  for (sp::Index i = 1; i <= levels; ++i)
    shapes_ok = shapes_ok && logits[static_cast<std::size_t>(i) - 1].rows() ==
                    scene.hp.size_at(i) &&
                logits[static_cast<std::size_t>(i) - 1].cols() == 3;
  check.report("forward_full produces per-level logits", shapes_ok);

  const std::vector<sp::MatX3> x = sp::relative_positions(
      scene.hp, scene.cloud.positions, scene.cloud.positions.colwise().mean().transpose());
  bool radius_ok = true;
  for (sp::Index i = 0; i < levels; ++i) {
    const sp::IndexVec& parent_of = scene.hp.levels[static_cast<std::size_t>(i)].super_index;
    sp::Vec max_norm = sp::Vec::Zero(scene.hp.size_at(i + 1));
    for (sp::Index c = 0; c < parent_of.size(); ++c)
      max_norm[parent_of[c]] =
          std::max(max_norm[parent_of[c]], x[static_cast<std::size_t>(i)].row(c).norm());
    for (sp::Index q = 0; q < max_norm.size(); ++q)
      radius_ok = radius_ok && (max_norm[q] == 0.0 || std::abs(max_norm[q] - 1.0) <= 1e-9);
  }
  check.report("relative positions reach norm 1 per parent (1e-9)", radius_ok);

  const sp::LossBreakdown loss =
      sp::hierarchical_loss(logits, scene.hp, scene.cloud.labels, config.mu_weights);
  const double oracle =
      loss_oracle(logits, scene.hp, scene.cloud.labels, config.mu_weights);
  check.report("hierarchical loss matches scalar recomputation (1e-10)",
               std::abs(loss.total - oracle) <= 1e-10 && loss.total >= 0.0);

  std::vector<double> mu_zero(static_cast<std::size_t>(levels) - 1, 0.0);
  const sp::LossBreakdown collapsed =
      sp::hierarchical_loss(logits, scene.hp, scene.cloud.labels, mu_zero);
  check.report("mu = 0 collapses the loss to the level-1 term",
               collapsed.total == collapsed.per_level[0]);

  check.report("tanh sampling count for n = n_max = 128 is 97",
               sp::tanh_sample_count(128, 32, 128) == 97);

  const sp::DropoutView identity_view = sp::superpoint_dropout(scene.hp, 0.0, seed);
  bool identity_ok = true;
  for (const auto& level : identity_view.level_keep)
    for (std::uint8_t kept : level) identity_ok = identity_ok && kept == 1;
  check.report("dropout with p = 0 keeps everything", identity_ok);

  const sp::DropoutView view = sp::superpoint_dropout(scene.hp, 0.4, seed + 7);
  bool subtree_ok = true;
  const sp::IndexVec& parent_of = scene.hp.levels[1].super_index;
  for (sp::Index c = 0; c < parent_of.size(); ++c)
    if (!view.level_keep[1][static_cast<std::size_t>(parent_of[c])])
      subtree_ok = subtree_ok && !view.level_keep[0][static_cast<std::size_t>(c)];
  for (sp::Index p = 0; p < scene.hp.point_count; ++p)
    if (!view.level_keep[0][static_cast<std::size_t>(scene.hp.levels[0].super_index[p])])
      subtree_ok = subtree_ok && !view.point_keep[static_cast<std::size_t>(p)];
  check.report("dropout removes whole subtrees", subtree_ok);

  // Parameter blob round-trip.
  const std::string blob = "/tmp/superpart_kernel_check.params";
  const std::string manifest = blob + ".json";
  sp::save_params(params, blob, manifest);
  sp::KernelConfig other_config = config;
  other_config.seed = seed + 1234;
  sp::ParamBundle reloaded = sp::init_params(other_config, levels, 3, 5);
  sp::load_params(reloaded, blob, manifest);
  bool roundtrip_ok = true;
  auto a = sp::enumerate_tensors(params);
  auto b = sp::enumerate_tensors(reloaded);
  for (std::size_t i = 0; i < a.size(); ++i)
    for (sp::Index j = 0; j < a[i].rows * a[i].cols; ++j)
      roundtrip_ok = roundtrip_ok && a[i].data[j] == b[i].data[j];
  check.report("parameter blob round-trips bit for bit", roundtrip_ok);

  std::remove(blob.c_str());
  std::remove(manifest.c_str());

  std::cout << (check.all_passed ? "kernel-check: all checks passed\n"
                                 : "kernel-check: FAILURES\n");
  return check.all_passed ? 0 : 1;
}

std::string trim(const std::string& text) {
  std::size_t lo = text.find_first_not_of(" \t\r");
  if (lo == std::string::npos) return "";
  std::size_t hi = text.find_last_not_of(" \t\r");
  return text.substr(lo, hi - lo + 1);
}

// Folds `key = value` lines from a --config file into the token stream as
// `--key=value`, skipping keys already given on the command line so explicit
// flags win. Keys the active subcommand does not define are ignored.
std::vector<std::string> merge_config_tokens(const CLI::App& app, int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      path = args[i].substr(9);
  }
  if (path.empty()) return args;

  const CLI::App* sub = nullptr;
  for (const std::string& token : args) {
    if (token.empty() || token[0] == '-') continue;
    sub = app.get_subcommand_no_throw(token);
    break;
  }
  if (sub == nullptr) return args;

  std::ifstream file(path);
  if (!file) throw std::runtime_error("cannot open config file: " + path);
  std::string line;
  while (std::getline(file, line)) {
    std::string entry = trim(line);
    if (entry.empty() || entry[0] == '#') continue;
    std::size_t eq = entry.find('=');
    if (eq == std::string::npos) continue;
    std::string key = trim(entry.substr(0, eq));
    std::string value = trim(entry.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    if (key.empty() || key == "config") continue;
    std::string flag = "--" + key;
    if (sub->get_option_no_throw(flag) == nullptr) continue;
    bool on_cli = false;
    for (const std::string& token : args)
      if (token == flag || token.rfind(flag + "=", 0) == 0) on_cli = true;
    if (on_cli) continue;
    args.push_back(flag + "=" + value);
  }
  return args;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical superpoint partitions of 3D point clouds"};
  app.require_subcommand(1);
  std::string config_path;

  FeaturesArgs features_args;
  CLI::App* features = app.add_subcommand("features", "compute handcrafted point features");
  features->add_option("--config", config_path, "key = value file with defaults");
  features->add_option("--input", features_args.input, "input cloud (ply or xyz)")->required();
  features->add_option("--voxel", features_args.voxel, "voxel size in meters, 0 = off");
  features->add_option("--k", features_args.k, "neighbors for local PCA");
  features->add_option("--mu", features_args.mu, "spatial block scale in 1/m, 0 = off");
  features->add_option("--out", features_args.out, "output csv path")->required();

  PartitionArgs partition_args;
  CLI::App* partition = app.add_subcommand("partition", "build a hierarchical partition");
  partition->add_option("--config", config_path, "key = value file with defaults");
  partition->add_option("--input", partition_args.input, "input cloud")->required();
  partition->add_option("--lambda", partition_args.lambda, "comma-separated lambda per level")
      ->required();
  partition->add_option("--voxel", partition_args.voxel, "voxel size in meters, 0 = off");
  partition->add_option("--out", partition_args.out, "output sph1 path")->required();
  partition->add_flag("--weighted-fidelity", partition_args.weighted_fidelity,
                      "weight fidelity by contained point counts");
  partition->add_option("--seed", partition_args.seed, "solver seed");
  partition->add_option("--threads", partition_args.threads, "worker cap, 0 = default");
  partition->add_option("--k-feat", partition_args.k_feat, "neighbors for local PCA");
  partition->add_option("--k-graph", partition_args.k_graph, "neighbors in the cut graph");

  GraphArgs graph_args;
  CLI::App* graph = app.add_subcommand("graph", "build a superpoint adjacency graph");
  graph->add_option("--config", config_path, "key = value file with defaults");
  graph->add_option("--partition", graph_args.partition, "input sph1 path")->required();
  graph->add_option("--input", graph_args.input, "cloud the partition was built from")
      ->required();
  graph->add_option("--level", graph_args.level, "hierarchy level")->required();
  graph->add_option("--eps", graph_args.eps, "gap threshold in meters")->required();
  graph->add_option("--steps", graph_args.steps, "gap refinement steps");
  graph->add_option("--voxel", graph_args.voxel, "voxel size the partition used, 0 = off");
  graph->add_option("--out", graph_args.out, "output sph1 path")->required();

  OracleArgs oracle_args;
  CLI::App* oracle = app.add_subcommand("oracle", "evaluate oracle purity of a partition");
  oracle->add_option("--config", config_path, "key = value file with defaults");
  oracle->add_option("--partition", oracle_args.partition, "input sph1 path")->required();
  oracle->add_option("--labels-from-input", oracle_args.labels_from_input,
                     "labeled cloud the partition was built from")
      ->required();
  oracle->add_option("--level", oracle_args.level, "hierarchy level");
  oracle->add_option("--voxel", oracle_args.voxel, "voxel size the partition used, 0 = off");
  oracle->add_option("--csv", oracle_args.csv, "output csv path")->required();

  SweepArgs sweep_args;
  CLI::App* sweep = app.add_subcommand("sweep", "purity sweep over a parameter grid");
  sweep->add_option("--config", config_path, "key = value file with defaults");
  sweep->add_option("--input", sweep_args.input, "labeled input cloud")->required();
  sweep->add_option("--mode", sweep_args.mode, "partition or voxel")->required();
  sweep->add_option("--grid", sweep_args.grid, "comma-separated grid values")->required();
  sweep->add_option("--csv", sweep_args.csv, "output csv path")->required();

  std::uint64_t kernel_seed = 0;
  bool kernel_nano = false;
  CLI::App* kernel = app.add_subcommand("kernel-check", "run the numeric kernel property suite");
  kernel->add_option("--config", config_path, "key = value file with defaults");
  kernel->add_option("--seed", kernel_seed, "rng seed");
  kernel->add_flag("--nano", kernel_nano, "check the point-free variant");

  BenchArgs bench_args;
  CLI::App* bench = app.add_subcommand("bench", "time the pipeline stages");
  bench->add_option("--config", config_path, "key = value file with defaults");
  bench->add_option("--input", bench_args.input, "input cloud")->required();
  bench->add_option("--repeat", bench_args.repeat, "repetitions to average");
  bench->add_option("--lambda", bench_args.lambda, "comma-separated lambda per level");
  bench->add_option("--voxel", bench_args.voxel, "voxel size in meters, 0 = off");
  bench->add_option("--eps", bench_args.eps, "gap threshold for the graph stage");

  std::vector<std::string> tokens;
  try {
    tokens = merge_config_tokens(app, argc, argv);
  } catch (const std::exception& error) {
    std::cerr << "error: " << error.what() << "\n";
    return 1;
  }
  std::reverse(tokens.begin(), tokens.end());
  try {
    app.parse(tokens);
  } catch (const CLI::ParseError& parse_error) {
    return app.exit(parse_error);
  }

  try {
    if (features->parsed()) return run_features(features_args);
    if (partition->parsed()) return run_partition(partition_args);
    if (graph->parsed()) return run_graph(graph_args);
    if (oracle->parsed()) return run_oracle(oracle_args);
    if (sweep->parsed()) return run_sweep(sweep_args);
    if (kernel->parsed()) return run_kernel_check(kernel_seed, kernel_nano);
    if (bench->parsed()) return run_bench(bench_args);
  } catch (const std::exception& error) {
    std::cerr << "error: " << error.what() << "\n";
    return 1;
  }
  return 0;
}
