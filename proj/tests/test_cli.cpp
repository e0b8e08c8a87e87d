#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "superpart/cloud_io.hpp"
#include "superpart/sph1.hpp"

#include "test_helpers.hpp"

#include <cstdio>
#include <fstream>
#include <string>

#include <sys/wait.h>

using namespace superpart;

namespace {

struct RunResult {
  int status{-1};
  std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args, const std::string& env = "") {
  RunResult result;
  const std::string cmd =
      (env.empty() ? std::string() : env + " ") + SUPERPART_CLI_PATH + " " + args + " 2>&1";
  std::FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return result;
  char buf[4096];
  std::size_t got;
  while ((got = std::fread(buf, 1, sizeof(buf), pipe)) > 0) result.output.append(buf, got);
  const int rc = pclose(pipe);
  result.status = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  return result;
}

// Three well-separated labeled blobs. The cut graph never crosses blobs, so
// every partition component stays inside one class.
const std::string& scene_ply() {
  static const std::string path = [] {
    auto gen = testutil::rng(130);
    PointCloud cloud;
    cloud.positions.resize(180, 3);
    cloud.labels.resize(180);
    const Vec3 centers[3] = {Vec3(0.0, 0.0, 0.0), Vec3(6.0, 0.0, 0.0), Vec3(0.0, 6.0, 0.0)};
    for (int blob = 0; blob < 3; ++blob) {
      cloud.positions.middleRows(60 * blob, 60) = testutil::blob(gen, centers[blob], 60, 0.3);
      for (Index i = 0; i < 60; ++i) cloud.labels[60 * blob + i] = blob;
    }
    const std::string p = testutil::temp_path("scene.ply");
    write_cloud(cloud, p, CloudFormat::PlyBinary);
    return p;
  }();
  return path;
}

const std::string& base_partition() {
  static const std::string path = [] {
    const std::string p = testutil::temp_path("base.sph1");
    const RunResult run = run_cli("partition --input " + scene_ply() +
                                  " --lambda 0.5,2.0 --k-feat 8 --k-graph 6 --out " + p);
    REQUIRE(run.status == 0);
    return p;
  }();
  return path;
}

std::size_t count_lines(const std::string& text) {
  std::size_t lines = 0;
  for (char c : text)
    if (c == '\n') ++lines;
  return lines;
}

bool contains(const std::string& text, const std::string& needle) {
  return text.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("features subcommand writes a deterministic feature table") {
  const std::string out1 = testutil::temp_path("feat1.csv");
  const std::string out2 = testutil::temp_path("feat2.csv");
  const RunResult run1 =
      run_cli("features --input " + scene_ply() + " --k 8 --out " + out1);
  REQUIRE(run1.status == 0);
  CHECK(contains(run1.output, "wrote 180 feature rows"));

  const std::string csv = testutil::read_file(out1);
  REQUIRE(!csv.empty());
  CHECK(csv.rfind("x,y,z,linearity,planarity,scattering,verticality,elevation\n", 0) == 0);
  CHECK(count_lines(csv) == 181);

  const RunResult run2 =
      run_cli("features --input " + scene_ply() + " --k 8 --out " + out2);
  REQUIRE(run2.status == 0);
  CHECK(testutil::read_file(out2) == csv);
  std::remove(out1.c_str());
  std::remove(out2.c_str());
}

TEST_CASE("partition subcommand emits a loadable nested hierarchy") {
  const Sph1File file = read_sph1(base_partition());
  REQUIRE(file.hierarchy.level_count() == 2);
  CHECK(file.hierarchy.point_count == 180);
  const Index s1 = file.hierarchy.size_at(1);
  const Index s2 = file.hierarchy.size_at(2);
  CHECK(s1 >= s2);
  CHECK(s2 >= 3);  // the blobs are disconnected and can never merge
  CHECK(s1 <= 180);
  for (Index c = 0; c < s1; ++c)
    CHECK(file.hierarchy.levels[0].point_counts[c] >= 1);
}

TEST_CASE("partition runs are byte-identical across pool sizes") {
  const std::string args = "partition --input " + scene_ply() +
                           " --lambda 0.5,2.0 --k-feat 8 --k-graph 6 --out ";
  const std::string p1 = testutil::temp_path("det1.sph1");
  const std::string p2 = testutil::temp_path("det2.sph1");
  const std::string p3 = testutil::temp_path("det3.sph1");
  REQUIRE(run_cli(args + p1).status == 0);
  REQUIRE(run_cli(args + p2, "SUPERPART_THREADS=1").status == 0);
  REQUIRE(run_cli(args + p3, "SUPERPART_THREADS=2").status == 0);
  const std::string bytes = testutil::read_file(p1);
  REQUIRE(!bytes.empty());
  CHECK(testutil::read_file(p2) == bytes);
  CHECK(testutil::read_file(p3) == bytes);
  CHECK(bytes == testutil::read_file(base_partition()));
  std::remove(p1.c_str());
  std::remove(p2.c_str());
  std::remove(p3.c_str());
}

TEST_CASE("graph subcommand attaches adjacency features per level") {
  const std::string g1 = testutil::temp_path("graph1.sph1");
  const RunResult run1 = run_cli("graph --partition " + base_partition() + " --input " +
                                 scene_ply() + " --level 1 --eps 6.0 --out " + g1);
  REQUIRE(run1.status == 0);
  CHECK(contains(run1.output, "oriented edges"));

  const Sph1File file = read_sph1(g1);
  REQUIRE(file.graphs.size() == 2);
  CHECK(file.graphs[0].level == 1);
  CHECK(file.graphs[0].edge_count() > 0);
  CHECK(file.graphs[0].edge_count() % 2 == 0);  // both orientations stored
  CHECK(file.graphs[0].features.rows() == file.graphs[0].edge_count());
  CHECK(file.graphs[0].features.cols() == 18);
  CHECK(file.graphs[0].gaps.size() == file.graphs[0].edge_count());
  CHECK(file.graphs[1].edge_count() == 0);
  CHECK(file.hierarchy.point_count == 180);

  // Adding the level-2 graph keeps the level-1 section intact.
  const std::string g2 = testutil::temp_path("graph2.sph1");
  const RunResult run2 = run_cli("graph --partition " + g1 + " --input " + scene_ply() +
                                 " --level 2 --eps 8.0 --out " + g2);
  REQUIRE(run2.status == 0);
  const Sph1File both = read_sph1(g2);
  CHECK(both.graphs[0].edge_count() == file.graphs[0].edge_count());
  CHECK(both.graphs[1].edge_count() > 0);
  CHECK(both.graphs[1].features.cols() == 18);

  // Same invocation, same bytes.
  const std::string g3 = testutil::temp_path("graph3.sph1");
  REQUIRE(run_cli("graph --partition " + base_partition() + " --input " + scene_ply() +
                  " --level 1 --eps 6.0 --out " + g3)
              .status == 0);
  CHECK(testutil::read_file(g3) == testutil::read_file(g1));
  std::remove(g1.c_str());
  std::remove(g2.c_str());
  std::remove(g3.c_str());
}

TEST_CASE("oracle subcommand reports perfect purity on separated classes") {
  const std::string csv_path = testutil::temp_path("oracle.csv");
  const RunResult run = run_cli("oracle --partition " + base_partition() +
                                " --labels-from-input " + scene_ply() + " --level 1 --csv " +
                                csv_path);
  REQUIRE(run.status == 0);
  const std::string csv = testutil::read_file(csv_path);
  CHECK(csv.rfind("metric,value\n", 0) == 0);
  CHECK(contains(csv, "iou_class_0,1.000000\n"));
  CHECK(contains(csv, "iou_class_1,1.000000\n"));
  CHECK(contains(csv, "iou_class_2,1.000000\n"));
  CHECK(contains(csv, "miou,1.000000\n"));
  CHECK(contains(csv, "oa,1.000000\n"));
  CHECK(contains(csv, "evaluated,180\n"));
  std::remove(csv_path.c_str());
}

TEST_CASE("sweep subcommand writes the purity grid") {
  const std::string csv_path = testutil::temp_path("sweep.csv");
  const RunResult run = run_cli("sweep --input " + scene_ply() +
                                " --mode voxel --grid 0.1,50 --csv " + csv_path);
  REQUIRE(run.status == 0);
  CHECK(contains(run.output, "2 sweep rows"));
  const std::string csv = testutil::read_file(csv_path);
  CHECK(csv.rfind("grid_param,component_count,oracle_miou,oracle_oa\n", 0) == 0);
  CHECK(count_lines(csv) == 3);
  // Small voxels cannot mix the separated classes.
  CHECK(contains(csv, "0.100000,"));
  std::size_t line_start = csv.find("0.100000,");
  std::size_t line_end = csv.find('\n', line_start);
  CHECK(contains(csv.substr(line_start, line_end - line_start), ",1.000000,1.000000"));
  std::remove(csv_path.c_str());

  CHECK(run_cli("sweep --input " + scene_ply() + " --mode silly --grid 1 --csv " + csv_path)
            .status != 0);
}

TEST_CASE("kernel-check subcommand passes its property suite") {
  const RunResult full = run_cli("kernel-check --seed 5");
  REQUIRE(full.status == 0);
  CHECK(contains(full.output, "kernel-check: all checks passed"));
  CHECK_FALSE(contains(full.output, "[FAIL]"));
  std::size_t passes = 0;
  for (std::size_t at = full.output.find("[PASS]"); at != std::string::npos;
       at = full.output.find("[PASS]", at + 1))
    ++passes;
  CHECK(passes == 11);

  const RunResult nano = run_cli("kernel-check --seed 6 --nano");
  REQUIRE(nano.status == 0);
  CHECK(contains(nano.output, "kernel-check: all checks passed"));
}

TEST_CASE("bench subcommand prints per-stage timings") {
  const RunResult run = run_cli("bench --input " + scene_ply() + " --lambda 0.4,1.6");
  REQUIRE(run.status == 0);
  CHECK(contains(run.output, "stage,ms"));
  for (const char* stage : {"read,", "features,", "adjacency,", "partition,", "graphs,",
                            "total,"})
    CHECK(contains(run.output, stage));
}

TEST_CASE("config files supply defaults and the command line overrides them") {
  const std::string cfg = testutil::temp_path("features.cfg");
  {
    std::ofstream out(cfg);
    out << "k = 8\n";
  }
  const std::string from_cfg = testutil::temp_path("cfg.csv");
  const std::string from_flag = testutil::temp_path("flag.csv");
  const std::string overridden = testutil::temp_path("override.csv");
  const std::string k20 = testutil::temp_path("k20.csv");

  REQUIRE(run_cli("features --config " + cfg + " --input " + scene_ply() + " --out " +
                  from_cfg)
              .status == 0);
  REQUIRE(run_cli("features --input " + scene_ply() + " --k 8 --out " + from_flag).status ==
          0);
  CHECK(testutil::read_file(from_cfg) == testutil::read_file(from_flag));

  REQUIRE(run_cli("features --config " + cfg + " --k 20 --input " + scene_ply() + " --out " +
                  overridden)
              .status == 0);
  REQUIRE(run_cli("features --input " + scene_ply() + " --k 20 --out " + k20).status == 0);
  CHECK(testutil::read_file(overridden) == testutil::read_file(k20));
  CHECK(testutil::read_file(overridden) != testutil::read_file(from_cfg));

  for (const std::string& p : {cfg, from_cfg, from_flag, overridden, k20})
    std::remove(p.c_str());
}

TEST_CASE("invalid inputs exit nonzero with a diagnostic") {
  const RunResult missing =
      run_cli("features --input /nonexistent/void.ply --out /tmp/unused.csv");
  CHECK(missing.status != 0);
  CHECK(contains(missing.output, "error:"));

  // Cloud that does not match the partition.
  auto gen = testutil::rng(131);
  PointCloud small;
  small.positions = testutil::blob(gen, Vec3::Zero(), 50, 0.3);
  const std::string small_ply = testutil::temp_path("small.ply");
  write_cloud(small, small_ply, CloudFormat::PlyBinary);
  const RunResult mismatched =
      run_cli("graph --partition " + base_partition() + " --input " + small_ply +
              " --level 1 --eps 6.0 --out /tmp/unused.sph1");
  CHECK(mismatched.status != 0);
  CHECK(contains(mismatched.output, "error:"));

  // Labels are required for the oracle.
  const RunResult unlabeled =
      run_cli("oracle --partition " + base_partition() + " --labels-from-input " + small_ply +
              " --level 1 --csv /tmp/unused.csv");
  CHECK(unlabeled.status != 0);
  CHECK(contains(unlabeled.output, "error:"));
  std::remove(small_ply.c_str());

  // Bad lambda list and missing subcommand.
  CHECK(run_cli("partition --input " + scene_ply() + " --lambda , --out /tmp/unused.sph1")
            .status != 0);
  CHECK(run_cli("").status != 0);
}
