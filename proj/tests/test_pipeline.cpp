#include <doctest.h>

#include <filesystem>
#include <map>
#include <sstream>

#include "lcswitch/checksum.hpp"
#include "lcswitch/csv.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/pipeline.hpp"
#include "lcswitch/report.hpp"
#include "lcswitch/trajectory_io.hpp"

using namespace lcswitch;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lcswitch_test_" + name);
  fs::remove_all(p);
  return p;
}

// Small enough to run in about a second; switching is frequent at these
// cutoffs, which is all the plumbing tests need.
RunConfig tiny_config(const fs::path& root) {
  RunConfig c;
  c.alephs = {3.0};
  c.ensemble.n_traj = 2;
  c.ensemble.t_transient = 100.0;
  c.ensemble.t_total_post = 2000.0;
  c.ensemble.sample_dt = 1.0;
  c.cutoffs = {{3.0, {12, 20}}};
  c.analysis.bootstrap_resamples = 50;
  c.analysis.kmeans_restarts = 3;
  c.output_root = root;
  return c;
}

/// Relative path -> file bytes for every file below `root` except the
/// run manifest (which records wall-clock timings).
std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    out[fs::relative(e.path(), root).generic_string()] = read_text(e.path());
  }
  return out;
}

}  // namespace

TEST_SUITE("cli-pipeline") {
  TEST_CASE("config round-trips through JSON and rejects unknown keys") {
    RunConfig c = tiny_config("somewhere");
    c.alephs = {3.0, 4.5};
    c.analysis.escape_directions = {"21"};
    const RunConfig d = config_from_json(to_json(c));
    CHECK(to_json(d) == to_json(c));

    json j = to_json(c);
    j["ensemble"]["n_trajectories"] = 3;
    CHECK_THROWS_AS(config_from_json(j), InvalidParameter);
    json k = to_json(c);
    k["colour"] = "blue";
    CHECK_THROWS_AS(config_from_json(k), InvalidParameter);
  }

  TEST_CASE("melted-regime aleph is refused without the override") {
    RunConfig c = tiny_config(scratch("melted"));
    c.alephs = {1.0};
    try {
      c.validate();
      FAIL("expected refusal");
    } catch (const InvalidParameter& e) {
      CHECK(std::string(e.what()).find("melted") != std::string::npos);
    }
    CHECK_THROWS_AS(run_pipeline(c), InvalidParameter);
    CHECK_FALSE(fs::exists(c.output_root));
    c.allow_melted = true;
    CHECK_NOTHROW(c.validate());
  }

  TEST_CASE("suggested cutoffs respect the floors and grow with aleph") {
    const auto c2 = suggest_cutoffs(working_point(), 2.0);
    const auto c6 = suggest_cutoffs(working_point(), 6.0);
    CHECK(c2.n_a_max >= 6);
    CHECK(c2.n_b_max >= 4);
    CHECK(c6.n_a_max >= c2.n_a_max);
    CHECK(c6.n_b_max > c2.n_b_max);
  }

  TEST_CASE("rerun with identical config recomputes nothing") {
    const RunConfig c = tiny_config(scratch("idem"));
    const auto first = run_pipeline(c);
    CHECK(first.reused.empty());
    CHECK(first.recomputed.size() == 5);
    CHECK(first.manifest.complete());
    const auto bytes = snapshot(c.output_root);

    const auto second = run_pipeline(c);
    CHECK(second.recomputed.empty());
    CHECK(second.reused.size() == 5);
    CHECK(second.manifest.hash() == first.manifest.hash());
    CHECK(snapshot(c.output_root) == bytes);

    // Every file the manifest lists exists with the recorded checksum.
    const auto m = read_run_manifest(c.output_root / "run_manifest.json");
    CHECK(m.hash() == first.manifest.hash());
    for (const auto& s : m.stages) CHECK(verify_outputs(c.output_root, s));
  }

  TEST_CASE("tampering with a trajectory names the file") {
    const RunConfig c = tiny_config(scratch("tamper"));
    run_pipeline(c);
    const fs::path victim = c.output_root / "aleph_3" / "ensemble" / "traj_00001.lctraj";
    std::string bytes = read_text(victim);
    bytes[bytes.size() / 2] ^= 0x01;
    write_text(victim, bytes);
    try {
      run_pipeline(c);
      FAIL("expected an integrity error");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find("traj_00001.lctraj") != std::string::npos);
    }
    CHECK_THROWS_AS(load_ensemble(victim.parent_path() / "manifest.json", true), IntegrityError);
    CHECK_THROWS_AS(write_report(c.output_root, c.output_root / "report"), IntegrityError);
  }

  TEST_CASE("deleting downstream outputs leaves upstream results unchanged") {
    const RunConfig c = tiny_config(scratch("isolation"));
    run_pipeline(c);
    const auto before = snapshot(c.output_root);
    fs::remove_all(c.output_root / "aleph_3" / "survival");
    fs::remove_all(c.output_root / "aleph_3" / "escape");
    const auto again = run_pipeline(c);
    CHECK(again.recomputed == std::vector<std::string>{"survival/aleph_3", "escape/aleph_3"});
    CHECK(snapshot(c.output_root) == before);

    // A missing file inside a stage directory also triggers recomputation.
    fs::remove(c.output_root / "aleph_3" / "segment" / "labels_00000.csv");
    const auto third = run_pipeline(c);
    CHECK(third.recomputed.front() == "segment/aleph_3");
    CHECK(snapshot(c.output_root) == before);
  }

  TEST_CASE("two output roots with the same seed hold identical bytes") {
    RunConfig a = tiny_config(scratch("det_a"));
    RunConfig b = tiny_config(scratch("det_b"));
    const auto ra = run_pipeline(a);
    const auto rb = run_pipeline(b);
    CHECK(ra.manifest.hash() == rb.manifest.hash());
    CHECK(snapshot(a.output_root) == snapshot(b.output_root));

    RunConfig c = tiny_config(scratch("det_c"));
    c.master_seed = 2;
    run_pipeline(c);
    CHECK(read_text(c.output_root / "aleph_3/ensemble/traj_00000.lctraj") !=
          read_text(a.output_root / "aleph_3/ensemble/traj_00000.lctraj"));
  }

  TEST_CASE("a failing stage halts with a partial manifest") {
    RunConfig c = tiny_config(scratch("failure"));
    c.analysis.kmeans_restarts = 0;
    try {
      run_pipeline(c);
      FAIL("expected a stage failure");
    } catch (const StageFailure& e) {
      CHECK(e.stage() == "segment/aleph_3");
    }
    const auto m = read_run_manifest(c.output_root / "run_manifest.json");
    REQUIRE(m.stages.size() == 2);
    CHECK(m.stages[0].status == "done");
    CHECK(m.stages[1].status == "failed");
    CHECK_FALSE(m.stages[1].error.empty());
    CHECK_FALSE(m.complete());

    const auto r = write_report(c.output_root, c.output_root / "report");
    CHECK_FALSE(r.complete);
    CHECK(r.summary.at("gaps").size() == 4);
    CHECK(r.summary.at("gaps")[0].at("stage") == "segment/aleph_3");
  }

  TEST_CASE("report: regeneration, Lambda_eff identity and omitted hazards") {
    const RunConfig c = tiny_config(scratch("report"));
    run_pipeline(c);
    const fs::path out = c.output_root / "report";
    const auto r1 = write_report(c.output_root, out);
    CHECK(r1.complete);
    std::map<std::string, std::string> first;
    for (const auto& f : r1.files) first[f.filename().string()] = read_text(f);
    CHECK(first.size() == 10);
    const auto r2 = write_report(c.output_root, out);
    for (const auto& f : r2.files) CHECK(read_text(f) == first.at(f.filename().string()));

    std::istringstream in(first.at("fig3_rates.csv"));
    std::string line;
    std::getline(in, line);
    const auto header = split_csv_line(line);
    CHECK(header[1] == "k12");
    CHECK(header[4] == "k21");
    CHECK(header[7] == "lambda_eff");
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      const auto f = split_csv_line(line);
      CHECK(std::stod(f[7]) == std::stod(f[1]) + std::stod(f[4]));
      ++rows;
    }
    CHECK(rows == 1);

    // The pre/post filters exceed every dwell at these cutoffs, so both
    // directions have empty event sets.
    const json& esc = r1.summary.at("escape").at("3");
    for (const char* d : {"12", "21"}) {
      CHECK(esc.at(d).at("events_phase") == 0);
      CHECK(esc.at(d).at("hazard_omitted") == true);
      CHECK_FALSE(esc.at(d).contains("hazard_table"));
    }
    CHECK(first.at("fig5_hazard.csv") == "aleph,direction,phase,raw,hazard,masked\n");
  }

  TEST_CASE("report flags stages missing from the manifest") {
    const RunConfig c = tiny_config(scratch("gaps"));
    run_pipeline(c);
    json m = json::parse(read_text(c.output_root / "run_manifest.json"));
    auto& st = m.at("stages");
    st.erase(std::remove_if(st.begin(), st.end(), [](const json& s) { return s.at("name") == "escape/aleph_3"; }),
             st.end());
    write_text(c.output_root / "run_manifest.json", canonical_dump(m));
    const auto r = write_report(c.output_root, c.output_root / "report");
    CHECK_FALSE(r.complete);
    REQUIRE(r.summary.at("gaps").size() == 1);
    CHECK(r.summary.at("gaps")[0].at("stage") == "escape/aleph_3");
    CHECK(r.summary.at("gaps")[0].at("reason") == "not run");
    CHECK(r.summary.at("escape").empty());
    CHECK(r.summary.at("rates").size() == 1);
  }

  TEST_CASE("fit stage handles too few and enough points") {
    const fs::path dir = scratch("fits");
    std::vector<ScalingPoint> p12{{3.0, 0.02, 0.002}};
    fit_points_stage(p12, {}, dir);
    json f = json::parse(read_text(dir / "fits.json"));
    CHECK(f.at("fits").empty());
    CHECK(f.at("status").at("12").get<std::string>().find("insufficient") == 0);

    std::vector<ScalingPoint> pts;
    for (double a : {2.0, 3.0, 4.0, 5.0}) {
      const double k = 0.267 * std::exp(-0.178 * a);
      pts.push_back({a, k, 0.05 * k});
    }
    fit_points_stage(pts, {}, dir);
    f = json::parse(read_text(dir / "fits.json"));
    REQUIRE(f.at("fits").size() == 1);
    const auto params = f.at("fits")[0].at("params").get<std::vector<double>>();
    CHECK(params[0] == doctest::Approx(0.267).epsilon(1e-6));
    CHECK(params[1] == doctest::Approx(0.178).epsilon(1e-6));
  }
}
