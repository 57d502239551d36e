#include "lcswitch/report.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "lcswitch/csv.hpp"
#include "lcswitch/errors.hpp"
#include "lcswitch/histogram.hpp"
#include "lcswitch/pipeline.hpp"
#include "lcswitch/trajectory_io.hpp"

namespace lcswitch {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw IntegrityError("table lacks column '" + name + "'");
    return static_cast<std::size_t>(it - header.begin());
  }
};

Table read_table(const fs::path& path) {
  Table t;
  std::istringstream in(read_text(path));
  std::string line;
  if (!std::getline(in, line)) throw IntegrityError("empty table " + path.string());
  t.header = split_csv_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) throw IntegrityError("ragged row in " + path.string());
    t.rows.push_back(std::move(row));
  }
  return t;
}

double number(const std::string& s) { return std::stod(s); }

/// Appends `src` rows to `dst`, prefixed by fixed leading cells.
void append_rows(CsvBuilder& dst, const Table& src, std::initializer_list<std::string> lead) {
  for (const auto& row : src.rows) {
    for (const auto& c : lead) dst.cell(c);
    for (const auto& c : row) dst.cell(c);
    dst.end_row();
  }
}

/// Expected stage names, in execution order, for the configured alephs.
std::vector<std::string> expected_stages(const std::vector<double>& alephs) {
  std::vector<std::string> out;
  for (double a : alephs)
    for (const char* s : {"simulate/", "segment/", "survival/"}) out.push_back(s + aleph_dir_name(a));
  out.emplace_back("fit-rates");
  for (double a : alephs) out.push_back("escape/" + aleph_dir_name(a));
  return out;
}

class ReportWriter {
 public:
  ReportWriter(fs::path root, fs::path out, const ReportOptions& opt)
      : root_(std::move(root)), out_(std::move(out)), opt_(opt) {}

  ReportResult run() {
    const fs::path mpath = root_ / "run_manifest.json";
    if (!fs::exists(mpath)) throw InsufficientData("no run manifest in " + root_.string());
    manifest_ = read_run_manifest(mpath);
    alephs_ = manifest_.config.at("alephs").get<std::vector<double>>();
    std::sort(alephs_.begin(), alephs_.end());

    json gaps = json::array();
    for (const auto& name : expected_stages(alephs_)) {
      const StageRecord* s = manifest_.find(name);
      if (!s) {
        gaps.push_back({{"stage", name}, {"reason", "not run"}});
      } else if (s->status != "done") {
        gaps.push_back({{"stage", name}, {"reason", "failed: " + s->error}});
      } else if (!verify_outputs(root_, *s)) {
        gaps.push_back({{"stage", name}, {"reason", "recorded output missing"}});
      } else {
        done_.push_back(name);
      }
    }
    fs::create_directories(out_);

    summary_ = {{"tool_version", manifest_.tool_version},
                {"config_hash", manifest_.config_hash},
                {"manifest_hash", manifest_.hash()},
                {"alephs", alephs_},
                {"gaps", gaps}};
    figure1();
    figure2_and_rates();
    figure3();
    figures4_and_5();

    ReportResult r;
    r.complete = gaps.empty();
    summary_["complete"] = r.complete;
    emit("summary.json", canonical_dump(summary_));
    r.summary = summary_;
    r.files = files_;
    return r;
  }

 private:
  bool ok(const std::string& stage) const { return std::find(done_.begin(), done_.end(), stage) != done_.end(); }

  fs::path dir(double aleph, const char* sub) const { return root_ / aleph_dir_name(aleph) / sub; }

  void emit(const std::string& name, const std::string& text) {
    write_text(out_ / name, text);
    files_.push_back(out_ / name);
  }

  void figure1() {
    CsvBuilder pop{"aleph", "n_a", "n_b", "density"};
    CsvBuilder marg{"aleph", "n_a", "density"};
    CsvBuilder opt{"aleph", "re_alpha", "im_alpha", "density"};
    for (double a : alephs_) {
      const std::string tag = aleph_dir_name(a);
      if (!ok("simulate/" + tag)) continue;
      const auto records = load_ensemble(dir(a, "ensemble") / "manifest.json", true);
      std::vector<double> na, nb, re, im;
      for (const auto& r : records)
        for (std::size_t k = r.first_post_transient(); k < r.size(); ++k) {
          na.push_back(r.n_a[k]);
          nb.push_back(r.n_b[k]);
          re.push_back(r.alpha_re[k]);
          im.push_back(r.alpha_im[k]);
        }
      json& js = summary_["stationary"][format_double(a)];
      js["samples"] = na.size();
      if (na.empty()) continue;
      const auto h = make_histogram(na, nb, opt_.population_bins, opt_.population_bins);
      for (std::size_t i = 0; i < h.nx; ++i)
        for (std::size_t j = 0; j < h.ny; ++j) pop.cell(a).cell(h.x_center(i)).cell(h.y_center(j)).cell(h.at(i, j)).end_row();
      const auto m = h.marginal_x();
      for (std::size_t i = 0; i < h.nx; ++i) marg.cell(a).cell(h.x_center(i)).cell(m[i]).end_row();
      const auto modes = find_modes(m, 2, 0.1);
      json mj = json::array();
      for (const auto& md : modes) mj.push_back({{"n_a", h.x_center(md.bin)}, {"height", md.height}, {"prominence", md.prominence}});
      js["n_a_modes"] = mj;
      js["n_a_bimodal"] = modes.size() >= 2;

      const auto o = make_histogram(re, im, opt_.optical_bins, opt_.optical_bins);
      for (std::size_t i = 0; i < o.nx; ++i)
        for (std::size_t j = 0; j < o.ny; ++j) opt.cell(a).cell(o.x_center(i)).cell(o.y_center(j)).cell(o.at(i, j)).end_row();
    }
    emit("fig1_populations.csv", pop.str());
    emit("fig1_n_a_marginal.csv", marg.str());
    emit("fig1_optical.csv", opt.str());
  }

  void figure2_and_rates() {
    CsvBuilder km{"aleph", "direction", "t", "survival", "fitted"};
    CsvBuilder rates{"aleph", "k12", "k12_ci_low", "k12_ci_high", "k21", "k21_ci_low", "k21_ci_high", "lambda_eff",
                     "p1", "p2"};
    json table = json::array();
    for (double a : alephs_) {
      const std::string tag = aleph_dir_name(a);
      if (!ok("survival/" + tag)) continue;
      const json r = json::parse(read_text(dir(a, "survival") / "rates.json"));
      json row = {{"aleph", a}, {"segmentation_reliable", r.at("segmentation_reliable")}};
      std::map<std::string, double> k;
      for (const char* d : {"12", "21"}) {
        const json& dj = r.at("directions").at(d);
        row["n_incident_" + std::string(d)] = r.at("n_incident_" + std::string(d));
        row["status_" + std::string(d)] = dj.at("status");
        if (dj.at("status") == "ok") {
          k[d] = dj.at("k").get<double>();
          row["k" + std::string(d)] = dj.at("k");
          row["k" + std::string(d) + "_ci"] = {dj.at("ci_low"), dj.at("ci_high")};
          row["t0_" + std::string(d)] = dj.at("t0");
          row["events_" + std::string(d)] = dj.at("n_events");
        } else {
          row["note_" + std::string(d)] = dj.at("note");
        }

        const Table t = read_table(dir(a, "survival") / ("km_" + std::string(d) + ".csv"));
        const std::size_t ct = t.column("t"), cs = t.column("survival");
        double s_at_t0 = 1.0;
        const bool fitted = dj.at("status") == "ok";
        const double t0 = fitted ? dj.at("t0").get<double>() : 0.0;
        if (fitted)
          for (const auto& row_t : t.rows)
            if (number(row_t[ct]) <= t0) s_at_t0 = number(row_t[cs]);
        for (const auto& row_t : t.rows) {
          km.cell(a).cell(d).cell(row_t[ct]).cell(row_t[cs]);
          const double tv = number(row_t[ct]);
          if (fitted && tv >= t0)
            km.cell(s_at_t0 * std::exp(-k[d] * (tv - t0)));
          else
            km.cell("");
          km.end_row();
        }
      }
      const double nan = std::nan("");
      auto ci = [&](const char* d, int i) {
        const json& dj = r.at("directions").at(d);
        return dj.at("status") == "ok" ? dj.at(i == 0 ? "ci_low" : "ci_high").get<double>() : nan;
      };
      const double k12 = k.contains("12") ? k["12"] : nan, k21 = k.contains("21") ? k["21"] : nan;
      // Lambda_eff is formed here from the same doubles so the identity is exact.
      const double lam = k12 + k21;
      rates.cell(a).cell(k12).cell(ci("12", 0)).cell(ci("12", 1)).cell(k21).cell(ci("21", 0)).cell(ci("21", 1)).cell(lam);
      if (std::isfinite(lam)) {
        rates.cell(k21 / lam).cell(k12 / lam);
        row["lambda_eff"] = lam;
        row["occupations"] = {k21 / lam, k12 / lam};
        row["k12_over_k21"] = k12 / k21;
      } else {
        rates.cell(nan).cell(nan);
        row["lambda_eff"] = nullptr;
      }
      rates.end_row();
      table.push_back(row);
    }
    summary_["rates"] = table;
    emit("fig2_survival.csv", km.str());
    emit("fig3_rates.csv", rates.str());
  }

  void figure3() {
    CsvBuilder curves{"direction", "form", "aleph", "k_fit", "s_eff"};
    if (!ok("fit-rates")) {
      summary_["fits"] = nullptr;
      emit("fig3_fits.csv", curves.str());
      return;
    }
    const json f = json::parse(read_text(root_ / "fits" / "fits.json"));
    summary_["fits"] = f;
    for (const auto& fit_j : f.at("fits")) {
      if (!fit_j.contains("params")) continue;
      ScalingFit fit;
      fit.direction = fit_j.at("direction").get<std::string>();
      fit.params = fit_j.at("params").get<std::vector<double>>();
      fit.form = fit.params.size() == 4 ? ScalingForm::Biexponential : ScalingForm::Single;
      const double lo = alephs_.front(), hi = alephs_.back();
      for (int i = 0; i <= 40; ++i) {
        const double a = lo + (hi - lo) * i / 40.0;
        curves.cell(fit.direction).cell(to_string(fit.form)).cell(a).cell(fit.rate(a)).cell(effective_action(fit, a)).end_row();
      }
    }
    emit("fig3_fits.csv", curves.str());
  }

  void figures4_and_5() {
    CsvBuilder cond{"aleph", "direction", "plane", "tau", "x", "y", "density"};
    CsvBuilder phase{"aleph", "direction", "tau", "phase", "density", "events"};
    CsvBuilder haz{"aleph", "direction", "phase", "raw", "hazard", "masked"};
    json esc = json::object();
    for (double a : alephs_) {
      const std::string tag = aleph_dir_name(a);
      if (!ok("escape/" + tag)) continue;
      const fs::path d = dir(a, "escape");
      const json e = json::parse(read_text(d / "escape.json"));
      json& ej = esc[format_double(a)];
      const std::string as = format_double(a);
      for (const char* dir_tag : {"12", "21"}) {
        if (!e.at("directions").contains(dir_tag)) continue;
        const json& dj = e.at("directions").at(dir_tag);
        json out = {{"events_density", dj.at("events_density")}, {"events_phase", dj.at("events_phase")}};
        if (dj.contains("exit_phase")) out["exit_phase"] = dj.at("exit_phase");
        for (const char* plane : {"optical", "mechanical"}) {
          const fs::path p = d / ("conditioned_" + std::string(plane) + "_" + dir_tag + ".csv");
          if (fs::exists(p)) append_rows(cond, read_table(p), {as, dir_tag, plane});
        }
        if (const fs::path p = d / ("phase_histogram_" + std::string(dir_tag) + ".csv"); fs::exists(p))
          append_rows(phase, read_table(p), {as, dir_tag});
        const bool omitted = dj.at("hazard_omitted").get<bool>();
        out["hazard_omitted"] = omitted;
        if (omitted) {
          out["hazard_note"] = dj.value("hazard_note", std::string());
        } else {
          const Table h = read_table(d / ("hazard_" + std::string(dir_tag) + ".csv"));
          append_rows(haz, h, {as, dir_tag});
          json rows = json::array();
          for (const auto& r : h.rows)
            rows.push_back({number(r[0]), number(r[2]), r[3] == "1"});
          out["hazard_table"] = {{"columns", {"phase", "hazard", "masked"}}, {"rows", rows}};
        }
        ej[dir_tag] = out;
      }
    }
    summary_["escape"] = esc;
    emit("fig4_conditioned.csv", cond.str());
    emit("fig5_phase.csv", phase.str());
    emit("fig5_hazard.csv", haz.str());
  }

  fs::path root_, out_;
  ReportOptions opt_;
  RunManifest manifest_;
  std::vector<double> alephs_;
  std::vector<std::string> done_;
  json summary_;
  std::vector<fs::path> files_;
};

}  // namespace

ReportResult write_report(const fs::path& run_root, const fs::path& out_dir, const ReportOptions& options) {
  return ReportWriter(run_root, out_dir, options).run();
}

}  // namespace lcswitch
