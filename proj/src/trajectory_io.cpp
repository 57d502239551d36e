#include "lcswitch/trajectory_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "lcswitch/checksum.hpp"
#include "lcswitch/errors.hpp"

namespace lcswitch {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'C', 'S', 'W', 'T', 'R', 'J', '1'};

class Writer {
 public:
  template <class T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out_.append(reinterpret_cast<const char*>(raw), sizeof(T));
  }
  void bytes(const char* p, std::size_t n) { out_.append(p, n); }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::string origin) : data_(data), origin_(std::move(origin)) {}

  template <class T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw, sizeof(T));
    return v;
  }
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw IntegrityError("trajectory file '" + origin_ + "' is truncated");
  }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  const char* cursor() const noexcept { return data_.data() + pos_; }
  void skip(std::size_t n) { need(n); pos_ += n; }
  const std::string& origin() const noexcept { return origin_; }

 private:
  const std::string& data_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_trajectory(const TrajectoryRecord& r) {
  const std::size_t n = r.size();
  for (const auto* col : {&r.n_a, &r.n_b, &r.alpha_re, &r.alpha_im, &r.beta_re, &r.beta_im})
    if (col->size() != n) throw DimensionMismatch("trajectory columns differ in length");
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.put<std::uint32_t>(kTrajectoryFormatVersion);
  w.put<std::uint32_t>(r.scheme == Scheme::TheoryA ? 0u : 1u);
  w.put<std::uint64_t>(r.seed);
  w.put<std::uint64_t>(r.index);
  w.put<double>(r.aleph);
  w.put<std::int32_t>(r.cutoffs.n_a_max);
  w.put<std::int32_t>(r.cutoffs.n_b_max);
  w.put<double>(r.dt_sample);
  w.put<double>(r.transient_cut);
  w.put<double>(r.time_factor);
  w.put<std::uint64_t>(n);
  w.put<std::uint64_t>(r.jumps.size());
  w.put<std::uint8_t>(r.truncation_warning ? 1 : 0);
  for (int i = 0; i < 7; ++i) w.put<std::uint8_t>(0);
  w.put<double>(r.max_edge_population);
  for (const auto* col : {&r.t, &r.n_a, &r.n_b, &r.alpha_re, &r.alpha_im, &r.beta_re, &r.beta_im})
    for (double v : *col) w.put<double>(v);
  for (const JumpEvent& j : r.jumps) {
    w.put<double>(j.time);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(j.channel));
  }
  return w.take();
}

TrajectoryRecord decode_trajectory(const std::string& bytes, const std::string& origin) {
  Reader rd(bytes, origin);
  rd.need(sizeof kMagic);
  if (std::memcmp(rd.cursor(), kMagic, sizeof kMagic) != 0)
    throw IntegrityError("'" + origin + "' is not a trajectory file");
  rd.skip(sizeof kMagic);
  const auto version = rd.get<std::uint32_t>();
  if (version != kTrajectoryFormatVersion)
    throw IntegrityError("'" + origin + "' has unsupported format version " + std::to_string(version));
  TrajectoryRecord r;
  const auto scheme = rd.get<std::uint32_t>();
  if (scheme > 1) throw IntegrityError("'" + origin + "' has an invalid scheme tag");
  r.scheme = scheme == 0 ? Scheme::TheoryA : Scheme::AdjointB;
  r.seed = rd.get<std::uint64_t>();
  r.index = rd.get<std::uint64_t>();
  r.aleph = rd.get<double>();
  r.cutoffs.n_a_max = rd.get<std::int32_t>();
  r.cutoffs.n_b_max = rd.get<std::int32_t>();
  r.dt_sample = rd.get<double>();
  r.transient_cut = rd.get<double>();
  r.time_factor = rd.get<double>();
  const auto n = rd.get<std::uint64_t>();
  const auto n_jumps = rd.get<std::uint64_t>();
  r.truncation_warning = rd.get<std::uint8_t>() != 0;
  rd.skip(7);
  r.max_edge_population = rd.get<double>();
  if (n > rd.remaining() / (7 * sizeof(double))) throw IntegrityError("trajectory file '" + origin + "' is truncated");
  for (auto* col : {&r.t, &r.n_a, &r.n_b, &r.alpha_re, &r.alpha_im, &r.beta_re, &r.beta_im}) {
    col->resize(n);
    for (auto& v : *col) v = rd.get<double>();
  }
  if (n_jumps > rd.remaining() / 9) throw IntegrityError("trajectory file '" + origin + "' is truncated");
  r.jumps.resize(n_jumps);
  for (auto& j : r.jumps) {
    j.time = rd.get<double>();
    const auto ch = rd.get<std::uint8_t>();
    if (ch > 1) throw IntegrityError("'" + origin + "' has an invalid jump channel");
    j.channel = static_cast<JumpChannel>(ch);
  }
  if (rd.remaining() != 0) throw IntegrityError("'" + origin + "' has trailing bytes");
  return r;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + path.string() + "'");
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("write failed for '" + path.string() + "'");
  }
  fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IntegrityError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_trajectory(const fs::path& path, const TrajectoryRecord& record) {
  write_text(path, encode_trajectory(record));
}

TrajectoryRecord read_trajectory(const fs::path& path) { return decode_trajectory(read_text(path), path.string()); }

void write_trajectory_csv(const fs::path& path, const TrajectoryRecord& r) {
  std::ostringstream ss;
  ss << std::setprecision(17);
  ss << "t,n_a,n_b,alpha_re,alpha_im,beta_re,beta_im\n";
  for (std::size_t k = 0; k < r.size(); ++k)
    ss << r.t[k] << ',' << r.n_a[k] << ',' << r.n_b[k] << ',' << r.alpha_re[k] << ',' << r.alpha_im[k] << ','
       << r.beta_re[k] << ',' << r.beta_im[k] << '\n';
  write_text(path, ss.str());
}

std::size_t EnsembleManifest::truncation_warnings() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.truncation_warning ? 1 : 0;
  return n;
}

json to_json(const SystemParams& p) {
  return {{"delta_a", p.delta_a}, {"omega_b", p.omega_b}, {"g", p.g},
          {"F", p.F},             {"kappa_a", p.kappa_a}, {"kappa_b", p.kappa_b}};
}

SystemParams params_from_json(const json& j) {
  SystemParams p;
  p.delta_a = j.value("delta_a", p.delta_a);
  p.omega_b = j.value("omega_b", p.omega_b);
  p.g = j.value("g", p.g);
  p.F = j.value("F", p.F);
  p.kappa_a = j.value("kappa_a", p.kappa_a);
  p.kappa_b = j.value("kappa_b", p.kappa_b);
  return p;
}

namespace {

std::string to_string(InitialStatePolicy::Kind k) {
  switch (k) {
    case InitialStatePolicy::Kind::UniformDisk: return "uniform-disk";
    case InitialStatePolicy::Kind::Coherent: return "coherent";
    case InitialStatePolicy::Kind::Fock: return "fock";
  }
  return "?";
}

InitialStatePolicy::Kind parse_kind(const std::string& s) {
  if (s == "uniform-disk") return InitialStatePolicy::Kind::UniformDisk;
  if (s == "coherent") return InitialStatePolicy::Kind::Coherent;
  if (s == "fock") return InitialStatePolicy::Kind::Fock;
  throw InvalidParameter("unknown initial-state policy '" + s + "'");
}

}  // namespace

json to_json(const EnsembleSpec& s) {
  const auto& in = s.initial;
  return {{"n_traj", s.n_traj},
          {"t_transient", s.t_transient},
          {"t_total_post", s.t_total_post},
          {"sample_dt", s.sample_dt},
          {"dt_max", s.dt_max},
          {"p_cap", s.p_cap},
          {"initial",
           {{"kind", to_string(in.kind)},
            {"disk_radius", in.disk_radius},
            {"clip_to_cutoffs", in.clip_to_cutoffs},
            {"alpha", {in.alpha.real(), in.alpha.imag()}},
            {"beta", {in.beta.real(), in.beta.imag()}},
            {"fock", {in.fock_n_a, in.fock_n_b}}}}};
}

EnsembleSpec spec_from_json(const json& j) {
  EnsembleSpec s;
  s.n_traj = j.value("n_traj", s.n_traj);
  s.t_transient = j.value("t_transient", s.t_transient);
  s.t_total_post = j.value("t_total_post", s.t_total_post);
  s.sample_dt = j.value("sample_dt", s.sample_dt);
  s.dt_max = j.value("dt_max", s.dt_max);
  s.p_cap = j.value("p_cap", s.p_cap);
  if (j.contains("initial")) {
    const json& in = j.at("initial");
    auto& p = s.initial;
    p.kind = parse_kind(in.value("kind", std::string("uniform-disk")));
    p.disk_radius = in.value("disk_radius", p.disk_radius);
    p.clip_to_cutoffs = in.value("clip_to_cutoffs", p.clip_to_cutoffs);
    if (in.contains("alpha")) p.alpha = {in["alpha"].at(0).get<double>(), in["alpha"].at(1).get<double>()};
    if (in.contains("beta")) p.beta = {in["beta"].at(0).get<double>(), in["beta"].at(1).get<double>()};
    if (in.contains("fock")) {
      p.fock_n_a = in["fock"].at(0).get<int>();
      p.fock_n_b = in["fock"].at(1).get<int>();
    }
  }
  return s;
}

json to_json(const EnsembleManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"file", e.file},
                       {"index", e.index},
                       {"seed", e.seed},
                       {"samples", e.samples},
                       {"jumps", e.jumps},
                       {"truncation_warning", e.truncation_warning},
                       {"max_edge_population", e.max_edge_population},
                       {"size", e.size},
                       {"sha256", e.sha256}});
  }
  return {{"format", "lcswitch-ensemble"},
          {"format_version", kTrajectoryFormatVersion},
          {"aleph", m.plan.aleph},
          {"scheme", to_string(m.plan.scheme)},
          {"base_params", to_json(m.plan.base)},
          {"resolved_params", to_json(resolve_params(m.plan).params)},
          {"cutoffs", {m.cutoffs.n_a_max, m.cutoffs.n_b_max}},
          {"spec", to_json(m.spec)},
          {"master_seed", m.master_seed},
          {"truncation_warnings", m.truncation_warnings()},
          {"trajectories", entries}};
}

EnsembleManifest manifest_from_json(const json& j) {
  if (j.value("format", std::string()) != "lcswitch-ensemble")
    throw IntegrityError("not an ensemble manifest");
  EnsembleManifest m;
  m.plan.aleph = j.at("aleph").get<double>();
  m.plan.scheme = parse_scheme(j.at("scheme").get<std::string>());
  m.plan.base = params_from_json(j.at("base_params"));
  m.cutoffs = {j.at("cutoffs").at(0).get<int>(), j.at("cutoffs").at(1).get<int>()};
  m.spec = spec_from_json(j.at("spec"));
  m.master_seed = j.at("master_seed").get<std::uint64_t>();
  for (const auto& e : j.at("trajectories")) {
    ManifestEntry me;
    me.file = e.at("file").get<std::string>();
    me.index = e.at("index").get<std::uint64_t>();
    me.seed = e.at("seed").get<std::uint64_t>();
    me.samples = e.at("samples").get<std::size_t>();
    me.jumps = e.at("jumps").get<std::size_t>();
    me.truncation_warning = e.at("truncation_warning").get<bool>();
    me.max_edge_population = e.at("max_edge_population").get<double>();
    me.size = e.at("size").get<std::uintmax_t>();
    me.sha256 = e.at("sha256").get<std::string>();
    m.entries.push_back(std::move(me));
  }
  return m;
}

std::string canonical_dump(const json& j) { return j.dump(2) + "\n"; }

EnsembleManifest write_ensemble(const fs::path& dir, const std::vector<TrajectoryRecord>& records,
                                const ScalingPlan& plan, const FockCutoffs& cutoffs, const EnsembleSpec& spec,
                                std::uint64_t master_seed) {
  fs::create_directories(dir);
  EnsembleManifest m;
  m.plan = plan;
  m.cutoffs = cutoffs;
  m.spec = spec;
  m.master_seed = master_seed;
  for (const auto& r : records) {
    std::ostringstream name;
    name << "traj_" << std::setw(5) << std::setfill('0') << r.index << ".lctraj";
    const std::string bytes = encode_trajectory(r);
    write_text(dir / name.str(), bytes);
    m.entries.push_back({name.str(), r.index, r.seed, r.size(), r.jumps.size(), r.truncation_warning,
                         r.max_edge_population, bytes.size(), sha256_hex(bytes)});
  }
  write_text(dir / "manifest.json", canonical_dump(to_json(m)));
  return m;
}

EnsembleManifest read_manifest(const fs::path& manifest_path) {
  json j;
  try {
    j = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw IntegrityError("manifest '" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  try {
    return manifest_from_json(j);
  } catch (const json::exception& e) {
    throw IntegrityError("manifest '" + manifest_path.string() + "' is malformed: " + e.what());
  }
}

std::vector<TrajectoryRecord> load_ensemble(const fs::path& manifest_path, bool verify) {
  const EnsembleManifest m = read_manifest(manifest_path);
  const fs::path dir = manifest_path.parent_path();
  std::vector<TrajectoryRecord> out;
  out.reserve(m.entries.size());
  for (const auto& e : m.entries) {
    const fs::path p = dir / e.file;
    const std::string bytes = read_text(p);
    if (verify && (bytes.size() != e.size || sha256_hex(bytes) != e.sha256))
      throw IntegrityError("checksum mismatch for trajectory file '" + p.string() + "'");
    out.push_back(decode_trajectory(bytes, p.string()));
  }
  return out;
}

}  // namespace lcswitch
