#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cotrack/metrics.hpp"
#include "cotrack/scene.hpp"
#include "cotrack/tracker.hpp"

namespace cotrack {

using Json = nlohmann::json;

inline Json box_to_json(const Box3D& b) {
  return Json{{"x", b.x},     {"y", b.y},     {"z", b.z},
              {"w", b.w},     {"l", b.l},     {"h", b.h},
              {"theta", b.theta}, {"vx", b.vx}, {"vy", b.vy},
              {"class", b.class_label}, {"score", b.score}};
}

inline Box3D box_from_json(const Json& j) {
  Box3D b;
  b.x = j.at("x");
  b.y = j.at("y");
  b.z = j.at("z");
  b.w = j.at("w");
  b.l = j.at("l");
  b.h = j.at("h");
  b.theta = j.at("theta");
  b.vx = j.at("vx");
  b.vy = j.at("vy");
  b.class_label = j.at("class");
  b.score = j.at("score");
  return b;
}

inline Json spec_to_json(const ScenarioSpec& s) {
  return Json{{"frame_rate", s.frame_rate},
              {"duration_s", s.duration_s},
              {"n_objects", s.n_objects},
              {"world_half", s.world_half},
              {"static_fraction", s.static_fraction},
              {"convoy_fraction", s.convoy_fraction},
              {"turn_prob", s.turn_prob},
              {"feature_dim", s.feature_dim},
              {"feature_block", s.feature_block},
              {"domain_seed", s.domain_seed},
              {"identity_domain", s.identity_domain},
              {"gap_strength", s.gap_strength},
              {"sigma_pos", s.sigma_pos},
              {"sigma_dim", s.sigma_dim},
              {"sigma_yaw", s.sigma_yaw},
              {"sigma_vel", s.sigma_vel},
              {"sigma_feat", s.sigma_feat},
              {"miss_rate", s.miss_rate},
              {"clutter_rate", s.clutter_rate},
              {"occlusion_factor", s.occlusion_factor},
              {"infra_dist_min", s.infra_dist_min},
              {"infra_dist_max", s.infra_dist_max},
              {"infra_height", s.infra_height}};
}

inline ScenarioSpec spec_from_json(const Json& j) {
  ScenarioSpec s;
  s.frame_rate = j.at("frame_rate");
  s.duration_s = j.at("duration_s");
  s.n_objects = j.at("n_objects");
  s.world_half = j.at("world_half");
  s.static_fraction = j.at("static_fraction");
  s.convoy_fraction = j.at("convoy_fraction");
  s.turn_prob = j.at("turn_prob");
  s.feature_dim = j.at("feature_dim");
  s.feature_block = j.at("feature_block");
  s.domain_seed = j.at("domain_seed");
  s.identity_domain = j.at("identity_domain");
  s.gap_strength = j.at("gap_strength");
  s.sigma_pos = j.at("sigma_pos");
  s.sigma_dim = j.at("sigma_dim");
  s.sigma_yaw = j.at("sigma_yaw");
  s.sigma_vel = j.at("sigma_vel");
  s.sigma_feat = j.at("sigma_feat");
  s.miss_rate = j.at("miss_rate");
  s.clutter_rate = j.at("clutter_rate");
  s.occlusion_factor = j.at("occlusion_factor");
  s.infra_dist_min = j.at("infra_dist_min");
  s.infra_dist_max = j.at("infra_dist_max");
  s.infra_height = j.at("infra_height");
  return s;
}

/// Deterministic fingerprint of a scenario's ground truth, stored in the
/// header so a loader can verify regeneration.
inline uint64_t scenario_gt_hash(const Scenario& sc) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& tr : sc.tracks) {
    h = fnv1a(&tr.track_id, sizeof tr.track_id, h);
    for (const Box3D& b : tr.boxes) {
      const double vals[9] = {b.x, b.y, b.z, b.w, b.l, b.h, b.theta, b.vx,
                              b.vy};
      h = fnv1a(vals, sizeof vals, h);
    }
  }
  return h;
}

/// Line-delimited scenario file: one header record (spec + seed + gt hash),
/// one ground-truth record per frame, and one observation record per
/// (frame, agent) listing detections (with latent features) and the agent's
/// observable ground truth in its own frame.
inline void scenario_save(const Scenario& sc, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write scenario file: " + path);
  Json header{{"type", "header"},
              {"seed", sc.seed},
              {"frames", sc.frames},
              {"gt_hash", scenario_gt_hash(sc)},
              {"spec", spec_to_json(sc.spec)}};
  f << header.dump() << "\n";
  for (int t = 0; t < sc.frames; ++t) {
    Json gt = Json::array();
    for (auto& [id, box] : sc.gt_at(t)) {
      Json g = box_to_json(box);
      g["id"] = id;
      gt.push_back(g);
    }
    const Pose& rel = sc.rel_pose[t];
    Json frame{{"type", "frame"},
               {"frame", t},
               {"rel_rot", std::vector<double>(rel.r.data.begin(),
                                               rel.r.data.end())},
               {"rel_t", std::vector<double>(rel.t.data.begin(),
                                             rel.t.data.end())},
               {"gt", gt}};
    f << frame.dump() << "\n";
    for (AgentKind kind :
         {AgentKind::Vehicle, AgentKind::Infrastructure}) {
      AgentObservation obs = observe(sc, kind, t);
      Json dets = Json::array();
      for (const Detection& d : obs.detections) {
        Json dj = box_to_json(d.box);
        dj["gt_id"] = d.gt_id;
        dj["feature"] = std::vector<double>(d.feature.data.begin(),
                                            d.feature.data.end());
        dets.push_back(dj);
      }
      Json vis = Json::array();
      for (size_t i = 0; i < obs.observable_ids.size(); ++i) {
        Json g = box_to_json(obs.observable_gt[i]);
        g["id"] = obs.observable_ids[i];
        vis.push_back(g);
      }
      Json rec{{"type", "obs"},
               {"frame", t},
               {"agent", agent_name(kind)},
               {"detections", dets},
               {"observable_gt", vis}};
      f << rec.dump() << "\n";
    }
  }
  if (!f) throw std::runtime_error("scenario write failed: " + path);
}

/// Loads a scenario by regenerating it from the stored (spec, seed) and
/// verifying the ground-truth fingerprint.
inline Scenario scenario_load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open scenario file: " + path);
  std::string line;
  if (!std::getline(f, line))
    throw std::runtime_error("empty scenario file: " + path);
  Json header = Json::parse(line);
  if (header.at("type") != "header")
    throw std::runtime_error("scenario file missing header: " + path);
  ScenarioSpec spec = spec_from_json(header.at("spec"));
  Scenario sc = generate_scenario(spec, header.at("seed"));
  if (scenario_gt_hash(sc) != header.at("gt_hash").get<uint64_t>())
    throw std::runtime_error("scenario fingerprint mismatch: " + path);
  return sc;
}

// ---------------------------------------------------------------------------
// Tracker output records.
// ---------------------------------------------------------------------------

/// Line format: frame id class x y z w l h theta vx vy score tag
inline void write_frame_outputs(const std::vector<FrameOutput>& frames,
                                const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write tracker output: " + path);
  f << "# frame id class x y z w l h theta vx vy score tag\n";
  f << std::setprecision(17);
  for (const FrameOutput& fo : frames)
    for (const FrameOutputBox& b : fo.boxes)
      f << b.frame << ' ' << b.id << ' ' << b.box.class_label << ' '
        << b.box.x << ' ' << b.box.y << ' ' << b.box.z << ' ' << b.box.w
        << ' ' << b.box.l << ' ' << b.box.h << ' ' << b.box.theta << ' '
        << b.box.vx << ' ' << b.box.vy << ' ' << b.box.score << ' '
        << provenance_name(b.tag) << "\n";
  if (!f) throw std::runtime_error("tracker output write failed: " + path);
}

inline std::vector<EvalBox> read_frame_outputs(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open tracker output: " + path);
  std::vector<EvalBox> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ss(line);
    EvalBox b;
    std::string tag;
    ss >> b.frame >> b.id >> b.box.class_label >> b.box.x >> b.box.y >>
        b.box.z >> b.box.w >> b.box.l >> b.box.h >> b.box.theta >> b.box.vx >>
        b.box.vy >> b.box.score >> tag;
    if (!ss) throw std::runtime_error("malformed tracker output line: " + line);
    out.push_back(b);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV, manifests, run info.
// ---------------------------------------------------------------------------

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& columns)
      : f_(path) {
    if (!f_) throw std::runtime_error("cannot write csv: " + path);
    for (size_t i = 0; i < columns.size(); ++i)
      f_ << (i ? "," : "") << columns[i];
    f_ << "\n";
    f_ << std::setprecision(12);
  }

  void row(const std::vector<double>& values) {
    for (size_t i = 0; i < values.size(); ++i)
      f_ << (i ? "," : "") << values[i];
    f_ << "\n";
  }

  void row_mixed(const std::vector<std::string>& values) {
    for (size_t i = 0; i < values.size(); ++i)
      f_ << (i ? "," : "") << values[i];
    f_ << "\n";
  }

 private:
  std::ofstream f_;
};

inline uint64_t file_checksum(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot checksum: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[65536];
  while (f.read(buf, sizeof buf) || f.gcount() > 0)
    h = fnv1a(buf, static_cast<size_t>(f.gcount()), h);
  return h;
}

/// Manifest line per file: name, byte size, fnv1a64 checksum.
inline void write_manifest(const std::vector<std::string>& files,
                           const std::string& dir,
                           const std::string& manifest_name = "manifest.txt") {
  std::ofstream f(dir + "/" + manifest_name);
  if (!f) throw std::runtime_error("cannot write manifest in " + dir);
  for (const std::string& name : files) {
    const std::string full = dir + "/" + name;
    const auto size = std::filesystem::file_size(full);
    f << name << ' ' << size << ' ' << std::hex << std::setw(16)
      << std::setfill('0') << file_checksum(full) << std::dec << "\n";
  }
}

/// Reproducibility stanza written into every CLI output directory.
inline void write_run_info(const std::string& dir, const std::string& command,
                           uint64_t config_hash, uint64_t seed,
                           const std::string& version) {
  std::ofstream f(dir + "/run_info.txt");
  if (!f) throw std::runtime_error("cannot write run info in " + dir);
  f << "command " << command << "\n";
  f << "config_hash " << std::hex << std::setw(16) << std::setfill('0')
    << config_hash << std::dec << "\n";
  f << "seed " << seed << "\n";
  f << "version " << version << "\n";
}

}  // namespace cotrack
