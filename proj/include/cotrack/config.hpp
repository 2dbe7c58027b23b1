#pragma once

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>

#include "cotrack/model.hpp"
#include "cotrack/rng.hpp"
#include "cotrack/scene.hpp"
#include "cotrack/tracker.hpp"
#include "cotrack/training.hpp"

namespace cotrack {

constexpr const char* kVersion = "0.1.0";

/// Flat, commented key=value configuration. Every knob of the pipeline lives
/// here; defaults match the documented training recipe.
struct Config {
  // model
  int d = 32;
  int tau = 4;
  int heads = 4;
  int ffw_mult = 4;
  int block = 8;
  int hidden = 0;
  int n_classes = 3;
  // tracker
  int n_fresh = 50;
  double score_keep = 0.4;
  double match_threshold = 0.5;
  double transmit_threshold = 0.4;
  double gate_radius = 4.0;
  int patience = 5;
  // losses / optimizer
  double lambda_bbx = 0.25;
  double lambda_cls = 2.0;
  double lambda_asso = 10.0;
  double focal_cls_alpha = 0.25;
  double focal_cls_gamma = 2.0;
  double focal_asso_alpha = 0.5;
  double focal_asso_gamma = 1.0;
  double lr = 2e-4;
  double weight_decay = 0.01;
  int epochs_stage1 = 10;
  int epochs_stage2 = 10;
  bool freeze_stage1 = false;
  double gt_gate = 2.0;
  // scenario generation
  double frame_rate = 10.0;
  double duration_s = 8.0;
  int n_objects = 14;
  double world_half = 45.0;
  double static_fraction = 0.0;
  double convoy_fraction = 0.4;
  double turn_prob = 0.35;
  double sigma_pos = 0.5;
  double sigma_dim = 0.05;
  double sigma_yaw = 0.1;
  double sigma_vel = 0.3;
  double sigma_feat = 0.02;
  double miss_rate = 0.1;
  double clutter_rate = 0.1;
  double occlusion_factor = 0.8;
  double gap_strength = 0.35;
  bool identity_domain = false;
  double infra_dist_min = 25.0;
  double infra_dist_max = 45.0;
  double infra_height = 5.0;
  uint64_t domain_seed = 7;
  int n_train_scenarios = 20;
  int n_eval_scenarios = 20;
  // evaluation
  int eval_class = 0;       // -1 evaluates all classes
  double eval_radius = 2.0;
  // seeds
  uint64_t seed = 1;

  ModelConfig model_config() const {
    ModelConfig m;
    m.d = d;
    m.tau = tau;
    m.heads = heads;
    m.ffw_mult = ffw_mult;
    m.block = block;
    m.n_classes = n_classes;
    m.hidden = hidden;
    return m;
  }

  ScenarioSpec scenario_spec() const {
    ScenarioSpec s;
    s.frame_rate = frame_rate;
    s.duration_s = duration_s;
    s.n_objects = n_objects;
    s.world_half = world_half;
    s.static_fraction = static_fraction;
    s.convoy_fraction = convoy_fraction;
    s.turn_prob = turn_prob;
    s.feature_dim = d;
    s.feature_block = block;
    s.domain_seed = domain_seed;
    s.identity_domain = identity_domain;
    s.gap_strength = gap_strength;
    s.sigma_pos = sigma_pos;
    s.sigma_dim = sigma_dim;
    s.sigma_yaw = sigma_yaw;
    s.sigma_vel = sigma_vel;
    s.sigma_feat = sigma_feat;
    s.miss_rate = miss_rate;
    s.clutter_rate = clutter_rate;
    s.occlusion_factor = occlusion_factor;
    s.infra_dist_min = infra_dist_min;
    s.infra_dist_max = infra_dist_max;
    s.infra_height = infra_height;
    return s;
  }

  TrainParams train_params(int stage) const {
    TrainParams tp;
    tp.epochs = stage == 1 ? epochs_stage1 : epochs_stage2;
    tp.base_lr = lr;
    tp.weight_decay = weight_decay;
    tp.weights.bbx = lambda_bbx;
    tp.weights.cls = lambda_cls;
    tp.weights.asso = lambda_asso;
    tp.weights.cls_alpha = focal_cls_alpha;
    tp.weights.cls_gamma = focal_cls_gamma;
    tp.weights.asso_alpha = focal_asso_alpha;
    tp.weights.asso_gamma = focal_asso_gamma;
    tp.gate_radius = gate_radius;
    tp.gt_gate = gt_gate;
    tp.n_fresh = n_fresh;
    tp.score_keep = score_keep;
    tp.patience = patience;
    tp.transmit_threshold = transmit_threshold;
    tp.match_threshold = match_threshold;
    tp.freeze_stage1 = freeze_stage1;
    tp.seed = seed;
    return tp;
  }

  RunOptions run_options(Mode mode) const {
    RunOptions ro;
    ro.mode = mode;
    ro.n_fresh = n_fresh;
    ro.gate_radius = gate_radius;
    ro.score_keep = score_keep;
    ro.match_threshold = match_threshold;
    ro.transmit_threshold = transmit_threshold;
    ro.patience = patience;
    return ro;
  }

  void validate() const {
    if (d <= 0 || d % block != 0 || d % heads != 0)
      throw std::invalid_argument("config: d must divide by block and heads");
    if (tau < 0) throw std::invalid_argument("config: tau < 0");
    if (n_fresh < 0) throw std::invalid_argument("config: n_fresh < 0");
    if (score_keep < 0 || score_keep > 1 || match_threshold < 0 ||
        match_threshold > 1)
      throw std::invalid_argument("config: thresholds outside [0,1]");
    if (lr <= 0 || epochs_stage1 <= 0 || epochs_stage2 <= 0)
      throw std::invalid_argument("config: bad optimizer settings");
    if (frame_rate <= 0 || duration_s <= 0)
      throw std::invalid_argument("config: bad scenario timing");
    if (n_train_scenarios <= 0 || n_eval_scenarios <= 0)
      throw std::invalid_argument("config: scenario counts must be positive");
    scenario_spec().validate();
    model_config().validate();
  }
};

namespace detail {

template <typename F>
void config_fields(Config& c, F&& field) {
  field("d", c.d, "instance feature dimension");
  field("tau", c.tau, "temporal history length (frames)");
  field("heads", c.heads, "temporal attention heads");
  field("ffw_mult", c.ffw_mult, "temporal feed-forward width multiplier");
  field("block", c.block, "latent alignment block size");
  field("hidden", c.hidden, "MLP hidden width (0 = feature dim)");
  field("n_classes", c.n_classes, "object classes");
  field("n_fresh", c.n_fresh, "fresh queries per frame");
  field("score_keep", c.score_keep, "track keep/spawn score threshold");
  field("match_threshold", c.match_threshold, "association affinity threshold");
  field("transmit_threshold", c.transmit_threshold,
        "sender-side transmit score threshold");
  field("gate_radius", c.gate_radius, "decoder binding gate (m)");
  field("patience", c.patience, "frames a track survives below threshold");
  field("lambda_bbx", c.lambda_bbx, "box loss weight");
  field("lambda_cls", c.lambda_cls, "classification loss weight");
  field("lambda_asso", c.lambda_asso, "association loss weight");
  field("focal_cls_alpha", c.focal_cls_alpha, "classification focal alpha");
  field("focal_cls_gamma", c.focal_cls_gamma, "classification focal gamma");
  field("focal_asso_alpha", c.focal_asso_alpha, "association focal alpha");
  field("focal_asso_gamma", c.focal_asso_gamma, "association focal gamma");
  field("lr", c.lr, "base learning rate (cosine annealed)");
  field("weight_decay", c.weight_decay, "decoupled weight decay");
  field("epochs_stage1", c.epochs_stage1, "stage-1 epochs");
  field("epochs_stage2", c.epochs_stage2, "stage-2 epochs");
  field("freeze_stage1", c.freeze_stage1, "freeze agent weights in stage 2");
  field("gt_gate", c.gt_gate, "supervision matching gate (m)");
  field("frame_rate", c.frame_rate, "scenario frame rate (Hz)");
  field("duration_s", c.duration_s, "scenario duration (s)");
  field("n_objects", c.n_objects, "concurrent objects per scenario");
  field("world_half", c.world_half, "object spawn half extent (m)");
  field("static_fraction", c.static_fraction, "fraction of parked objects");
  field("convoy_fraction", c.convoy_fraction, "fraction spawned in convoys");
  field("turn_prob", c.turn_prob, "probability a motion segment turns");
  field("sigma_pos", c.sigma_pos, "detection position noise (m)");
  field("sigma_dim", c.sigma_dim, "detection log-dimension noise");
  field("sigma_yaw", c.sigma_yaw, "detection yaw noise (rad)");
  field("sigma_vel", c.sigma_vel, "detection velocity noise (m/s)");
  field("sigma_feat", c.sigma_feat, "latent feature noise");
  field("miss_rate", c.miss_rate, "per-object miss probability");
  field("clutter_rate", c.clutter_rate, "expected clutter per frame");
  field("occlusion_factor", c.occlusion_factor,
        "angular-overlap occlusion strictness");
  field("gap_strength", c.gap_strength, "cross-agent domain gap strength");
  field("identity_domain", c.identity_domain, "disable the domain gap");
  field("infra_dist_min", c.infra_dist_min, "infrastructure mount min (m)");
  field("infra_dist_max", c.infra_dist_max, "infrastructure mount max (m)");
  field("infra_height", c.infra_height, "infrastructure mount height (m)");
  field("domain_seed", c.domain_seed, "embedding/domain operator seed");
  field("n_train_scenarios", c.n_train_scenarios, "training scenarios");
  field("n_eval_scenarios", c.n_eval_scenarios, "evaluation scenarios");
  field("eval_class", c.eval_class, "evaluated class id (-1 = all)");
  field("eval_radius", c.eval_radius, "tracking match radius (m)");
  field("seed", c.seed, "master seed");
}

inline std::string format_value(int v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(uint64_t v) { return std::to_string(v); }
inline std::string format_value(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline void parse_value(const std::string& s, int& v) { v = std::stoi(s); }
inline void parse_value(const std::string& s, double& v) { v = std::stod(s); }
inline void parse_value(const std::string& s, uint64_t& v) {
  v = std::stoull(s);
}
inline void parse_value(const std::string& s, bool& v) {
  if (s == "true" || s == "1")
    v = true;
  else if (s == "false" || s == "0")
    v = false;
  else
    throw std::invalid_argument("config: bad boolean '" + s + "'");
}

}  // namespace detail

inline std::string config_emit(const Config& c_in) {
  Config c = c_in;
  std::ostringstream out;
  out << "# cotrack configuration\n";
  detail::config_fields(c, [&](const char* key, auto& value,
                               const char* comment) {
    out << key << " = " << detail::format_value(value) << "  # " << comment
        << "\n";
  });
  return out.str();
}

inline Config config_parse_text(const std::string& text) {
  Config c;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = true;
      for (char ch : line)
        if (!isspace(static_cast<unsigned char>(ch))) blank = false;
      if (blank) continue;
      throw std::invalid_argument("config: malformed line " +
                                  std::to_string(lineno));
    }
    auto trim = [](std::string s) {
      const size_t a = s.find_first_not_of(" \t\r");
      const size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  std::map<std::string, bool> known;
  detail::config_fields(c, [&](const char* key, auto& value, const char*) {
    known[key] = true;
    auto it = kv.find(key);
    if (it != kv.end()) detail::parse_value(it->second, value);
  });
  for (auto& [key, _] : kv)
    if (!known.count(key))
      throw std::invalid_argument("config: unknown key '" + key + "'");
  return c;
}

inline Config config_load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return config_parse_text(ss.str());
}

inline void config_save(const Config& c, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config: " + path);
  f << config_emit(c);
}

inline uint64_t config_hash(const Config& c) { return fnv1a(config_emit(c)); }

/// The benchmark configuration used by the acceptance experiments: the
/// defaults above with a desk-scale query budget and shorter schedules.
inline Config benchmark_config() {
  Config c;
  c.n_fresh = 24;
  c.epochs_stage1 = 8;
  c.epochs_stage2 = 8;
  return c;
}

}  // namespace cotrack
