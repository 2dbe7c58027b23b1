#pragma once

#include <string>

#include "cotrack/nn.hpp"
#include "cotrack/params.hpp"

namespace cotrack {

struct ModelConfig {
  int d = 32;          // instance feature dimension
  int tau = 4;         // history window length
  int heads = 4;       // temporal attention heads
  int ffw_mult = 4;    // temporal feed-forward width multiplier
  int block = 8;       // latent alignment block size
  int n_classes = 3;
  int hidden = 0;      // MLP hidden width; 0 means use d

  int hidden_width() const { return hidden > 0 ? hidden : d; }

  void validate() const {
    if (d <= 0 || d % heads != 0)
      throw std::invalid_argument("ModelConfig: d must divide by heads");
    if (d % block != 0)
      throw std::invalid_argument("ModelConfig: d must divide by block");
    if (tau < 0) throw std::invalid_argument("ModelConfig: negative tau");
  }
};

/// One transformer decoder layer over per-instance temporal context:
/// self-attention across the frame's instances, cross-attention into each
/// instance's own history, position-wise feed-forward; residuals throughout.
/// Output projections start at zero so the block begins as an identity map.
struct TemporalLayer {
  MultiHeadAttention self_attn;
  MultiHeadAttention cross_attn;
  Mlp ffn;

  void init(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
            Rng& rng) {
    self_attn.init(ps, prefix + ".self", cfg.d, cfg.heads, rng);
    cross_attn.init(ps, prefix + ".cross", cfg.d, cfg.heads, rng);
    ffn.init(ps, prefix + ".ffn", {cfg.d, cfg.d * cfg.ffw_mult, cfg.d}, rng,
             /*zero_last=*/true);
  }
};

struct TemporalBlock {
  TemporalLayer layers[2];

  void init(ParamStore& ps, const std::string& prefix, const ModelConfig& cfg,
            Rng& rng) {
    layers[0].init(ps, prefix + ".l0", cfg, rng);
    layers[1].init(ps, prefix + ".l1", cfg, rng);
  }
};

/// Per-agent tracking model: decoder-emulation mixing layer, semantic and
/// motion heads, temporal enhancement for each feature kind, box regression
/// and classification heads, and the learned fresh-query feature.
struct AgentModel {
  ModelConfig cfg;
  std::string prefix;
  int query_init = -1;
  int mix_w = -1, mix_b = -1;
  Mlp semantic;       // 2-layer
  Mlp motion;         // 4-layer point MLP, max-pooled over corners
  TemporalBlock temporal_m;
  TemporalBlock temporal_s;
  Mlp reg_head;       // d -> hidden -> 10
  Mlp cls_head;       // d -> hidden -> n_classes

  void init(ParamStore& ps, const std::string& name, const ModelConfig& c,
            Rng& rng) {
    cfg = c;
    cfg.validate();
    prefix = name;
    const int d = cfg.d;
    const int h = cfg.hidden_width();
    query_init = ps.create(prefix + ".query_init", 1, d, Init::Xavier, rng);
    mix_w = ps.create(prefix + ".mix.w", d, 2 * d, Init::Zero, rng);
    mix_b = ps.create(prefix + ".mix.b", 1, d, Init::Zero, rng);
    // start as a weighted pass-through of query and detection features
    Param& mw = ps.at(mix_w);
    for (int i = 0; i < d; ++i) {
      mw.value.at(i, i) = 0.3;
      mw.value.at(i, d + i) = 0.7;
    }
    for (double& x : mw.value.data) x += 0.02 * rng.normal();
    semantic.init(ps, prefix + ".sem", {d, h, d}, rng);
    motion.init(ps, prefix + ".motion", {3, h, h, h, d}, rng);
    temporal_m.init(ps, prefix + ".tm", cfg, rng);
    temporal_s.init(ps, prefix + ".ts", cfg, rng);
    reg_head.init(ps, prefix + ".reg", {d, h, 10}, rng, /*zero_last=*/true);
    cls_head.init(ps, prefix + ".cls", {d, h, cfg.n_classes}, rng,
                  /*zero_last=*/true, /*last_bias=*/-2.197);
  }
};

/// Cross-agent modules: pose-conditioned latent alignment, graph-attention
/// association, and the gated fusion used at aggregation time.
struct CoopModel {
  ModelConfig cfg;
  Mlp caa_rot_m, caa_trans_m;  // pose code (9) -> block entries / offset
  Mlp caa_rot_s, caa_trans_s;
  Mlp node_mlp;                // [M|S] (2d) -> d
  Mlp edge_mlp;                // |dp| (3) -> d
  int wv = -1, wi = -1, we = -1;
  Mlp gba_ffn;                 // [logit | edge proj] (1+d) -> 1
  Mlp gate_m, gate_s;          // [f_v | f_i] (2d) -> d, sigmoid outside

  void init(ParamStore& ps, const ModelConfig& c, Rng& rng,
            const std::string& prefix = "coop") {
    cfg = c;
    cfg.validate();
    const int d = cfg.d;
    const int h = cfg.hidden_width();
    const int blocks = d / cfg.block;
    const int rot_out = blocks * cfg.block * cfg.block;
    caa_rot_m.init(ps, prefix + ".caa.m.rot", {9, h, rot_out}, rng,
                   /*zero_last=*/true);
    caa_trans_m.init(ps, prefix + ".caa.m.trans", {9, h, d}, rng,
                     /*zero_last=*/true);
    caa_rot_s.init(ps, prefix + ".caa.s.rot", {9, h, rot_out}, rng,
                   /*zero_last=*/true);
    caa_trans_s.init(ps, prefix + ".caa.s.trans", {9, h, d}, rng,
                     /*zero_last=*/true);
    node_mlp.init(ps, prefix + ".node", {2 * d, h, d}, rng);
    edge_mlp.init(ps, prefix + ".edge", {3, h, d}, rng);
    wv = ps.create(prefix + ".wv", d, d, Init::Xavier, rng);
    wi = ps.create(prefix + ".wi", d, d, Init::Xavier, rng);
    we = ps.create(prefix + ".we", d, d, Init::Xavier, rng);
    // affinity starts low so early training behaves like no-fusion
    gba_ffn.init(ps, prefix + ".ffn", {1 + d, h, 1}, rng, /*zero_last=*/true,
                 /*last_bias=*/-2.0);
    gate_m.init(ps, prefix + ".gate.m", {2 * d, h, d}, rng, /*zero_last=*/true);
    gate_s.init(ps, prefix + ".gate.s", {2 * d, h, d}, rng, /*zero_last=*/true);
  }
};

}  // namespace cotrack
