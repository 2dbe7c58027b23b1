#pragma once

#include <algorithm>
#include <map>
#include <unordered_map>
#include <vector>

#include "cotrack/geometry.hpp"
#include "cotrack/hungarian.hpp"

namespace cotrack {

/// One evaluated box (prediction or ground truth) in the vehicle frame.
struct EvalBox {
  int frame = 0;
  int64_t id = -1;
  Box3D box;
};

struct FrameMatchResult {
  std::vector<std::pair<int, int>> tp;  // (pred index, gt index)
  std::vector<int> fp;                  // unmatched pred indices
  std::vector<int> fn;                  // unmatched gt indices
};

/// Greedy score-ordered matching within a 2D center-distance radius; each
/// ground truth claims at most one prediction.
inline FrameMatchResult match_frame(const std::vector<EvalBox>& preds,
                                    const std::vector<EvalBox>& gts,
                                    double radius) {
  FrameMatchResult out;
  std::vector<int> order(preds.size());
  for (size_t i = 0; i < preds.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return preds[a].box.score > preds[b].box.score;
  });
  std::vector<bool> gt_used(gts.size(), false);
  for (int pi : order) {
    int best = -1;
    double best_d = radius;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (gt_used[g]) continue;
      const double d = preds[pi].box.center_dist_2d(gts[g].box);
      if (d <= best_d) {
        best_d = d;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      gt_used[best] = true;
      out.tp.emplace_back(pi, best);
    } else {
      out.fp.push_back(pi);
    }
  }
  for (size_t g = 0; g < gts.size(); ++g)
    if (!gt_used[g]) out.fn.push_back(static_cast<int>(g));
  return out;
}

// ---------------------------------------------------------------------------
// CLEAR-MOT accounting at a fixed score threshold.
// ---------------------------------------------------------------------------

struct MotCounts {
  int64_t tp = 0, fp = 0, fn = 0, ids = 0;
  double dist_sum = 0.0;
  std::unordered_map<int64_t, int> gt_matched_frames;
};

/// Frame-sequential accounting with identity continuity: a ground truth stays
/// with its previously assigned prediction id while that id remains within
/// the radius; remaining pairs match by Hungarian on center distance. An
/// identity switch is counted when a ground truth's assigned id changes.
inline MotCounts clear_mot(const std::map<int, std::vector<EvalBox>>& preds,
                           const std::map<int, std::vector<EvalBox>>& gts,
                           double radius, double score_threshold) {
  MotCounts out;
  std::unordered_map<int64_t, int64_t> last_id;  // gt id -> pred id
  std::vector<int> frames;
  for (const auto& [f, _] : gts) frames.push_back(f);
  for (const auto& [f, _] : preds)
    if (!gts.count(f)) frames.push_back(f);
  std::sort(frames.begin(), frames.end());

  for (int f : frames) {
    static const std::vector<EvalBox> kEmpty;
    const std::vector<EvalBox>& gt_f = gts.count(f) ? gts.at(f) : kEmpty;
    std::vector<EvalBox> pr_f;
    if (preds.count(f))
      for (const EvalBox& p : preds.at(f))
        if (p.box.score >= score_threshold) pr_f.push_back(p);

    std::vector<bool> pred_used(pr_f.size(), false);
    std::vector<bool> gt_done(gt_f.size(), false);
    std::vector<std::pair<int, int>> matches;  // (gt idx, pred idx)

    // continuity pass
    for (size_t g = 0; g < gt_f.size(); ++g) {
      auto it = last_id.find(gt_f[g].id);
      if (it == last_id.end()) continue;
      for (size_t p = 0; p < pr_f.size(); ++p) {
        if (pred_used[p] || pr_f[p].id != it->second) continue;
        if (gt_f[g].box.center_dist_2d(pr_f[p].box) <= radius) {
          matches.emplace_back(static_cast<int>(g), static_cast<int>(p));
          pred_used[p] = true;
          gt_done[g] = true;
        }
        break;
      }
    }
    // Hungarian on the remainder
    std::vector<int> free_g, free_p;
    for (size_t g = 0; g < gt_f.size(); ++g)
      if (!gt_done[g]) free_g.push_back(static_cast<int>(g));
    for (size_t p = 0; p < pr_f.size(); ++p)
      if (!pred_used[p]) free_p.push_back(static_cast<int>(p));
    if (!free_g.empty() && !free_p.empty()) {
      const double kBig = 1e9;
      Matrix cost(static_cast<int>(free_g.size()),
                  static_cast<int>(free_p.size()));
      for (int a = 0; a < cost.rows; ++a)
        for (int b = 0; b < cost.cols; ++b) {
          const double d =
              gt_f[free_g[a]].box.center_dist_2d(pr_f[free_p[b]].box);
          cost.at(a, b) = d <= radius ? d : kBig;
        }
      for (auto [a, b] : hungarian(cost).pairs)
        if (cost.at(a, b) < kBig)
          matches.emplace_back(free_g[a], free_p[b]);
    }

    for (auto [g, p] : matches) {
      ++out.tp;
      out.dist_sum += gt_f[g].box.center_dist_2d(pr_f[p].box);
      ++out.gt_matched_frames[gt_f[g].id];
      auto it = last_id.find(gt_f[g].id);
      if (it != last_id.end() && it->second != pr_f[p].id) ++out.ids;
      last_id[gt_f[g].id] = pr_f[p].id;
    }
    out.fn += static_cast<int64_t>(gt_f.size()) - matches.size();
    out.fp += static_cast<int64_t>(pr_f.size()) - matches.size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// AMOTA over 40 recall thresholds.
// ---------------------------------------------------------------------------

struct TrackingMetrics {
  double amota = 0.0;      // per-threshold values clamped to [0,1]
  double amota_raw = 0.0;  // same protocol without the lower clamp
  double amotp = 0.0;
  double best_mota = 0.0;
  double max_recall = 0.0;
  int64_t ids = 0;
  int mt = 0, ml = 0;
  int64_t gt_count = 0;
  bool valid = false;  // false when there is no ground truth
};

/// Tracking evaluation following the 40-recall-point averaged-MOTA protocol:
/// for each recall target the score threshold is the highest reaching it;
/// MOTAR(r) = 1 - (FP+FN+IDS - (1-r)P) / (rP), clamped; IDS/MT/ML are
/// reported at the threshold maximizing plain MOTA (ties: lower threshold).
inline TrackingMetrics amota_eval(const std::vector<EvalBox>& pred_boxes,
                                  const std::vector<EvalBox>& gt_boxes,
                                  double radius = 2.0) {
  TrackingMetrics out;
  std::map<int, std::vector<EvalBox>> preds, gts;
  for (const EvalBox& b : pred_boxes) preds[b.frame].push_back(b);
  for (const EvalBox& b : gt_boxes) gts[b.frame].push_back(b);
  const int64_t P = static_cast<int64_t>(gt_boxes.size());
  out.gt_count = P;
  if (P == 0) return out;
  out.valid = true;

  // detection-style recall curve over the global score ordering
  std::vector<double> scores;
  {
    std::vector<const EvalBox*> all;
    for (const EvalBox& b : pred_boxes) all.push_back(&b);
    std::stable_sort(all.begin(), all.end(),
                     [](const EvalBox* a, const EvalBox* b) {
                       return a->box.score > b->box.score;
                     });
    std::map<int, std::vector<bool>> gt_taken;
    for (auto& [f, v] : gts) gt_taken[f].assign(v.size(), false);
    int64_t tp = 0;
    for (const EvalBox* p : all) {
      double best_d = radius;
      int best_g = -1;
      if (gts.count(p->frame)) {
        const auto& gt_f = gts[p->frame];
        auto& taken = gt_taken[p->frame];
        for (size_t g = 0; g < gt_f.size(); ++g) {
          if (taken[g]) continue;
          const double d = p->box.center_dist_2d(gt_f[g].box);
          if (d <= best_d) {
            best_d = d;
            best_g = static_cast<int>(g);
          }
        }
      }
      if (best_g >= 0) {
        gt_taken[p->frame][best_g] = true;
        ++tp;
        scores.push_back(p->box.score);  // score reaching recall tp/P
      }
    }
    out.max_recall = static_cast<double>(tp) / static_cast<double>(P);
  }

  const int kRecallPoints = 40;
  double amota_sum = 0.0, amota_raw_sum = 0.0;
  double amotp_sum = 0.0;
  int amotp_terms = 0;
  double best_mota = -1e18;
  int64_t best_ids = 0;
  int best_mt = 0, best_ml = 0;
  std::unordered_map<double, MotCounts> cache;

  // per-gt-track frame counts for MT/ML
  std::unordered_map<int64_t, int> gt_frames;
  for (const EvalBox& b : gt_boxes) ++gt_frames[b.id];

  for (int i = 1; i <= kRecallPoints; ++i) {
    const double r = static_cast<double>(i) / kRecallPoints;
    const int64_t needed = static_cast<int64_t>(
        std::ceil(r * static_cast<double>(P) - 1e-9));
    if (needed > static_cast<int64_t>(scores.size())) continue;  // MOTAR 0
    const double threshold = scores[needed - 1];
    MotCounts mc;
    auto it = cache.find(threshold);
    if (it != cache.end()) {
      mc = it->second;
    } else {
      mc = clear_mot(preds, gts, radius, threshold);
      cache[threshold] = mc;
    }
    const double err = static_cast<double>(mc.fp + mc.fn + mc.ids);
    const double motar_raw =
        1.0 - (err - (1.0 - r) * P) / (r * static_cast<double>(P));
    amota_raw_sum += std::min(motar_raw, 1.0);
    amota_sum += std::clamp(motar_raw, 0.0, 1.0);
    if (mc.tp > 0) {
      amotp_sum += mc.dist_sum / static_cast<double>(mc.tp);
      ++amotp_terms;
    }
    const double mota = 1.0 - err / static_cast<double>(P);
    if (mota > best_mota) {
      best_mota = mota;
      best_ids = mc.ids;
      best_mt = 0;
      best_ml = 0;
      for (auto& [id, alive] : gt_frames) {
        const double cov =
            static_cast<double>(mc.gt_matched_frames.count(id)
                                    ? mc.gt_matched_frames.at(id)
                                    : 0) /
            alive;
        if (cov > 0.8) ++best_mt;
        if (cov < 0.2) ++best_ml;
      }
    }
  }
  out.amota = amota_sum / kRecallPoints;
  out.amota_raw = amota_raw_sum / kRecallPoints;
  out.amotp = amotp_terms > 0 ? amotp_sum / amotp_terms : 0.0;
  if (best_mota < -1e17) {
    // no reachable threshold at all: everything lost
    out.best_mota = 0.0;
    out.ml = static_cast<int>(gt_frames.size());
  } else {
    out.best_mota = best_mota;
    out.ids = best_ids;
    out.mt = best_mt;
    out.ml = best_ml;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Detection AP and true-positive error metrics.
// ---------------------------------------------------------------------------

struct DetectionMetrics {
  double map = 0.0;
  std::vector<double> ap_per_threshold;
  double ate = 0.0, ase = 0.0, aoe = 0.0, ave = 0.0;
  bool valid = false;
};

namespace detail {

inline double aligned_iou_3d(const Box3D& a, const Box3D& b) {
  const double inter = std::min(a.w, b.w) * std::min(a.l, b.l) *
                       std::min(a.h, b.h);
  const double uni = a.w * a.l * a.h + b.w * b.l * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

/// Average precision with 101-point interpolation, recall/precision floors of
/// 0.1, linear interpolation between sweep points and zero beyond max recall.
inline double average_precision(const std::vector<double>& rec,
                                const std::vector<double>& prec) {
  if (rec.empty()) return 0.0;
  // dedupe equal recalls keeping the final precision at that recall
  std::vector<double> xr, xp;
  for (size_t i = 0; i < rec.size(); ++i) {
    if (!xr.empty() && rec[i] == xr.back()) {
      xp.back() = prec[i];
    } else {
      xr.push_back(rec[i]);
      xp.push_back(prec[i]);
    }
  }
  double sum = 0.0;
  for (int g = 11; g <= 100; ++g) {
    const double r = g / 100.0;
    double p;
    if (r > xr.back() + 1e-12) {
      p = 0.0;
    } else if (r <= xr.front()) {
      p = xp.front();
    } else {
      size_t hi = std::lower_bound(xr.begin(), xr.end(), r) - xr.begin();
      const double x0 = xr[hi - 1], x1 = xr[hi];
      const double y0 = xp[hi - 1], y1 = xp[hi];
      p = x1 > x0 ? y0 + (y1 - y0) * (r - x0) / (x1 - x0) : y1;
    }
    sum += std::max(0.0, p - 0.1);
  }
  return sum / 90.0 / 0.9;
}

}  // namespace detail

/// Detection metrics over matching thresholds {0.5, 1, 2, 4} m with TP error
/// means (translation, scale, orientation, velocity) taken at the 2 m
/// threshold.
inline DetectionMetrics map_detection(const std::vector<EvalBox>& pred_boxes,
                                      const std::vector<EvalBox>& gt_boxes) {
  DetectionMetrics out;
  const int64_t P = static_cast<int64_t>(gt_boxes.size());
  if (P == 0) return out;
  out.valid = true;

  std::map<int, std::vector<EvalBox>> gts;
  for (const EvalBox& b : gt_boxes) gts[b.frame].push_back(b);
  std::vector<const EvalBox*> all;
  for (const EvalBox& b : pred_boxes) all.push_back(&b);
  std::stable_sort(all.begin(), all.end(),
                   [](const EvalBox* a, const EvalBox* b) {
                     return a->box.score > b->box.score;
                   });

  const std::vector<double> thresholds{0.5, 1.0, 2.0, 4.0};
  for (double thr : thresholds) {
    std::map<int, std::vector<bool>> taken;
    for (auto& [f, v] : gts) taken[f].assign(v.size(), false);
    std::vector<double> rec, prec;
    int64_t tp = 0, fp = 0;
    double ate = 0, ase = 0, aoe = 0, ave = 0;
    for (const EvalBox* p : all) {
      int best_g = -1;
      double best_d = thr;
      if (gts.count(p->frame)) {
        const auto& gt_f = gts[p->frame];
        auto& tk = taken[p->frame];
        for (size_t g = 0; g < gt_f.size(); ++g) {
          if (tk[g]) continue;
          const double d = p->box.center_dist_2d(gt_f[g].box);
          if (d <= best_d) {
            best_d = d;
            best_g = static_cast<int>(g);
          }
        }
      }
      if (best_g >= 0) {
        taken[p->frame][best_g] = true;
        ++tp;
        const Box3D& g = gts[p->frame][best_g].box;
        ate += best_d;
        ase += 1.0 - detail::aligned_iou_3d(p->box, g);
        aoe += std::abs(wrap_angle(p->box.theta - g.theta));
        ave += std::hypot(p->box.vx - g.vx, p->box.vy - g.vy);
      } else {
        ++fp;
      }
      rec.push_back(static_cast<double>(tp) / static_cast<double>(P));
      prec.push_back(static_cast<double>(tp) /
                     static_cast<double>(tp + fp));
    }
    out.ap_per_threshold.push_back(detail::average_precision(rec, prec));
    if (thr == 2.0 && tp > 0) {
      out.ate = ate / tp;
      out.ase = ase / tp;
      out.aoe = aoe / tp;
      out.ave = ave / tp;
    }
  }
  for (double ap : out.ap_per_threshold) out.map += ap;
  out.map /= out.ap_per_threshold.size();
  return out;
}

/// Mean message bytes per frame times the frame rate.
inline double transmission_bps(const std::vector<size_t>& bytes_per_frame,
                               double frame_rate) {
  if (bytes_per_frame.empty()) return 0.0;
  double mean = 0.0;
  for (size_t b : bytes_per_frame) mean += static_cast<double>(b);
  mean /= static_cast<double>(bytes_per_frame.size());
  return mean * frame_rate;
}

/// Full per-run report.
struct MetricReport {
  TrackingMetrics tracking;
  DetectionMetrics detection;
  double bps = 0.0;
  double assoc_precision = -1.0, assoc_recall = -1.0, assoc_f1 = -1.0;
};

}  // namespace cotrack
