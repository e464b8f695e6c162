#pragma once

#include "amodal/synth.hpp"

#include <algorithm>
#include <iostream>
#include <map>
#include <optional>
#include <vector>

namespace amodal::metrics {

// |a n b| / |a u b|, defined as 1 when both masks are empty.
inline double iou(const BinaryMask& a, const BinaryMask& b) {
  if (a.height() != b.height() || a.width() != b.width())
    throw ValidationError("iou: dimension mismatch");
  const std::int64_t inter = mask_and(a, b).area();
  const std::int64_t uni = mask_or(a, b).area();
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// IoU restricted to the occluded region: GT visible pixels are removed from
// both masks before comparing, so completion quality is measured directly.
inline double occluded_iou(const BinaryMask& pred_amodal, const synth::AmodalInstance& gt) {
  if (!contains(gt.amodal, gt.visible))
    throw ValidationError("occluded_iou: gt visible not contained in gt amodal");
  return iou(mask_diff(pred_amodal, gt.visible), mask_diff(gt.amodal, gt.visible));
}

using OcclusionWindow = std::optional<std::pair<double, double>>;

inline bool in_window(double rate, const OcclusionWindow& window) {
  return !window || (rate >= window->first && rate <= window->second);
}

// Mean IoU over instances, optionally restricted to an occlusion-rate window.
inline double miou_full(const std::vector<BinaryMask>& preds,
                        const std::vector<synth::AmodalInstance>& gts,
                        const OcclusionWindow& window = std::nullopt) {
  if (preds.size() != gts.size()) throw ValidationError("miou_full: list size mismatch");
  double sum = 0.0;
  int count = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (!in_window(gts[i].occlusion_rate, window)) continue;
    sum += iou(preds[i], gts[i].amodal);
    ++count;
  }
  if (count == 0) throw ValidationError("miou_full: no instances selected");
  return sum / count;
}

// Mean occluded IoU; instances whose GT occluded region is empty are excluded
// from the average.
inline double miou_occ(const std::vector<BinaryMask>& preds,
                       const std::vector<synth::AmodalInstance>& gts,
                       const OcclusionWindow& window = std::nullopt) {
  if (preds.size() != gts.size()) throw ValidationError("miou_occ: list size mismatch");
  double sum = 0.0;
  int count = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (!in_window(gts[i].occlusion_rate, window)) continue;
    if (mask_diff(gts[i].amodal, gts[i].visible).area() == 0) continue;
    sum += occluded_iou(preds[i], gts[i]);
    ++count;
  }
  if (count == 0) throw ValidationError("miou_occ: no instances selected");
  return sum / count;
}

struct EvalRecord {
  BinaryMask prediction;  // thresholded amodal estimate
  double score = 0.0;     // detection confidence
  synth::AmodalInstance gt;

  void validate() const {
    if (prediction.height() != gt.amodal.height() || prediction.width() != gt.amodal.width())
      throw ValidationError("EvalRecord: prediction dims do not match gt");
  }
};

struct ApResult {
  double ap = 0.0;    // mean over IoU thresholds 0.50:0.05:0.95
  double ap50 = 0.0;
  double ap75 = 0.0;
  double ar = 0.0;    // mean recall over the same thresholds
};

inline std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 50; i <= 95; i += 5) t.push_back(i / 100.0);
  return t;
}

namespace detail {

// all-point interpolated area under the precision-recall curve
inline double pr_area(const std::vector<bool>& tp_flags, int total_gt) {
  if (total_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (bool is_tp : tp_flags) {
    is_tp ? ++tp : ++fp;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / total_gt);
  }
  // make precision monotone from the right, then integrate over recall steps
  for (int i = static_cast<int>(precision.size()) - 2; i >= 0; --i)
    precision[i] = std::max(precision[i], precision[i + 1]);
  double area = 0.0, prev_recall = 0.0;
  for (size_t i = 0; i < recall.size(); ++i) {
    area += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return area;
}

}  // namespace detail

// Greedy matching by descending score: each detection takes the unmatched GT in
// its image with the highest IoU >= threshold (ties to the lower GT index);
// each GT is matched at most once. AP is the interpolated PR area averaged over
// thresholds 0.50:0.05:0.95; AR the mean recall over the same thresholds with
// up to max_detections scored per image.
inline ApResult average_precision(const std::vector<EvalRecord>& records,
                                  int max_detections = 100) {
  ApResult out;
  if (records.empty()) {
    std::cerr << "average_precision: empty record set, AP defined as 0\n";
    return out;
  }
  for (const auto& r : records) r.validate();

  // detections ordered by descending score, stable on input order
  std::vector<int> order(records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return records[a].score > records[b].score; });

  // per-image detection rank for the max_detections cut
  std::map<std::string, int> seen_per_image;
  std::vector<bool> within_cap(records.size(), true);
  for (int idx : order) {
    int& n = seen_per_image[records[idx].gt.image_id];
    within_cap[idx] = n < max_detections;
    ++n;
  }

  // group GT instances by image; each record contributes its own gt
  std::map<std::string, std::vector<int>> gts_by_image;
  for (size_t i = 0; i < records.size(); ++i)
    gts_by_image[records[i].gt.image_id].push_back(static_cast<int>(i));
  const int total_gt = static_cast<int>(records.size());

  const auto thresholds = coco_thresholds();
  double ap_sum = 0.0, ar_sum = 0.0;
  for (size_t ti = 0; ti < thresholds.size(); ++ti) {
    const double thr = thresholds[ti];
    std::map<std::string, std::vector<bool>> gt_used;
    for (auto& [img, idxs] : gts_by_image) gt_used[img] = std::vector<bool>(idxs.size(), false);
    std::vector<bool> tp_flags;
    int matched = 0;
    for (int idx : order) {
      if (!within_cap[idx]) continue;
      const auto& rec = records[idx];
      const auto& gt_idxs = gts_by_image[rec.gt.image_id];
      auto& used = gt_used[rec.gt.image_id];
      int best = -1;
      double best_iou = 0.0;
      for (size_t g = 0; g < gt_idxs.size(); ++g) {
        if (used[g]) continue;
        const double v = iou(rec.prediction, records[gt_idxs[g]].gt.amodal);
        if (v >= thr && v > best_iou) {
          best_iou = v;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        used[best] = true;
        tp_flags.push_back(true);
        ++matched;
      } else {
        tp_flags.push_back(false);
      }
    }
    const double ap_t = detail::pr_area(tp_flags, total_gt);
    const double ar_t = static_cast<double>(matched) / total_gt;
    ap_sum += ap_t;
    ar_sum += ar_t;
    if (ti == 0) out.ap50 = ap_t;
    if (thresholds[ti] == 0.75) out.ap75 = ap_t;
  }
  out.ap = ap_sum / thresholds.size();
  out.ar = ar_sum / thresholds.size();
  return out;
}

}  // namespace amodal::metrics
