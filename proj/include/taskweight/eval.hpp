// Scene and event metrics: micro/macro F-scores, per-class recall and
// F-scores, confusion counts. Event scoring is frame-based at the feature
// hop.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "taskweight/common.hpp"
#include "taskweight/features.hpp"
#include "taskweight/model.hpp"
#include "taskweight/tensor.hpp"

namespace taskweight {

struct SceneMetrics {
  double micro_f = 0.0;  // equals accuracy for single-label classification
  double macro_f = 0.0;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_f;
  std::vector<std::vector<std::size_t>> confusion;  // [reference][prediction]
};

struct EventClassCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

struct EventMetrics {
  double micro_f = 0.0;
  double macro_f = 0.0;
  std::vector<EventClassCounts> counts;
  std::vector<double> per_class_f;
};

struct MetricsReport {
  SceneMetrics scene;
  EventMetrics event;
};

// Entry 1 iff posterior > threshold (strict).
inline Tensor binarize_event_roll(const Tensor& posteriors, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ValidationError("binarize_event_roll: threshold must lie in (0,1)");
  Tensor out(posteriors.shape);
  for (std::size_t i = 0; i < posteriors.size(); ++i)
    out.data[i] = posteriors.data[i] > threshold ? 1.0 : 0.0;
  return out;
}

namespace detail {

inline double f1_from_counts(std::size_t tp, std::size_t fp, std::size_t fn) {
  std::size_t denom = 2 * tp + fp + fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
}

inline EventMetrics event_metrics_from_counts(std::vector<EventClassCounts> counts) {
  EventMetrics em;
  em.counts = std::move(counts);
  std::size_t tp = 0, fp = 0, fn = 0;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  em.per_class_f.resize(em.counts.size(), 0.0);
  for (std::size_t m = 0; m < em.counts.size(); ++m) {
    const EventClassCounts& c = em.counts[m];
    tp += c.tp;
    fp += c.fp;
    fn += c.fn;
    em.per_class_f[m] = f1_from_counts(c.tp, c.fp, c.fn);
    // classes absent from both reference and predictions stay out of the
    // macro average; referenced-but-never-predicted classes score 0
    if (c.tp + c.fn > 0 || c.fp > 0) {
      macro_sum += em.per_class_f[m];
      ++macro_n;
    }
  }
  em.micro_f = f1_from_counts(tp, fp, fn);
  em.macro_f = macro_n == 0 ? 0.0 : macro_sum / static_cast<double>(macro_n);
  return em;
}

}  // namespace detail

inline SceneMetrics scene_metrics(const std::vector<std::size_t>& predictions,
                                  const std::vector<std::size_t>& references,
                                  std::size_t n_scenes) {
  if (predictions.empty()) throw ValidationError("scene_metrics: empty input");
  if (predictions.size() != references.size())
    throw ValidationError("scene_metrics: prediction/reference length mismatch");
  SceneMetrics sm;
  sm.confusion.assign(n_scenes, std::vector<std::size_t>(n_scenes, 0));
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i] >= n_scenes || references[i] >= n_scenes)
      throw ValidationError("scene_metrics: class index out of range");
    sm.confusion[references[i]][predictions[i]] += 1;
  }
  sm.per_class_recall.assign(n_scenes, 0.0);
  sm.per_class_f.assign(n_scenes, 0.0);
  std::size_t correct = 0;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  for (std::size_t c = 0; c < n_scenes; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < n_scenes; ++j) {
      row += sm.confusion[c][j];
      col += sm.confusion[j][c];
    }
    std::size_t tp = sm.confusion[c][c];
    correct += tp;
    sm.per_class_recall[c] = row == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(row);
    sm.per_class_f[c] = detail::f1_from_counts(tp, col - tp, row - tp);
    if (row > 0 || col > 0) {
      macro_sum += sm.per_class_f[c];
      ++macro_n;
    }
  }
  sm.micro_f = static_cast<double>(correct) / static_cast<double>(predictions.size());
  sm.macro_f = macro_n == 0 ? 0.0 : macro_sum / static_cast<double>(macro_n);
  return sm;
}

inline EventMetrics event_metrics(const Tensor& pred_roll, const Tensor& ref_roll) {
  if (!(pred_roll.shape == ref_roll.shape))
    throw ValidationError("event_metrics: shape mismatch " + pred_roll.shape_string() +
                          " vs " + ref_roll.shape_string());
  if (pred_roll.rank() != 2) throw ValidationError("event_metrics: expected (L,M) rolls");
  std::size_t n_events = pred_roll.shape[1];
  std::vector<EventClassCounts> counts(n_events);
  std::size_t frames = pred_roll.shape[0];
  for (std::size_t l = 0; l < frames; ++l)
    for (std::size_t m = 0; m < n_events; ++m) {
      bool p = pred_roll.at(l, m) != 0.0;
      bool r = ref_roll.at(l, m) != 0.0;
      if (p && r)
        counts[m].tp += 1;
      else if (p && !r)
        counts[m].fp += 1;
      else if (!p && r)
        counts[m].fn += 1;
    }
  return detail::event_metrics_from_counts(std::move(counts));
}

// Runs inference over every clip: scene prediction is the posterior argmax,
// event rolls are binarized and pooled over all clips before counting.
inline MetricsReport evaluate(MtlModel& model, const std::vector<ClipFeatures>& data,
                              double threshold = 0.5) {
  if (data.empty()) throw ValidationError("evaluate: empty data set");
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ValidationError("evaluate: threshold must lie in (0,1)");
  std::vector<std::size_t> preds, refs;
  std::vector<EventClassCounts> counts(model.arch.n_events);
  for (const ClipFeatures& c : data) {
    std::size_t d = c.features.shape[0], l = c.features.shape[1];
    Tensor input({1, 1, l, d});
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t f = 0; f < d; ++f) input.at(0, 0, t, f) = c.features.at(f, t);
    ForwardResult fwd = mtl_forward(model, input, /*train=*/false);
    ModelOutput out = fwd.output();

    std::size_t best = 0;
    for (std::size_t n = 1; n < model.arch.n_scenes; ++n)
      if (out.scene_posterior.data[n] > out.scene_posterior.data[best]) best = n;
    preds.push_back(best);
    refs.push_back(c.scene);

    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t m = 0; m < model.arch.n_events; ++m) {
        bool p = out.event_posterior.at(0, t, m) > threshold;
        bool r = c.roll.at(t, m) != 0.0;
        if (p && r)
          counts[m].tp += 1;
        else if (p && !r)
          counts[m].fp += 1;
        else if (!p && r)
          counts[m].fn += 1;
      }
  }
  MetricsReport report;
  report.scene = scene_metrics(preds, refs, model.arch.n_scenes);
  report.event = detail::event_metrics_from_counts(std::move(counts));
  return report;
}

// ---- report rendering -------------------------------------------------------

inline std::string report_to_csv(const MetricsReport& r,
                                 const std::vector<std::string>& scene_labels,
                                 const std::vector<std::string>& event_labels) {
  std::ostringstream out;
  char buf[64];
  auto emit = [&](const std::string& metric, const std::string& cls, double v) {
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    out << metric << ',' << cls << ',' << buf << '\n';
  };
  out << "metric,class,value\n";
  emit("scene.micro_f", "", r.scene.micro_f);
  emit("scene.macro_f", "", r.scene.macro_f);
  for (std::size_t c = 0; c < scene_labels.size(); ++c) {
    emit("scene.recall", scene_labels[c], r.scene.per_class_recall[c]);
    emit("scene.f1", scene_labels[c], r.scene.per_class_f[c]);
  }
  emit("event.micro_f", "", r.event.micro_f);
  emit("event.macro_f", "", r.event.macro_f);
  for (std::size_t m = 0; m < event_labels.size(); ++m) {
    emit("event.f1", event_labels[m], r.event.per_class_f[m]);
    emit("event.tp", event_labels[m], static_cast<double>(r.event.counts[m].tp));
    emit("event.fp", event_labels[m], static_cast<double>(r.event.counts[m].fp));
    emit("event.fn", event_labels[m], static_cast<double>(r.event.counts[m].fn));
  }
  return out.str();
}

inline std::string report_to_table(const MetricsReport& r,
                                   const std::vector<std::string>& scene_labels,
                                   const std::vector<std::string>& event_labels) {
  std::ostringstream out;
  char buf[128];
  out << "Scene classification (micro-F = accuracy)\n";
  std::snprintf(buf, sizeof(buf), "  micro-F %.4f   macro-F %.4f\n", r.scene.micro_f,
                r.scene.macro_f);
  out << buf;
  for (std::size_t c = 0; c < scene_labels.size(); ++c) {
    std::snprintf(buf, sizeof(buf), "  %-20s recall %.4f  F1 %.4f\n", scene_labels[c].c_str(),
                  r.scene.per_class_recall[c], r.scene.per_class_f[c]);
    out << buf;
  }
  out << "Event detection (frame-based)\n";
  std::snprintf(buf, sizeof(buf), "  micro-F %.4f   macro-F %.4f\n", r.event.micro_f,
                r.event.macro_f);
  out << buf;
  for (std::size_t m = 0; m < event_labels.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "  %-20s F1 %.4f  (tp %zu fp %zu fn %zu)\n",
                  event_labels[m].c_str(), r.event.per_class_f[m], r.event.counts[m].tp,
                  r.event.counts[m].fp, r.event.counts[m].fn);
    out << buf;
  }
  return out.str();
}

}  // namespace taskweight
