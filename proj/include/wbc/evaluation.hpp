#ifndef WBC_EVALUATION_HPP_
#define WBC_EVALUATION_HPP_

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "wbc/dataset.hpp"
#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/postprocess.hpp"

namespace wbc {

struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

using ClassCounts = std::map<std::string, ConfusionCounts>;

inline void accumulate(ClassCounts& into, const ClassCounts& part) {
    for (const auto& [k, v] : part) into[k] += v;
}

/// Operating point of the matching protocol: a prediction counts only with
/// confidence strictly above `conf_min` and IoU strictly above `iou_min`.
struct MatchRule {
    double conf_min = 0.20;
    double iou_min = 0.40;

    void validate() const {
        if (!(conf_min >= 0.0 && conf_min <= 1.0) || !(iou_min >= 0.0 && iou_min <= 1.0))
            throw ConfigError("match rule thresholds must lie in [0,1]");
    }
};

namespace detail {

inline bool match_order(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.class_name != b.class_name) return a.class_name < b.class_name;
    const auto ka = std::make_tuple(a.box.x_min(), a.box.y_min(), a.box.x_max(), a.box.y_max());
    const auto kb = std::make_tuple(b.box.x_min(), b.box.y_min(), b.box.x_max(), b.box.y_max());
    return ka < kb;
}

}  // namespace detail

/// Greedy matching of one image's predictions against its ground truth.
///
/// Predictions are visited by descending confidence. One above the confidence bar
/// is a TP when it claims the best-overlapping unmatched truth of its class with
/// IoU above the bar, otherwise an FP. Predictions at or below the confidence bar
/// are FNs of their own class. Truths left unmatched are FNs.
inline ClassCounts match_detections(std::span<const Detection> preds, std::span<const AnnotatedObject> truths,
                                    const MatchRule& rule) {
    rule.validate();
    ClassCounts counts;
    for (const auto& t : truths) counts[t.class_name];

    std::vector<const Detection*> order;
    order.reserve(preds.size());
    for (const auto& p : preds) order.push_back(&p);
    std::stable_sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return detail::match_order(*a, *b); });

    std::vector<bool> used(truths.size(), false);
    for (const Detection* p : order) {
        auto& c = counts[p->class_name];
        if (!(p->confidence > rule.conf_min)) {
            ++c.fn;
            continue;
        }
        std::optional<std::size_t> best;
        double best_iou = rule.iou_min;
        for (std::size_t i = 0; i < truths.size(); ++i) {
            if (used[i] || truths[i].class_name != p->class_name) continue;
            const double q = iou(p->box, truths[i].box);
            if (q > best_iou) {
                best_iou = q;
                best = i;
            }
        }
        if (best) {
            used[*best] = true;
            ++c.tp;
        } else {
            ++c.fp;
        }
    }
    for (std::size_t i = 0; i < truths.size(); ++i)
        if (!used[i]) ++counts[truths[i].class_name].fn;
    return counts;
}

/// Image-level label: class of the most confident prediction above the bar.
inline std::optional<int> classify_image(std::span<const Detection> preds, const MatchRule& rule = {}) {
    const Detection* best = nullptr;
    for (const auto& p : preds) {
        if (!(p.confidence > rule.conf_min)) continue;
        if (!best || p.confidence > best->confidence ||
            (p.confidence == best->confidence && p.class_id < best->class_id))
            best = &p;
    }
    if (!best) return std::nullopt;
    return best->class_id;
}

/// One-vs-rest counts from (true class, predicted class) pairs; a missing
/// prediction is an FN for the true class.
inline std::vector<ConfusionCounts> classification_counts(std::span<const std::pair<int, std::optional<int>>> outcomes,
                                                          int num_classes) {
    std::vector<ConfusionCounts> c(static_cast<std::size_t>(num_classes));
    for (const auto& [truth, pred] : outcomes) {
        if (truth < 0 || truth >= num_classes) throw ContractError("classification_counts: true class out of range");
        for (int k = 0; k < num_classes; ++k) {
            auto& ck = c[static_cast<std::size_t>(k)];
            const bool is_true = truth == k;
            const bool is_pred = pred && *pred == k;
            if (is_true && is_pred) ++ck.tp;
            else if (is_true) ++ck.fn;
            else if (is_pred) ++ck.fp;
            else ++ck.tn;
        }
    }
    return c;
}

struct Metrics {
    double accuracy = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    bool accuracy_degenerate = false;
    bool precision_degenerate = false;
    bool recall_degenerate = false;
    bool f1_degenerate = false;

    bool degenerate() const noexcept {
        return accuracy_degenerate || precision_degenerate || recall_degenerate || f1_degenerate;
    }
};

/// Accuracy, precision, recall and F1 from raw counts. A zero denominator yields
/// 0 and raises the matching degenerate flag.
inline Metrics metrics(const ConfusionCounts& c) {
    Metrics m;
    const auto ratio = [](std::uint64_t num, std::uint64_t den, bool& degenerate) {
        if (den == 0) {
            degenerate = true;
            return 0.0;
        }
        return static_cast<double>(num) / static_cast<double>(den);
    };
    m.accuracy = ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn, m.accuracy_degenerate);
    m.precision = ratio(c.tp, c.tp + c.fp, m.precision_degenerate);
    m.recall = ratio(c.tp, c.tp + c.fn, m.recall_degenerate);
    if (m.precision + m.recall > 0.0) {
        m.f1 = 2.0 * m.recall * m.precision / (m.recall + m.precision);
    } else {
        m.f1 = 0.0;
        m.f1_degenerate = true;
    }
    return m;
}

enum class EvalMode : std::uint8_t { Classification, Detection };

inline std::string to_string(EvalMode m) { return m == EvalMode::Classification ? "classification" : "detection"; }

struct ReportRow {
    std::string class_name;
    ConfusionCounts counts;
    Metrics metrics;
    std::uint64_t support = 0;  ///< ground-truth instances (tp + fn)
};

struct EvalReport {
    EvalMode mode = EvalMode::Classification;
    std::vector<ReportRow> rows;
    double overall_accuracy = 0.0;
    bool overall_degenerate = false;
    nlohmann::json config_echo;
    std::vector<std::string> footnotes;
};

inline const char* kDetectionAccuracyNote =
    "detection has no true negatives; accuracy is reported as TP/(TP+FP+FN)";

/// Rows follow the vocabulary order. Overall accuracy is micro-averaged:
/// correct images / all images for classification, sum TP / sum (TP+FP+FN) for detection.
inline EvalReport build_report(const ClassCounts& counts, EvalMode mode, const ClassVocabulary& vocab,
                               nlohmann::json config_echo = nlohmann::json::object()) {
    EvalReport r;
    r.mode = mode;
    r.config_echo = std::move(config_echo);
    std::uint64_t num = 0, den = 0;
    for (const auto& name : vocab.names()) {
        const auto it = counts.find(name);
        if (it == counts.end()) throw StructuralError("report: no counts for class " + name);
        ConfusionCounts c = it->second;
        if (mode == EvalMode::Detection) c.tn = 0;
        r.rows.push_back({name, c, metrics(c), c.tp + c.fn});
        num += c.tp;
        den += mode == EvalMode::Classification ? c.tp + c.fn : c.tp + c.fp + c.fn;
    }
    for (const auto& [name, c] : counts)
        if (!vocab.id_of(name)) r.footnotes.push_back("counts for class '" + name + "' outside the vocabulary were ignored");
    if (den == 0) {
        r.overall_degenerate = true;
    } else {
        r.overall_accuracy = static_cast<double>(num) / static_cast<double>(den);
    }
    if (mode == EvalMode::Detection) r.footnotes.insert(r.footnotes.begin(), kDetectionAccuracyNote);
    return r;
}

inline std::string report_csv(const EvalReport& r) {
    std::string out = "class,F1,Precision,Recall,Support\n";
    char buf[128];
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, ",%.4f,%.4f,%.4f,%llu\n", row.metrics.f1, row.metrics.precision,
                      row.metrics.recall, static_cast<unsigned long long>(row.support));
        out += row.class_name + buf;
    }
    return out;
}

inline nlohmann::json report_json(const EvalReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : r.rows) {
        const auto& m = row.metrics;
        rows.push_back({{"class", row.class_name},
                        {"tp", row.counts.tp},
                        {"fp", row.counts.fp},
                        {"fn", row.counts.fn},
                        {"tn", row.counts.tn},
                        {"support", row.support},
                        {"accuracy", m.accuracy},
                        {"precision", m.precision},
                        {"recall", m.recall},
                        {"f1", m.f1},
                        {"degenerate",
                         {{"accuracy", m.accuracy_degenerate},
                          {"precision", m.precision_degenerate},
                          {"recall", m.recall_degenerate},
                          {"f1", m.f1_degenerate}}}});
    }
    return {{"mode", to_string(r.mode)},
            {"rows", rows},
            {"overall_accuracy", r.overall_accuracy},
            {"overall_degenerate", r.overall_degenerate},
            {"footnotes", r.footnotes},
            {"config", r.config_echo}};
}

/// Fixed-width table in the layout of a per-class results table.
inline std::string format_table(const EvalReport& r) {
    std::string out;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-12s %8s %10s %8s %8s\n", "WBC Type", "F1-Score", "Precision", "Recall", "Support");
    out += buf;
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%-12s %8.2f %10.2f %8.2f %8llu%s\n", row.class_name.c_str(), row.metrics.f1,
                      row.metrics.precision, row.metrics.recall, static_cast<unsigned long long>(row.support),
                      row.metrics.degenerate() ? "  *" : "");
        out += buf;
    }
    std::snprintf(buf, sizeof buf, "overall accuracy (%s): %.4f\n", to_string(r.mode).c_str(), r.overall_accuracy);
    out += buf;
    for (const auto& f : r.footnotes) out += "note: " + f + "\n";
    return out;
}

}  // namespace wbc

#endif  // WBC_EVALUATION_HPP_
