#ifndef WBC_POSTPROCESS_HPP_
#define WBC_POSTPROCESS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/head_decoder.hpp"

namespace wbc {

enum class Phase : std::uint8_t { Phase1 = 1, Phase2 = 2 };

/// Order of a detection's originating head slot, used to break confidence ties.
struct SlotOrder {
    int scale_index = 0;
    int cell_y = 0;
    int cell_x = 0;
    int anchor_index = 0;

    friend auto operator<=>(const SlotOrder&, const SlotOrder&) = default;
};

struct Detection {
    Box box;
    int class_id = 0;
    std::string class_name;
    double confidence = 0.0;  ///< objectness * class_probs[class_id]
    double objectness = 0.0;
    std::vector<double> class_probs;
    Phase source_phase = Phase::Phase2;
    SlotOrder slot;
};

struct PostprocessConfig {
    double conf_threshold = 0.20;
    double nms_iou_threshold = 0.45;

    void validate() const {
        if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0))
            throw ConfigError("conf_threshold must lie in [0,1]");
        if (!(nms_iou_threshold >= 0.0 && nms_iou_threshold <= 1.0))
            throw ConfigError("nms_iou_threshold must lie in [0,1]");
    }
};

/// Index of the largest score; ties go to the lowest index.
inline int argmax_class(std::span<const double> probs) {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
        if (probs[i] > probs[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

inline std::vector<Detection> score_and_filter(std::span<const RawDetection> raw, const PostprocessConfig& cfg,
                                               std::span<const std::string> class_names, Phase phase) {
    cfg.validate();
    std::vector<Detection> out;
    for (const auto& r : raw) {
        if (r.class_probs.empty()) throw ContractError("score_and_filter: detection without class scores");
        const int cls = argmax_class(r.class_probs);
        const double conf = r.objectness * r.class_probs[static_cast<std::size_t>(cls)];
        if (conf < cfg.conf_threshold) continue;
        std::string name = static_cast<std::size_t>(cls) < class_names.size()
                               ? class_names[static_cast<std::size_t>(cls)]
                               : "class" + std::to_string(cls);
        out.push_back(Detection{r.box, cls, std::move(name), conf, r.objectness, r.class_probs, phase,
                                {r.scale_index, r.cell.y, r.cell.x, r.anchor_index}});
    }
    return out;
}

namespace detail {

inline bool detection_before(const Detection& a, const Detection& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    return a.slot < b.slot;
}

}  // namespace detail

/// Greedy per-class suppression. A box is dropped when its IoU with an already
/// kept, higher-ranked box of the same class exceeds the threshold.
inline std::vector<Detection> nms(std::span<const Detection> dets, const PostprocessConfig& cfg) {
    cfg.validate();
    std::vector<Detection> sorted(dets.begin(), dets.end());
    std::stable_sort(sorted.begin(), sorted.end(), detail::detection_before);

    std::vector<Detection> kept;
    for (auto& d : sorted) {
        bool suppressed = false;
        for (const auto& k : kept) {
            if (k.class_id == d.class_id && iou(k.box, d.box) > cfg.nms_iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(std::move(d));
    }
    return kept;
}

/// Maps network-frame detections back to the source image, clamping to its bounds.
/// Detections with nothing left inside the image are dropped.
inline std::vector<Detection> to_original_frame(std::span<const Detection> dets, const LetterboxMap& map) {
    std::vector<Detection> out;
    out.reserve(dets.size());
    for (const auto& d : dets) {
        auto clamped = clamp_to_image(map.backward(d.box), map.src_dims());
        if (!clamped) continue;
        Detection m = d;
        m.box = *clamped;
        out.push_back(std::move(m));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Detection records: `image_id class_name confidence x_min y_min x_max y_max`
// with integer pixel corners and a four-decimal confidence.

struct DetectionRecord {
    std::string image_id;
    std::string class_name;
    double confidence = 0.0;
    long x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    friend bool operator==(const DetectionRecord&, const DetectionRecord&) = default;
};

inline DetectionRecord to_record(const std::string& image_id, const Detection& d) {
    return {image_id, d.class_name, d.confidence, std::lround(d.box.x_min()), std::lround(d.box.y_min()),
            std::lround(d.box.x_max()), std::lround(d.box.y_max())};
}

inline std::string format_record(const DetectionRecord& r) {
    char buf[96];
    std::snprintf(buf, sizeof buf, " %.4f %ld %ld %ld %ld", r.confidence, r.x_min, r.y_min, r.x_max, r.y_max);
    return r.image_id + " " + r.class_name + buf;
}

inline DetectionRecord parse_record(const std::string& line, int lineno = 0) {
    std::istringstream in(line);
    DetectionRecord r;
    if (!(in >> r.image_id >> r.class_name >> r.confidence >> r.x_min >> r.y_min >> r.x_max >> r.y_max))
        throw SchemaError("detection record line " + std::to_string(lineno) +
                          ": expected 'image_id class_name confidence x_min y_min x_max y_max'");
    std::string extra;
    if (in >> extra) throw SchemaError("detection record line " + std::to_string(lineno) + ": trailing fields");
    return r;
}

inline std::vector<DetectionRecord> parse_records(const std::string& text) {
    std::vector<DetectionRecord> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        out.push_back(parse_record(line, lineno));
    }
    return out;
}

}  // namespace wbc

#endif  // WBC_POSTPROCESS_HPP_
