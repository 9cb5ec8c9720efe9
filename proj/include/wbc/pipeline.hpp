#ifndef WBC_PIPELINE_HPP_
#define WBC_PIPELINE_HPP_

#include <algorithm>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "wbc/dataset.hpp"
#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/head_decoder.hpp"
#include "wbc/inference.hpp"
#include "wbc/postprocess.hpp"

namespace wbc {

inline constexpr int kBoxesPerCell = 3;

/// Conventional YOLOv3 priors (416 px input), scale-major for strides 32, 16, 8.
inline const std::vector<AnchorBox> kReferenceAnchors = {
    {116, 90}, {156, 198}, {373, 326},  // stride 32
    {30, 61},  {62, 45},   {59, 119},   // stride 16
    {10, 13},  {16, 30},   {33, 23},    // stride 8
};

inline int phase_classes(Phase p) { return p == Phase::Phase1 ? 1 : 4; }

inline const ClassVocabulary& phase_vocabulary(Phase p) {
    return p == Phase::Phase1 ? ClassVocabulary::phase1() : ClassVocabulary::phase2();
}

/// Head for a phase: one class (depth 18) for WBC localisation, four (depth 27) for subtypes.
inline HeadSpec make_phase_head(Phase p, std::vector<AnchorBox> anchors = kReferenceAnchors,
                                int input_size = kDefaultInputSize) {
    const int c = phase_classes(p);
    return HeadSpec(c, kBoxesPerCell, kDefaultStrides, input_size, std::move(anchors),
                    kBoxesPerCell * (kBoxAttributes + c));
}

class PhaseConfig {
 public:
    PhaseConfig(Phase phase, HeadSpec head, PostprocessConfig post, std::shared_ptr<const BackboneAdapter> backbone)
        : phase_{phase}, head_{std::move(head)}, post_{post}, backbone_{std::move(backbone)} {
        const int want = phase_classes(phase_);
        if (head_.num_classes() != want)
            throw ShapeError("phase " + std::to_string(static_cast<int>(phase_)) + " needs " + std::to_string(want) +
                             " classes (depth " + std::to_string(head_.boxes_per_cell() * (kBoxAttributes + want)) +
                             "), head has " + std::to_string(head_.num_classes()) + " (depth " +
                             std::to_string(head_.depth()) + ")");
        post_.validate();
        if (!backbone_) throw ConfigError("phase config requires a backbone");
    }

    Phase phase() const noexcept { return phase_; }
    const HeadSpec& head() const noexcept { return head_; }
    const PostprocessConfig& post() const noexcept { return post_; }
    const BackboneAdapter& backbone() const noexcept { return *backbone_; }
    const ClassVocabulary& vocabulary() const { return phase_vocabulary(phase_); }

    /// Used when an entry carries neither annotation nor dimensions.
    ImageDims fallback_dims{320, 240};
    unsigned workers = 1;

 private:
    Phase phase_;
    HeadSpec head_;
    PostprocessConfig post_;
    std::shared_ptr<const BackboneAdapter> backbone_;
};

inline nlohmann::json describe(const PhaseConfig& cfg) {
    nlohmann::json anchors = nlohmann::json::array();
    for (const auto& a : cfg.head().anchors()) anchors.push_back({a.pw, a.ph});
    return {{"phase", static_cast<int>(cfg.phase())},
            {"num_classes", cfg.head().num_classes()},
            {"boxes_per_cell", cfg.head().boxes_per_cell()},
            {"depth", cfg.head().depth()},
            {"strides", cfg.head().strides()},
            {"input_size", cfg.head().input_size()},
            {"anchors", anchors},
            {"conf_threshold", cfg.post().conf_threshold},
            {"nms_iou_threshold", cfg.post().nms_iou_threshold},
            {"backbone", cfg.backbone().kind()}};
}

struct SkippedImage {
    std::string image_id;
    std::string reason;
};

inline ImageDims entry_dims(const ManifestEntry& e, ImageDims fallback) {
    if (e.annotation && e.annotation->image_w > 0 && e.annotation->image_h > 0) return e.annotation->dims();
    if (e.dims.width > 0 && e.dims.height > 0) return e.dims;
    return fallback;
}

/// backbone -> decode -> score/filter -> NMS -> original frame, for one image.
inline std::vector<Detection> detect_image(const std::string& image_id, ImageDims dims, const PhaseConfig& cfg) {
    const LetterboxMap map(dims.width, dims.height, cfg.head().input_size());
    const auto tensors = cfg.backbone().infer(image_id, cfg.head());
    const auto raw = decode_all(tensors, cfg.head());
    const auto scored = score_and_filter(raw, cfg.post(), cfg.vocabulary().names(), cfg.phase());
    const auto kept = nms(scored, cfg.post());
    return to_original_frame(kept, map);
}

namespace detail {

using ImageOutcome = std::variant<std::vector<Detection>, std::string>;

// Runs detect_image over all entries; results are indexed like `entries`
// whatever the worker count.
inline std::vector<ImageOutcome> detect_all(const std::vector<ManifestEntry>& entries, const PhaseConfig& cfg) {
    std::vector<ImageOutcome> out(entries.size());
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < entries.size(); i += step) {
            const auto& e = entries[i];
            try {
                out[i] = detect_image(e.image_id, entry_dims(e, cfg.fallback_dims), cfg);
            } catch (const std::exception& ex) {
                out[i] = std::string(ex.what());
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(cfg.workers, entries.size()));
    if (workers <= 1) {
        work(0, 1);
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w, workers);
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Phase 1: single-class WBC localisation

struct Phase1Box {
    std::string box_id;  ///< "<image_id>:p1:<k>"
    Box box;             ///< PixelOriginal
    double confidence = 0.0;
};

struct Phase1Image {
    std::string image_id;
    ImageDims dims;
    std::vector<Phase1Box> boxes;
};

struct Phase1Output {
    std::map<std::string, Phase1Image> images;
    std::vector<SkippedImage> skipped;

    std::size_t box_count() const {
        std::size_t n = 0;
        for (const auto& [id, img] : images) n += img.boxes.size();
        return n;
    }
};

inline Phase1Output run_phase1(const DatasetManifest& manifest, const PhaseConfig& cfg) {
    if (cfg.phase() != Phase::Phase1) throw ConfigError("run_phase1 requires a phase-1 configuration");
    const auto outcomes = detail::detect_all(manifest.entries, cfg);
    Phase1Output out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (const auto* err = std::get_if<std::string>(&outcomes[i])) {
            out.skipped.push_back({e.image_id, *err});
            continue;
        }
        Phase1Image img{e.image_id, entry_dims(e, cfg.fallback_dims), {}};
        const auto& dets = std::get<std::vector<Detection>>(outcomes[i]);
        for (std::size_t k = 0; k < dets.size(); ++k)
            img.boxes.push_back({e.image_id + ":p1:" + std::to_string(k), dets[k].box, dets[k].confidence});
        out.images.emplace(e.image_id, std::move(img));
    }
    return out;
}

struct Phase2Trainset {
    DatasetManifest manifest;
    std::size_t pseudo_annotations = 0;
    std::size_t excluded_no_boxes = 0;
    std::size_t excluded_no_label = 0;
    std::size_t multi_box_images = 0;  ///< images whose label fans out to several boxes
    std::vector<std::string> warnings;
};

/// Pairs every phase-1 box with its image's subtype label.
inline Phase2Trainset make_phase2_trainset(const Phase1Output& phase1,
                                           const std::map<std::string, std::string>& class_labels) {
    const auto& vocab = ClassVocabulary::phase2();
    Phase2Trainset ts;
    ts.manifest.split = Split::Train;
    for (const auto& [id, img] : phase1.images) {
        if (img.boxes.empty()) {
            ++ts.excluded_no_boxes;
            continue;
        }
        const auto it = class_labels.find(id);
        const auto label = it == class_labels.end() ? std::nullopt : vocab.canonical(it->second);
        if (!label) {
            ++ts.excluded_no_label;
            ts.warnings.push_back("no subtype label for " + id + "; excluded");
            continue;
        }
        if (img.boxes.size() > 1) ++ts.multi_box_images;
        Annotation a{id, img.dims.width, img.dims.height, {}};
        for (const auto& b : img.boxes) a.objects.push_back({*label, b.box});
        ts.pseudo_annotations += a.objects.size();
        ts.manifest.entries.push_back({id, "", *label, img.dims, std::move(a), ""});
    }
    ts.manifest.sort_entries();
    ts.manifest.recount();
    return ts;
}

// ---------------------------------------------------------------------------
// Phase 2: subtype detection on the full image, linked back to phase-1 regions

inline constexpr double kAnchorLinkIou = 0.5;

struct Phase2Detection {
    Detection detection;
    std::optional<std::string> phase1_box;  ///< nullopt = unanchored
    double link_iou = 0.0;

    bool unanchored() const noexcept { return !phase1_box.has_value(); }
};

struct PipelineImage {
    std::string image_id;
    ImageDims dims;
    std::vector<Phase2Detection> detections;
};

struct PipelineResult {
    std::map<std::string, PipelineImage> images;
    std::vector<SkippedImage> skipped;
};

inline PipelineResult run_phase2(const DatasetManifest& manifest, const PhaseConfig& cfg,
                                 const Phase1Output* phase1 = nullptr) {
    if (cfg.phase() != Phase::Phase2) throw ConfigError("run_phase2 requires a phase-2 configuration");
    const auto outcomes = detail::detect_all(manifest.entries, cfg);
    PipelineResult out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (const auto* err = std::get_if<std::string>(&outcomes[i])) {
            out.skipped.push_back({e.image_id, *err});
            continue;
        }
        const Phase1Image* regions = nullptr;
        if (phase1) {
            if (auto it = phase1->images.find(e.image_id); it != phase1->images.end()) regions = &it->second;
        }
        PipelineImage img{e.image_id, entry_dims(e, cfg.fallback_dims), {}};
        for (const auto& d : std::get<std::vector<Detection>>(outcomes[i])) {
            Phase2Detection pd{d, std::nullopt, 0.0};
            if (regions) {
                const Phase1Box* best = nullptr;
                for (const auto& r : regions->boxes) {
                    const double q = iou(d.box, r.box);
                    if (q > pd.link_iou) {
                        pd.link_iou = q;
                        best = &r;
                    }
                }
                if (best && pd.link_iou > kAnchorLinkIou) pd.phase1_box = best->box_id;
            }
            img.detections.push_back(std::move(pd));
        }
        out.images.emplace(e.image_id, std::move(img));
    }
    return out;
}

}  // namespace wbc

#endif  // WBC_PIPELINE_HPP_
