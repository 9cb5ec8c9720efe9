// wbc: command-line front end for anchor clustering, two-phase detection and evaluation.

#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "wbc/wbc.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode : int { kOk = 0, kInternal = 1, kInputError = 2, kPartial = 3 };

/// Thrown for bad user input; maps to exit code 2.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw UsageError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Temp file + rename so readers never see a half-written output.
void write_atomic(const fs::path& p, const std::string& content) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw wbc::IoError("cannot write " + tmp.string());
        out << content;
        if (!out) throw wbc::IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, p);
}

// ---------------------------------------------------------------------------
// Option bindings: a flag given on the command line wins over the same key in
// --config, which wins over the default. The merged values are echoed to run.json.

struct Binding {
    std::string key;
    CLI::Option* opt;
    std::function<void(const json&)> load;
    std::function<json()> dump;
};

class Options {
 public:
    explicit Options(CLI::App* app) : app_{app} {}

    template<typename T>
    CLI::Option* add(const std::string& key, T& var, const std::string& help) {
        CLI::Option* o = app_->add_option("--" + key, var, help);
        if constexpr (!std::is_same_v<T, std::vector<std::string>>) o->capture_default_str();
        bindings_.push_back({key, o, [&var](const json& j) { var = j.get<T>(); }, [&var] { return json(var); }});
        return o;
    }

    void merge(const json& config) {
        for (auto& b : bindings_) {
            if (b.opt->count() > 0 || !config.contains(b.key)) continue;
            try {
                b.load(config.at(b.key));
            } catch (const json::exception& e) {
                throw UsageError("config key '" + b.key + "': " + e.what());
            }
        }
    }

    json echo(const std::string& command) const {
        json j = {{"command", command}};
        for (const auto& b : bindings_) j[b.key] = b.dump();
        return j;
    }

 private:
    CLI::App* app_;
    std::vector<Binding> bindings_;
};

struct Globals {
    std::uint64_t seed = 0;
    std::string config;
    std::string out = "out";
    std::string log_level = "info";
};

json load_config(const std::string& path, const std::string& command) {
    if (path.empty()) return json::object();
    json j = json::parse(read_file(path), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw UsageError("config " + path + " is not a JSON object");
    if (j.contains("command") && j["command"] != command)
        throw UsageError("config " + path + " describes command '" + j["command"].get<std::string>() + "'");
    return j;
}

wbc::Phase parse_phase(int p) {
    if (p == 1) return wbc::Phase::Phase1;
    if (p == 2) return wbc::Phase::Phase2;
    throw UsageError("--phase must be 1 or 2");
}

std::vector<wbc::AnchorBox> load_anchors(const std::string& path) {
    if (path.empty()) return wbc::kReferenceAnchors;
    auto anchors = wbc::read_anchor_file(read_file(path));
    if (anchors.size() != 9) throw UsageError("anchor file must list 9 anchors, found " + std::to_string(anchors.size()));
    return wbc::head_anchor_order(wbc::assign_to_scales(anchors, wbc::kDefaultStrides));
}

// ---------------------------------------------------------------------------
// anchors

struct AnchorsArgs {
    std::string annotations;
    int k = 9;
    int input_size = wbc::kDefaultInputSize;
    std::string distance = "iou";
    int max_iters = 300;
    std::vector<std::string> classes;
    std::string output = "anchors.txt";
};

int cmd_anchors(const AnchorsArgs& a, const Globals& g, const json& run) {
    if (a.annotations.empty()) throw UsageError("--annotations is required");
    if (a.distance != "iou" && a.distance != "euclid") throw UsageError("--distance must be iou or euclid");
    std::vector<std::string> warnings;
    const auto anns = wbc::load_voc_dir(a.annotations, &warnings);
    for (const auto& w : warnings) spdlog::warn("{}", w);

    std::set<std::string> filter;
    for (const auto& c : a.classes) filter.insert(wbc::detail::lower(c));
    std::vector<wbc::AnchorBox> dims;
    for (const auto& ann : anns) {
        const wbc::LetterboxMap map(ann.image_w, ann.image_h, a.input_size);
        for (const auto& obj : ann.objects) {
            if (!filter.empty() && !filter.count(wbc::detail::lower(obj.class_name))) continue;
            dims.push_back({obj.box.w() * map.scale(), obj.box.h() * map.scale()});
        }
    }

    wbc::AnchorConfig cfg;
    cfg.k = a.k;
    cfg.max_iters = a.max_iters;
    cfg.seed = g.seed;
    cfg.distance = a.distance == "iou" ? wbc::AnchorDistance::OneMinusIoU : wbc::AnchorDistance::Euclidean;
    if (cfg.k % 3 != 0) cfg.strides = {32};
    const auto res = wbc::cluster_anchors(dims, cfg);

    std::string classes = "all";
    if (!a.classes.empty()) {
        classes.clear();
        for (const auto& c : a.classes) classes += (classes.empty() ? "" : "+") + c;
    }
    char miou[64];
    std::snprintf(miou, sizeof miou, "mean_iou=%.6f iterations=%d", res.mean_iou, res.iterations_run);
    const std::vector<std::string> header = {
        "anchors k=" + std::to_string(a.k) + " input_size=" + std::to_string(a.input_size) +
            " seed=" + std::to_string(g.seed) + " distance=" + a.distance,
        "source=" + a.annotations + " images=" + std::to_string(anns.size()) + " boxes=" + std::to_string(dims.size()) +
            " classes=" + classes,
        miou};
    const fs::path out = fs::path(g.out) / a.output;
    write_atomic(out, wbc::write_anchor_file(res.anchors, header));
    write_atomic(fs::path(g.out) / "run.json", run.dump(2) + "\n");
    spdlog::info("wrote {} anchors to {} (mean IoU {:.4f})", res.anchors.size(), out.string(), res.mean_iou);
    return warnings.empty() ? kOk : kPartial;
}

// ---------------------------------------------------------------------------
// detect

struct DetectArgs {
    int phase = 2;
    std::string backbone = "toy";
    std::string tensor_dir;
    std::string anchors;
    double conf = 0.20;
    double nms = 0.45;
    std::string manifest;
    int input_size = wbc::kDefaultInputSize;
    std::string phase1_detections;
    unsigned workers = 1;
    double toy_confidence = 0.95;
};

wbc::Phase1Output load_phase1_records(const std::string& path, const wbc::DatasetManifest& m) {
    wbc::Phase1Output out;
    std::map<std::string, wbc::ImageDims> dims;
    for (const auto& e : m.entries) dims[e.image_id] = wbc::entry_dims(e, {320, 240});
    for (const auto& r : wbc::parse_records(read_file(path))) {
        auto& img = out.images[r.image_id];
        img.image_id = r.image_id;
        img.dims = dims.count(r.image_id) ? dims[r.image_id] : wbc::ImageDims{320, 240};
        if (r.x_max <= r.x_min || r.y_max <= r.y_min) continue;
        img.boxes.push_back({r.image_id + ":p1:" + std::to_string(img.boxes.size()),
                             wbc::Box::from_corners(r.x_min, r.y_min, r.x_max, r.y_max), r.confidence});
    }
    return out;
}

std::shared_ptr<const wbc::BackboneAdapter> make_backbone(const DetectArgs& a, const Globals& g,
                                                           const wbc::DatasetManifest& m, wbc::Phase phase) {
    if (a.backbone == "tensors") {
        if (a.tensor_dir.empty()) throw UsageError("--backbone tensors needs --tensor-dir");
        return std::make_shared<wbc::TensorDirBackbone>(a.tensor_dir);
    }
    if (a.backbone != "toy") throw UsageError("--backbone must be toy or tensors");
    // The toy model "sees" each image's ground truth and plants it.
    auto toy = std::make_shared<wbc::ToyBackbone>(g.seed);
    const auto& vocab = wbc::phase_vocabulary(phase);
    for (const auto& e : m.entries) {
        const auto d = wbc::entry_dims(e, {320, 240});
        const wbc::LetterboxMap map(d.width, d.height, a.input_size);
        for (const auto& obj : wbc::resolve_truth_objects(e, vocab))
            toy->plant(e.image_id, {map.forward(obj.box), *vocab.id_of(obj.class_name), a.toy_confidence});
    }
    return toy;
}

int cmd_detect(const DetectArgs& a, const Globals& g, const json& run) {
    if (a.manifest.empty()) throw UsageError("--manifest is required");
    const wbc::Phase phase = parse_phase(a.phase);
    const auto manifest = wbc::read_manifest_jsonl(read_file(a.manifest));
    auto backbone = make_backbone(a, g, manifest, phase);
    wbc::PhaseConfig cfg(phase, wbc::make_phase_head(phase, load_anchors(a.anchors), a.input_size), {a.conf, a.nms},
                         backbone);
    cfg.workers = a.workers;

    std::string records;
    json overlay = {{"phase", a.phase}, {"images", json::array()}};
    std::vector<wbc::SkippedImage> skipped;
    std::size_t total = 0;

    auto add_box = [](json& boxes, const wbc::Detection& d) {
        boxes.push_back({{"label", d.class_name},
                         {"confidence", d.confidence},
                         {"x_min", d.box.x_min()},
                         {"y_min", d.box.y_min()},
                         {"x_max", d.box.x_max()},
                         {"y_max", d.box.y_max()}});
    };

    if (phase == wbc::Phase::Phase1) {
        const auto out = wbc::run_phase1(manifest, cfg);
        skipped = out.skipped;
        for (const auto& [id, img] : out.images) {
            json boxes = json::array();
            for (const auto& b : img.boxes) {
                wbc::Detection d{b.box, 0, "WBC", b.confidence, b.confidence, {}, phase, {}};
                records += wbc::format_record(wbc::to_record(id, d)) + "\n";
                add_box(boxes, d);
                boxes.back()["id"] = b.box_id;
                ++total;
            }
            overlay["images"].push_back({{"image_id", id}, {"width", img.dims.width}, {"height", img.dims.height}, {"boxes", boxes}});
        }
        std::map<std::string, std::string> labels;
        for (const auto& e : manifest.entries)
            if (!e.label.empty()) labels[e.image_id] = e.label;
        if (!labels.empty()) {
            const auto ts = wbc::make_phase2_trainset(out, labels);
            for (const auto& w : ts.warnings) spdlog::warn("{}", w);
            write_atomic(fs::path(g.out) / "phase2_trainset.jsonl", wbc::write_manifest_jsonl(ts.manifest));
            spdlog::info("phase-2 training set: {} pseudo-annotations, {} images without boxes, {} multi-box images",
                         ts.pseudo_annotations, ts.excluded_no_boxes, ts.multi_box_images);
        }
    } else {
        std::optional<wbc::Phase1Output> p1;
        if (!a.phase1_detections.empty()) p1 = load_phase1_records(a.phase1_detections, manifest);
        const auto out = wbc::run_phase2(manifest, cfg, p1 ? &*p1 : nullptr);
        skipped = out.skipped;
        for (const auto& [id, img] : out.images) {
            json boxes = json::array();
            for (const auto& pd : img.detections) {
                records += wbc::format_record(wbc::to_record(id, pd.detection)) + "\n";
                add_box(boxes, pd.detection);
                boxes.back()["phase1_box"] = pd.phase1_box ? json(*pd.phase1_box) : json(nullptr);
                boxes.back()["class_probs"] = pd.detection.class_probs;
                ++total;
            }
            overlay["images"].push_back({{"image_id", id}, {"width", img.dims.width}, {"height", img.dims.height}, {"boxes", boxes}});
        }
    }

    overlay["skipped"] = json::array();
    for (const auto& s : skipped) {
        spdlog::warn("skipped {}: {}", s.image_id, s.reason);
        overlay["skipped"].push_back({{"image_id", s.image_id}, {"reason", s.reason}});
    }
    json run_full = run;
    run_full["head"] = wbc::describe(cfg);
    write_atomic(fs::path(g.out) / "detections.txt", records);
    write_atomic(fs::path(g.out) / "overlay.json", overlay.dump(2) + "\n");
    write_atomic(fs::path(g.out) / "run.json", run_full.dump(2) + "\n");
    spdlog::info("{} detections over {} images ({} skipped)", total, manifest.entries.size() - skipped.size(), skipped.size());

    if (!manifest.entries.empty() && skipped.size() == manifest.entries.size()) {
        spdlog::error("every image failed");
        return kInputError;
    }
    return skipped.empty() ? kOk : kPartial;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
    std::string mode = "classification";
    std::string preds;
    std::string truth;
    double conf = 0.20;
    double iou = 0.40;
    int sample = 0;
    int phase = 2;
};

int cmd_eval(const EvalArgs& a, const Globals& g, const json& run) {
    if (a.preds.empty() || a.truth.empty()) throw UsageError("--preds and --truth are required");
    if (a.mode != "classification" && a.mode != "detection") throw UsageError("--mode must be classification or detection");
    const wbc::Phase phase = parse_phase(a.phase);
    const auto& vocab = wbc::phase_vocabulary(phase);
    const wbc::MatchRule rule{a.conf, a.iou};
    rule.validate();

    const auto manifest = wbc::read_manifest_jsonl(read_file(a.truth));
    std::vector<wbc::ManifestEntry> entries = manifest.entries;
    if (a.sample > 0) {
        entries = wbc::sample_detection_testset(manifest, a.sample, g.seed);
        spdlog::info("sampled {} images ({} per class)", entries.size(), a.sample / 4);
    }

    std::set<std::string> known;
    for (const auto& e : manifest.entries) known.insert(e.image_id);
    std::map<std::string, std::vector<wbc::Detection>> by_image;
    std::set<std::string> unknown_ids;
    std::size_t n_preds = 0, excluded = 0;
    for (const auto& r : wbc::parse_records(read_file(a.preds))) {
        ++n_preds;
        if (!known.count(r.image_id)) {
            unknown_ids.insert(r.image_id);
            ++excluded;
            continue;
        }
        const auto cls = vocab.id_of(r.class_name);
        if (!cls || r.x_max <= r.x_min || r.y_max <= r.y_min) {
            spdlog::warn("excluding prediction '{} {}': unknown class or empty box", r.image_id, r.class_name);
            ++excluded;
            continue;
        }
        by_image[r.image_id].push_back({wbc::Box::from_corners(r.x_min, r.y_min, r.x_max, r.y_max), *cls,
                                        vocab.name(*cls), r.confidence, r.confidence, {}, phase, {}});
    }
    for (const auto& id : unknown_ids) spdlog::warn("predictions reference unknown image '{}'", id);

    wbc::ClassCounts counts;
    for (const auto& n : vocab.names()) counts[n];
    const wbc::EvalMode mode = a.mode == "classification" ? wbc::EvalMode::Classification : wbc::EvalMode::Detection;
    if (mode == wbc::EvalMode::Detection) {
        for (const auto& e : entries) {
            const auto truths = wbc::resolve_truth_objects(e, vocab);
            const auto it = by_image.find(e.image_id);
            const std::vector<wbc::Detection> none;
            wbc::accumulate(counts, wbc::match_detections(it == by_image.end() ? none : it->second, truths, rule));
        }
    } else {
        std::vector<std::pair<int, std::optional<int>>> outcomes;
        for (const auto& e : entries) {
            const auto truth = phase == wbc::Phase::Phase1 ? std::optional<int>(0) : vocab.id_of(e.label);
            if (!truth) {
                spdlog::warn("image {} has no subtype label; skipped", e.image_id);
                continue;
            }
            const auto it = by_image.find(e.image_id);
            const std::vector<wbc::Detection> none;
            outcomes.emplace_back(*truth, wbc::classify_image(it == by_image.end() ? none : it->second, rule));
        }
        const auto c = wbc::classification_counts(outcomes, static_cast<int>(vocab.size()));
        for (std::size_t k = 0; k < c.size(); ++k) counts[vocab.names()[k]] = c[k];
    }

    const auto report = wbc::build_report(counts, mode, vocab, run);
    write_atomic(fs::path(g.out) / "report.csv", wbc::report_csv(report));
    write_atomic(fs::path(g.out) / "report.json", wbc::report_json(report).dump(2) + "\n");
    write_atomic(fs::path(g.out) / "run.json", run.dump(2) + "\n");
    std::cout << wbc::format_table(report);

    if (n_preds > 0 && excluded * 100 > n_preds) {
        spdlog::warn("{} of {} predictions excluded", excluded, n_preds);
        return kPartial;
    }
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    auto logger = spdlog::stderr_color_mt("wbc");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%l] %v");

    CLI::App app{"White-blood-cell detection toolkit: anchors, two-phase detection, evaluation"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
    app.add_option("--config", g.config, "JSON config; command-line flags override its values");
    app.add_option("--out", g.out, "Output directory")->capture_default_str();
    app.add_option("--log-level", g.log_level, "trace|debug|info|warn|error|off")->capture_default_str();

    AnchorsArgs aa;
    auto* anchors = app.add_subcommand("anchors", "Cluster annotation boxes into anchor priors");
    Options ao(anchors);
    ao.add("annotations", aa.annotations, "Directory of VOC XML files");
    ao.add("k", aa.k, "Number of anchors");
    ao.add("input-size", aa.input_size, "Square network input size (pixels)");
    ao.add("distance", aa.distance, "iou | euclid");
    ao.add("max-iters", aa.max_iters, "Iteration cap");
    ao.add("class", aa.classes, "Only cluster objects of this class (repeatable)");
    ao.add("output", aa.output, "Anchor file name inside --out");

    DetectArgs da;
    auto* detect = app.add_subcommand("detect", "Run phase 1 or phase 2 detection over a manifest");
    Options dopt(detect);
    dopt.add("phase", da.phase, "1 (WBC localisation) or 2 (subtype detection)");
    dopt.add("backbone", da.backbone, "toy | tensors");
    dopt.add("tensor-dir", da.tensor_dir, "Directory of <image_id>.wbct files");
    dopt.add("anchors", da.anchors, "Anchor file (default: reference priors)");
    dopt.add("conf", da.conf, "Confidence threshold");
    dopt.add("nms", da.nms, "NMS IoU threshold");
    dopt.add("manifest", da.manifest, "JSON-lines manifest");
    dopt.add("input-size", da.input_size, "Square network input size (pixels)");
    dopt.add("phase1-detections", da.phase1_detections, "Phase-1 detections file used to anchor phase-2 boxes");
    dopt.add("workers", da.workers, "Parallel workers");
    dopt.add("toy-confidence", da.toy_confidence, "Confidence the toy backbone gives planted objects");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "Score detections against ground truth");
    Options eo(eval);
    eo.add("mode", ea.mode, "classification | detection");
    eo.add("preds", ea.preds, "Detections file");
    eo.add("truth", ea.truth, "JSON-lines ground-truth manifest");
    eo.add("conf", ea.conf, "Minimum confidence (exclusive)");
    eo.add("iou", ea.iou, "Minimum IoU (exclusive)");
    eo.add("sample", ea.sample, "Evaluate an equal-per-class random sample of this size (0 = all)");
    eo.add("phase", ea.phase, "Class vocabulary: 1 (WBC) or 2 (subtypes)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kInputError;
    }

    try {
        spdlog::set_level(spdlog::level::from_str(g.log_level));
        auto run_json = [&](const std::string& cmd, Options& o) {
            const json cfg = load_config(g.config, cmd);
            o.merge(cfg);
            if (cfg.contains("seed") && app.get_option("--seed")->count() == 0) g.seed = cfg["seed"].get<std::uint64_t>();
            json run = o.echo(cmd);
            run["seed"] = g.seed;
            return run;
        };
        if (anchors->parsed()) return cmd_anchors(aa, g, run_json("anchors", ao));
        if (detect->parsed()) return cmd_detect(da, g, run_json("detect", dopt));
        if (eval->parsed()) return cmd_eval(ea, g, run_json("eval", eo));
    } catch (const UsageError& e) {
        spdlog::error("{}", e.what());
        return kInputError;
    } catch (const wbc::Error& e) {
        spdlog::error("{}", e.what());
        return kInputError;
    } catch (const std::exception& e) {
        spdlog::error("internal error: {}", e.what());
        return kInternal;
    }
    return kInternal;
}
