// Acceptance suite: one line per criterion, exit status 0 only when all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "matching_cases.hpp"
#include "wbc/wbc.hpp"

using namespace wbc;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;

    void fail(const std::string& why) {
        if (pass) detail = why;
        pass = false;
    }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// ---------------------------------------------------------------------------

Outcome decode_round_trip() {
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(1001);
    std::uniform_real_distribution<double> t(-6, 6), anchor(4, 400);
    std::uniform_int_distribution<int> stride_pick(0, 2), classes(1, 10);
    const int strides[] = {32, 16, 8};
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        const int stride = strides[stride_pick(rng)];
        std::uniform_int_distribution<int> cell(0, 416 / stride - 1);
        std::vector<double> v(static_cast<std::size_t>(5 + classes(rng)));
        for (auto& x : v) x = t(rng);
        const AnchorBox a{anchor(rng), anchor(rng)};
        const auto back = encode_cell(decode_cell(v, {cell(rng), cell(rng)}, a, stride), a, stride);
        for (std::size_t k = 0; k < v.size(); ++k)
            worst = std::max(worst, std::abs(back[k] - v[k]) / std::max(1.0, std::abs(v[k])));
    }
    if (!(worst <= 1e-6)) o.fail("max relative error " + fmt("%.3g", worst));

    // zero input: sigma(0) objectness, cell-midpoint centres, anchor-sized boxes
    for (Phase p : {Phase::Phase1, Phase::Phase2}) {
        const HeadSpec spec = make_phase_head(p);
        for (int s = 0; s < spec.num_scales(); ++s) {
            const int n = spec.grid_size(s), st = spec.stride(s);
            for (const auto& d : decode_grid(GridTensor::zeros(s, n, n, spec.depth()), spec)) {
                if (d.objectness != 0.5 || d.box.cx() != (d.cell.x + 0.5) * st || d.box.cy() != (d.cell.y + 0.5) * st ||
                    d.box.w() != spec.anchor(s, d.anchor_index).pw || d.box.h() != spec.anchor(s, d.anchor_index).ph) {
                    o.fail("zero tensor decoded off-midpoint at scale " + std::to_string(s));
                }
            }
        }
    }
    const double secs = seconds_since(t0);
    if (secs >= 5.0) o.fail("took " + fmt("%.2f", secs) + " s");
    if (o.pass) o.detail = "max rel err " + fmt("%.2g", worst) + " over 10000 slots, " + fmt("%.3f", secs) + " s";
    return o;
}

Outcome depth_contract() {
    Outcome o;
    int accepted = 0, rejected = 0;
    for (int c = 1; c <= 10; ++c) {
        for (int d = 0; d <= 3 * (5 + 10) + 20; ++d) {
            bool ok = true;
            try {
                HeadSpec(c, 3, kDefaultStrides, kDefaultInputSize, kReferenceAnchors, d);
            } catch (const ShapeError&) {
                ok = false;
            }
            const bool want = d == 3 * (5 + c);
            if (ok != want) o.fail("c=" + std::to_string(c) + " depth " + std::to_string(d) + (ok ? " accepted" : " rejected"));
            (ok ? accepted : rejected)++;
        }
    }
    if (make_phase_head(Phase::Phase1).depth() != 18) o.fail("phase-1 head depth is not 18");
    if (make_phase_head(Phase::Phase2).depth() != 27) o.fail("phase-2 head depth is not 27");
    if (o.pass)
        o.detail = std::to_string(accepted) + " accepted, " + std::to_string(rejected) +
                   " rejected for c in [1,10]; 3x6=18 and 3x9=27";
    return o;
}

Outcome sigma_confinement() {
    Outcome o;
    std::mt19937_64 rng(1003);
    std::uniform_real_distribution<double> wide(-60, 60), mid(-4, 4);
    std::uniform_int_distribution<int> stride_pick(0, 2), kind(0, 3);
    const int strides[] = {32, 16, 8};
    const double extremes[] = {1e6, -1e6, 1e308, -1e308};
    for (int i = 0; i < 10000; ++i) {
        const int stride = strides[stride_pick(rng)];
        const int n = 416 / stride;
        std::uniform_int_distribution<int> cell(0, n - 1);
        std::vector<double> v(9);
        for (auto& x : v) x = mid(rng);
        for (int k = 0; k < 2; ++k) {
            switch (kind(rng)) {
                case 0: v[static_cast<std::size_t>(k)] = mid(rng); break;
                case 1: v[static_cast<std::size_t>(k)] = wide(rng); break;
                default: v[static_cast<std::size_t>(k)] = extremes[static_cast<std::size_t>(kind(rng))];
            }
        }
        const CellIndex c{cell(rng), cell(rng)};
        const auto d = decode_cell(v, c, {30, 30}, stride);
        const bool inside = d.box.cx() >= c.x * stride && d.box.cx() < (c.x + 1) * stride && d.box.cy() >= c.y * stride &&
                            d.box.cy() < (c.y + 1) * stride;
        if (!inside) {
            o.fail("slot " + std::to_string(i) + " centre left its cell");
            break;
        }
    }
    if (o.pass) o.detail = "10000 slots, every centre inside its cell";
    return o;
}

Outcome anchor_kmeans() {
    Outcome o;
    const std::vector<AnchorBox> gens = {{10, 13}, {16, 30},   {33, 23},   {30, 61},  {62, 45},
                                         {59, 119}, {116, 90}, {156, 198}, {373, 326}};
    std::mt19937_64 rng(1004);
    std::normal_distribution<double> n01(0, 1);
    std::vector<AnchorBox> dims;
    for (const auto& g : gens) {
        const double s = 0.01 * 0.5 * (g.pw + g.ph);
        for (int i = 0; i < 200; ++i) dims.push_back({g.pw + s * n01(rng), g.ph + s * n01(rng)});
    }
    std::shuffle(dims.begin(), dims.end(), rng);

    AnchorConfig cfg;
    cfg.seed = 17;
    const auto t0 = Clock::now();
    const auto r = cluster_anchors(dims, cfg);
    const double secs = seconds_since(t0);
    const auto again = cluster_anchors(dims, cfg);

    double worst = 0;
    for (const auto& g : gens) {
        double best = INFINITY;
        for (const auto& a : r.anchors)
            best = std::min(best, std::max(std::abs(a.pw - g.pw) / g.pw, std::abs(a.ph - g.ph) / g.ph));
        worst = std::max(worst, best);
    }
    if (!(worst < 0.05)) o.fail("worst centroid error " + fmt("%.3f", worst));
    for (std::size_t i = 1; i < r.mean_iou_trace.size(); ++i)
        if (r.mean_iou_trace[i] < r.mean_iou_trace[i - 1]) o.fail("mean IoU decreased at iteration " + std::to_string(i));
    if (again.anchors != r.anchors || again.mean_iou_trace != r.mean_iou_trace) o.fail("not deterministic for a fixed seed");
    if (secs >= 2.0) o.fail("took " + fmt("%.2f", secs) + " s");
    if (o.pass)
        o.detail = "worst rel err " + fmt("%.4f", worst) + ", " + std::to_string(r.mean_iou_trace.size()) +
                   "-step monotone trace, mean IoU " + fmt("%.4f", r.mean_iou) + ", " + fmt("%.3f", secs) + " s";
    return o;
}

// The greedy result is the unique subset S where every box is in S exactly when
// no higher-ranked same-class member of S overlaps it above the threshold.
std::vector<unsigned> nms_fixpoints(const std::vector<Detection>& d, const std::vector<int>& rank, double thr) {
    const auto n = d.size();
    std::vector<unsigned> blockers(n, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && rank[j] < rank[i] && d[i].class_id == d[j].class_id && iou(d[i].box, d[j].box) > thr)
                blockers[i] |= 1u << j;
    std::vector<unsigned> out;
    for (unsigned s = 0; s < (1u << n); ++s) {
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) ok = ((s >> i) & 1u) == ((s & blockers[i]) == 0 ? 1u : 0u);
        if (ok) out.push_back(s);
    }
    return out;
}

Outcome nms_properties() {
    Outcome o;
    const PostprocessConfig cfg{};
    std::mt19937_64 rng(1005);
    std::uniform_int_distribution<int> size(0, 50), cls(0, 1);
    std::uniform_real_distribution<double> conf(0.2, 1.0);
    std::size_t oracle_instances = 0, orderings = 0;
    for (int img = 0; img < 1000 && o.pass; ++img) {
        const int n = size(rng);
        // small images are packed tightly so suppression chains are common
        const double span = n <= 8 ? 60 : 300;
        std::uniform_real_distribution<double> pos(0, span), ext(15, 60);
        std::vector<Detection> dets;
        for (int i = 0; i < n; ++i)
            dets.push_back({Box::from_center(pos(rng), pos(rng), ext(rng), ext(rng), Frame::network()), cls(rng), "",
                            conf(rng), 0.0, {}, Phase::Phase2, {0, 0, 0, i}});
        const auto kept = nms(dets, cfg);
        for (std::size_t i = 0; i < kept.size(); ++i)
            for (std::size_t j = i + 1; j < kept.size(); ++j)
                if (kept[i].class_id == kept[j].class_id && iou(kept[i].box, kept[j].box) > cfg.nms_iou_threshold)
                    o.fail("image " + std::to_string(img) + ": surviving same-class pair above threshold");
        const auto twice = nms(kept, cfg);
        bool same = twice.size() == kept.size();
        for (std::size_t i = 0; same && i < kept.size(); ++i)
            same = twice[i].box == kept[i].box && twice[i].confidence == kept[i].confidence && twice[i].slot == kept[i].slot;
        if (!same) o.fail("image " + std::to_string(img) + ": nms not idempotent");

        if (n > 8) continue;
        ++oracle_instances;
        std::vector<int> perm(static_cast<std::size_t>(n));
        std::iota(perm.begin(), perm.end(), 0);
        do {
            // perm[i] is box i's rank; confidences strictly decrease with rank
            for (int i = 0; i < n; ++i) dets[static_cast<std::size_t>(i)].confidence = 0.9 - 0.05 * perm[static_cast<std::size_t>(i)];
            const auto fix = nms_fixpoints(dets, perm, cfg.nms_iou_threshold);
            unsigned got = 0;
            for (const auto& k : nms(dets, cfg)) got |= 1u << k.slot.anchor_index;
            ++orderings;
            if (fix.size() != 1 || fix[0] != got) {
                o.fail("image " + std::to_string(img) + ": disagrees with subset oracle");
                break;
            }
        } while (std::next_permutation(perm.begin(), perm.end()));
    }
    if (o.pass)
        o.detail = "1000 images; oracle agreed on " + std::to_string(oracle_instances) + " small images across " +
                   std::to_string(orderings) + " confidence orderings";
    return o;
}

Outcome metrics_oracle() {
    Outcome o;
    std::mt19937_64 rng(1006);
    std::uniform_int_distribution<std::uint64_t> small(0, 5), large(0, 1000000);
    std::uniform_int_distribution<int> coin(0, 1);
    double worst = 0;
    for (int i = 0; i < 10000; ++i) {
        auto draw = [&] { return coin(rng) ? small(rng) : large(rng); };
        const ConfusionCounts c{draw(), draw(), draw(), draw()};
        const Metrics m = metrics(c);
        // rational forms: reduce each ratio of integers once
        auto q = [](std::uint64_t num, std::uint64_t den) {
            return den == 0 ? 0.0L : static_cast<long double>(num) / static_cast<long double>(den);
        };
        const std::uint64_t all = c.tp + c.tn + c.fp + c.fn;
        const long double acc = q(c.tp + c.tn, all);
        const long double prec = q(c.tp, c.tp + c.fp);
        const long double rec = q(c.tp, c.tp + c.fn);
        const long double f1 = c.tp == 0 ? 0.0L : q(2 * c.tp, 2 * c.tp + c.fp + c.fn);
        worst = std::max({worst, static_cast<double>(std::abs(acc - m.accuracy)), static_cast<double>(std::abs(prec - m.precision)),
                          static_cast<double>(std::abs(rec - m.recall)), static_cast<double>(std::abs(f1 - m.f1))});
        if (m.accuracy_degenerate != (all == 0) || m.precision_degenerate != (c.tp + c.fp == 0) ||
            m.recall_degenerate != (c.tp + c.fn == 0) || m.f1_degenerate != (c.tp == 0))
            o.fail("degenerate flags wrong for tuple " + std::to_string(i));
        if (m.precision + m.recall > 0 && std::abs(m.f1 * (m.precision + m.recall) - 2 * m.precision * m.recall) > 1e-12)
            o.fail("harmonic-mean identity broken for tuple " + std::to_string(i));
    }
    if (!(worst <= 1e-12)) o.fail("max deviation " + fmt("%.3g", worst));
    if (o.pass) o.detail = "10000 tuples, max deviation " + fmt("%.2g", worst) + ", harmonic identity holds";
    return o;
}

Outcome matching_table() {
    Outcome o;
    const auto cases = testing::matching_cases();
    for (const auto& c : cases) {
        const auto preds = testing::case_predictions(c);
        const auto truths = testing::case_truths(c);
        const std::string diff = testing::check_case(c, match_detections(preds, truths, {}));
        if (!diff.empty()) o.fail(c.name + ": " + diff);
    }
    if (o.pass) o.detail = std::to_string(cases.size()) + " crafted cases match the contract";
    return o;
}

Outcome dataset_fixture() {
    Outcome o;
    const auto root = testing::scratch_dir("acceptance_dataset");
    testing::make_class_tree(root, "TEST", reference_counts(Split::Test));
    const auto m = build_manifest(root, Split::Test);
    if (m.per_class_counts != reference_counts(Split::Test)) o.fail("per-class counts differ from 574/620/620/616");
    if (m.total() != 2430 || m.entries.size() != 2430) o.fail("total " + std::to_string(m.total()) + " != 2430");

    std::mt19937_64 rng(1008);
    const std::vector<std::string> names = {"WBC", "RBC", "Platelets"};
    for (int i = 0; i < 200; ++i) {
        std::string objs;
        std::uniform_int_distribution<int> n(0, 6), x(0, 599), y(0, 439), e(1, 40), k(0, 2);
        for (int j = n(rng); j > 0; --j) {
            const int x0 = x(rng), y0 = y(rng);
            objs += testing::voc_object(names[static_cast<std::size_t>(k(rng))], x0, y0, x0 + e(rng), y0 + e(rng));
        }
        const auto a = parse_voc(testing::voc_xml("img" + std::to_string(i) + ".jpg", 640, 480, objs));
        const std::string text = serialize_voc(a);
        const auto b = parse_voc(text);
        if (!(a == b) || serialize_voc(b) != text) {
            o.fail("VOC round trip differs for document " + std::to_string(i));
            break;
        }
    }

    const auto sample = sample_detection_testset(m, 200, 1);
    std::map<std::string, int> per;
    for (const auto& e : sample) ++per[e.label];
    for (const auto& cls : ClassVocabulary::phase2().names())
        if (per[cls] != 50) o.fail(cls + " sampled " + std::to_string(per[cls]) + " times");
    if (o.pass) o.detail = "2430 = 574+620+620+616, 200 VOC round trips exact, sample of 200 has 50 per class";
    return o;
}

struct EndToEnd {
    std::string phase1_records, phase2_records;
    bool boxes_ok = true, classes_ok = true;
    double min_iou = 1.0;
    EvalReport det_report, cls_report;
};

EndToEnd run_end_to_end() {
    const auto& subtypes = ClassVocabulary::phase2().names();
    DatasetManifest m;
    m.split = Split::Test;
    std::vector<Box> truths;
    for (int i = 0; i < 25; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "BloodImage_%05d", i);
        const Box b = Box::from_center(70 + 7.3 * i, 60 + 5.1 * i, 48 + 3 * (i % 7), 52 + 2 * (i % 5));
        truths.push_back(b);
        const std::string label = subtypes[static_cast<std::size_t>(i % 4)];
        m.entries.push_back({id, "", label, {320, 240}, Annotation{id, 320, 240, {{"WBC", b}}}, ""});
    }
    m.recount();

    auto plant = [&](Phase p) {
        auto tb = std::make_shared<ToyBackbone>(2024);
        const auto& vocab = phase_vocabulary(p);
        for (const auto& e : m.entries) {
            const LetterboxMap map(320, 240, kDefaultInputSize);
            for (const auto& obj : resolve_truth_objects(e, vocab))
                tb->plant(e.image_id, {map.forward(obj.box), *vocab.id_of(obj.class_name), 0.95});
        }
        return PhaseConfig(p, make_phase_head(p), PostprocessConfig{}, tb);
    };

    EndToEnd r;
    const auto p1 = run_phase1(m, plant(Phase::Phase1));
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
        const auto it = p1.images.find(m.entries[i].image_id);
        if (it == p1.images.end() || it->second.boxes.size() != 1) {
            r.boxes_ok = false;
            continue;
        }
        const double q = iou(it->second.boxes[0].box, truths[i]);
        r.min_iou = std::min(r.min_iou, q);
        if (q < 0.9) r.boxes_ok = false;
        for (const auto& b : it->second.boxes)
            r.phase1_records += format_record(to_record(it->first, {b.box, 0, "WBC", b.confidence, b.confidence, {}, Phase::Phase1, {}})) + "\n";
    }

    auto cfg2 = plant(Phase::Phase2);
    cfg2.workers = 4;
    const auto p2 = run_phase2(m, cfg2, &p1);
    ClassCounts det_counts;
    std::vector<std::pair<int, std::optional<int>>> outcomes;
    for (const auto& n : subtypes) det_counts[n];
    for (const auto& e : m.entries) {
        const auto it = p2.images.find(e.image_id);
        std::vector<Detection> dets;
        if (it != p2.images.end())
            for (const auto& d : it->second.detections) {
                dets.push_back(d.detection);
                if (d.unanchored()) r.classes_ok = false;
                r.phase2_records += format_record(to_record(e.image_id, d.detection)) + "\n";
            }
        if (dets.size() != 1 || dets[0].class_name != e.label) r.classes_ok = false;
        accumulate(det_counts, match_detections(dets, resolve_truth_objects(e, ClassVocabulary::phase2()), {}));
        outcomes.emplace_back(*ClassVocabulary::phase2().id_of(e.label), classify_image(dets));
    }
    r.det_report = build_report(det_counts, EvalMode::Detection, ClassVocabulary::phase2());
    ClassCounts cls_counts;
    const auto cc = classification_counts(outcomes, 4);
    for (std::size_t k = 0; k < 4; ++k) cls_counts[subtypes[k]] = cc[k];
    r.cls_report = build_report(cls_counts, EvalMode::Classification, ClassVocabulary::phase2());
    return r;
}

bool all_ones(const EvalReport& r) {
    for (const auto& row : r.rows)
        if (row.metrics.f1 != 1.0 || row.metrics.precision != 1.0 || row.metrics.recall != 1.0) return false;
    return r.overall_accuracy == 1.0;
}

Outcome end_to_end() {
    Outcome o;
    const auto t0 = Clock::now();
    const auto a = run_end_to_end();
    const auto b = run_end_to_end();
    const double secs = seconds_since(t0) / 2;
    if (!a.boxes_ok) o.fail("phase 1 missed a plant (min IoU " + fmt("%.3f", a.min_iou) + ")");
    if (!a.classes_ok) o.fail("phase 2 missed or mislabelled a subtype");
    if (!all_ones(a.det_report) || !all_ones(a.cls_report)) o.fail("report is not all ones");
    if (a.phase1_records != b.phase1_records || a.phase2_records != b.phase2_records) o.fail("runs differ");
    if (secs >= 10.0) o.fail("took " + fmt("%.2f", secs) + " s");
    if (o.pass)
        o.detail = "25/25 boxes (min IoU " + fmt("%.4f", a.min_iou) + "), 25/25 subtypes, all-ones report, repeatable, " +
                   fmt("%.3f", secs) + " s per run";
    return o;
}

Outcome tensor_file() {
    Outcome o;
    std::mt19937_64 rng(1010);
    std::uniform_real_distribution<float> u(-10, 10);
    std::vector<std::uint8_t> last;
    for (Phase p : {Phase::Phase1, Phase::Phase2}) {
        const HeadSpec spec = make_phase_head(p);
        std::vector<GridTensor> t;
        for (int s = 0; s < spec.num_scales(); ++s) {
            auto g = GridTensor::zeros(s, spec.grid_size(s), spec.grid_size(s), spec.depth());
            for (auto& v : g.values()) v = u(rng);
            t.push_back(std::move(g));
        }
        const auto bytes = write_tensor_file(t);
        const auto back = read_tensor_file(bytes, spec);
        if (!(back == t) || write_tensor_file(back) != bytes) o.fail("round trip not bit-exact");
        last = bytes;
    }
    std::uniform_int_distribution<std::size_t> bit(0, last.size() * 8 - 1);
    int detected = 0;
    for (int i = 0; i < 1000; ++i) {
        auto bad = last;
        const std::size_t b = bit(rng);
        bad[b / 8] ^= static_cast<std::uint8_t>(1u << (b % 8));
        try {
            read_tensor_file(bad);
        } catch (const TensorFileError&) {
            ++detected;
        }
    }
    if (detected != 1000) o.fail(std::to_string(1000 - detected) + " of 1000 bit flips went undetected");
    if (o.pass) o.detail = "phase-1 and phase-2 files round-trip bit-exactly; 1000/1000 bit flips detected";
    return o;
}

}  // namespace

int main() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"decode round trip", decode_round_trip},
        {"kernel depth contract", depth_contract},
        {"sigmoid confinement", sigma_confinement},
        {"anchor k-means", anchor_kmeans},
        {"nms", nms_properties},
        {"metrics", metrics_oracle},
        {"matching rules", matching_table},
        {"dataset", dataset_fixture},
        {"end to end", end_to_end},
        {"tensor file", tensor_file},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        std::printf("%s  [%2zu] %-22s %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), o.detail.c_str());
        std::fflush(stdout);
        failed += !o.pass;
    }
    std::printf("%zu/%zu criteria passed\n", criteria.size() - static_cast<std::size_t>(failed), criteria.size());
    return failed == 0 ? 0 : 1;
}
