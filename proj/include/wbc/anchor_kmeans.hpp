#ifndef WBC_ANCHOR_KMEANS_HPP_
#define WBC_ANCHOR_KMEANS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "wbc/detail/random.hpp"
#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/head_decoder.hpp"

namespace wbc {

enum class AnchorDistance : std::uint8_t { OneMinusIoU, Euclidean };

struct AnchorConfig {
    int k = 9;
    int max_iters = 300;
    double tol = 1e-6;  ///< stop once mean IoU improves by less than this
    std::uint64_t seed = 0;
    AnchorDistance distance = AnchorDistance::OneMinusIoU;
    std::vector<int> strides = kDefaultStrides;
};

struct AnchorResult {
    std::vector<AnchorBox> anchors;                ///< ascending by area
    std::map<int, std::vector<AnchorBox>> per_scale;  ///< scale index -> anchors of that scale
    double mean_iou = 0.0;
    int iterations_run = 0;
    std::vector<double> mean_iou_trace;  ///< one entry per accepted iteration, starting with the seeding
};

namespace detail {

inline bool anchor_less(const AnchorBox& a, const AnchorBox& b) {
    if (a.area() != b.area()) return a.area() < b.area();
    if (a.pw != b.pw) return a.pw < b.pw;
    return a.ph < b.ph;
}

inline double anchor_distance(AnchorDistance kind, const AnchorBox& p, const AnchorBox& c) {
    if (kind == AnchorDistance::OneMinusIoU) return 1.0 - centered_iou(p.pw, p.ph, c.pw, c.ph);
    return std::hypot(p.pw - c.pw, p.ph - c.ph);
}

inline double median_of(std::vector<double>& v) {
    const std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    if (n % 2 == 1) return v[n / 2];
    return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

class KMeans {
 public:
    KMeans(std::span<const AnchorBox> pts, const AnchorConfig& cfg) : pts_{pts}, cfg_{cfg}, rng_{cfg.seed} {}

    AnchorResult run() {
        seed_centroids();
        std::vector<int> assign = assign_points(centroids_);
        double miou = mean_best_iou(centroids_);
        AnchorResult res;
        res.mean_iou_trace.push_back(miou);

        for (int it = 1; it <= cfg_.max_iters; ++it) {
            std::vector<AnchorBox> next = update(assign);
            std::vector<int> next_assign = assign_points(next);
            const double next_miou = mean_best_iou(next);
            // Median updates do not maximise IoU exactly; refuse a step that lowers it.
            if (next_miou < miou) break;
            const bool moved = next_assign != assign || next != centroids_;
            centroids_ = std::move(next);
            assign = std::move(next_assign);
            res.mean_iou_trace.push_back(next_miou);
            res.iterations_run = it;
            const double gain = next_miou - miou;
            miou = next_miou;
            if (!moved || gain < cfg_.tol) break;
        }
        res.mean_iou = miou;
        res.anchors = centroids_;
        std::sort(res.anchors.begin(), res.anchors.end(), anchor_less);
        return res;
    }

 private:
    double dist(const AnchorBox& p, const AnchorBox& c) const { return anchor_distance(cfg_.distance, p, c); }

    void seed_centroids() {
        const std::size_t n = pts_.size();
        const auto k = static_cast<std::size_t>(cfg_.k);
        centroids_.clear();
        centroids_.push_back(pts_[uniform_index(rng_, n)]);

        std::vector<double> d2(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = dist(pts_[i], centroids_[0]);
            d2[i] = d * d;
        }
        const auto trials = 2 + static_cast<int>(std::log(static_cast<double>(k)));
        std::vector<double> cand_d2(n), best_d2(n);
        while (centroids_.size() < k) {
            const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
            double best_pot = std::numeric_limits<double>::infinity();
            std::size_t best_idx = 0;
            for (int t = 0; t < trials; ++t) {
                const std::size_t idx = total > 0.0 ? sample_weighted(d2, total) : uniform_index(rng_, n);
                double pot = 0.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = dist(pts_[i], pts_[idx]);
                    cand_d2[i] = std::min(d2[i], d * d);
                    pot += cand_d2[i];
                }
                if (pot < best_pot) {
                    best_pot = pot;
                    best_idx = idx;
                    best_d2.swap(cand_d2);
                }
            }
            centroids_.push_back(pts_[best_idx]);
            d2.swap(best_d2);
        }
    }

    std::size_t sample_weighted(const std::vector<double>& w, double total) {
        const double r = uniform01(rng_) * total;
        double acc = 0.0;
        std::size_t last_positive = 0;
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] <= 0.0) continue;
            acc += w[i];
            last_positive = i;
            if (r < acc) return i;
        }
        return last_positive;
    }

    std::vector<int> assign_points(const std::vector<AnchorBox>& cs) const {
        std::vector<int> a(pts_.size());
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t c = 0; c < cs.size(); ++c) {
                const double d = dist(pts_[i], cs[c]);
                if (d < best) {
                    best = d;
                    a[i] = static_cast<int>(c);
                }
            }
        }
        return a;
    }

    double mean_best_iou(const std::vector<AnchorBox>& cs) const {
        double sum = 0.0;
        for (const auto& p : pts_) {
            double best = 0.0;
            for (const auto& c : cs) best = std::max(best, centered_iou(p.pw, p.ph, c.pw, c.ph));
            sum += best;
        }
        return sum / static_cast<double>(pts_.size());
    }

    std::vector<AnchorBox> update(const std::vector<int>& assign) const {
        const auto k = static_cast<std::size_t>(cfg_.k);
        std::vector<std::vector<double>> ws(k), hs(k);
        for (std::size_t i = 0; i < pts_.size(); ++i) {
            ws[static_cast<std::size_t>(assign[i])].push_back(pts_[i].pw);
            hs[static_cast<std::size_t>(assign[i])].push_back(pts_[i].ph);
        }
        std::vector<AnchorBox> next(k);
        std::vector<std::size_t> empty;
        for (std::size_t c = 0; c < k; ++c) {
            if (ws[c].empty()) {
                empty.push_back(c);
                continue;
            }
            if (cfg_.distance == AnchorDistance::OneMinusIoU) {
                next[c] = {median_of(ws[c]), median_of(hs[c])};
            } else {
                const double m = static_cast<double>(ws[c].size());
                next[c] = {std::accumulate(ws[c].begin(), ws[c].end(), 0.0) / m,
                           std::accumulate(hs[c].begin(), hs[c].end(), 0.0) / m};
            }
        }
        if (!empty.empty()) {
            // Reseed from the points farthest from their current centroid.
            std::vector<std::size_t> order(pts_.size());
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::vector<double> far(pts_.size());
            for (std::size_t i = 0; i < pts_.size(); ++i)
                far[i] = dist(pts_[i], centroids_[static_cast<std::size_t>(assign[i])]);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return far[a] > far[b]; });
            for (std::size_t e = 0; e < empty.size(); ++e) next[empty[e]] = pts_[order[e % order.size()]];
        }
        return next;
    }

    std::span<const AnchorBox> pts_;
    const AnchorConfig& cfg_;
    Rng rng_;
    std::vector<AnchorBox> centroids_;
};

}  // namespace detail

/// Groups anchors by scale: sorted by area, the largest group goes to the largest
/// stride (coarsest grid). Keys are indices into `strides`.
inline std::map<int, std::vector<AnchorBox>> assign_to_scales(std::span<const AnchorBox> anchors,
                                                              std::span<const int> strides) {
    if (strides.empty() || anchors.size() % strides.size() != 0)
        throw ConfigError("assign_to_scales: " + std::to_string(anchors.size()) +
                          " anchors cannot be split evenly across " + std::to_string(strides.size()) + " scales");
    std::vector<AnchorBox> sorted(anchors.begin(), anchors.end());
    std::sort(sorted.begin(), sorted.end(), detail::anchor_less);

    std::vector<int> by_stride(strides.size());
    std::iota(by_stride.begin(), by_stride.end(), 0);
    std::stable_sort(by_stride.begin(), by_stride.end(),
                     [&](int a, int b) { return strides[static_cast<std::size_t>(a)] < strides[static_cast<std::size_t>(b)]; });

    const std::size_t per = sorted.size() / strides.size();
    std::map<int, std::vector<AnchorBox>> out;
    for (std::size_t g = 0; g < by_stride.size(); ++g)
        out[by_stride[g]] = std::vector<AnchorBox>(sorted.begin() + static_cast<std::ptrdiff_t>(g * per),
                                                   sorted.begin() + static_cast<std::ptrdiff_t>((g + 1) * per));
    return out;
}

/// Flattens a per-scale assignment into the HeadSpec anchor order (scale-major).
inline std::vector<AnchorBox> head_anchor_order(const std::map<int, std::vector<AnchorBox>>& per_scale) {
    std::vector<AnchorBox> out;
    for (const auto& [scale, group] : per_scale) out.insert(out.end(), group.begin(), group.end());
    return out;
}

inline AnchorResult cluster_anchors(std::span<const AnchorBox> dims, const AnchorConfig& cfg) {
    if (cfg.k < 1) throw ConfigError("cluster_anchors: k must be >= 1");
    if (cfg.max_iters < 0) throw ConfigError("cluster_anchors: max_iters must be >= 0");
    if (cfg.strides.empty() || cfg.k % static_cast<int>(cfg.strides.size()) != 0)
        throw ConfigError("cluster_anchors: k=" + std::to_string(cfg.k) + " is not a multiple of the " +
                          std::to_string(cfg.strides.size()) + " detection scales");
    if (dims.size() < static_cast<std::size_t>(cfg.k))
        throw InsufficientDataError("cluster_anchors: need at least k=" + std::to_string(cfg.k) + " boxes, got " +
                                    std::to_string(dims.size()));
    for (std::size_t i = 0; i < dims.size(); ++i) {
        const auto& d = dims[i];
        if (!(d.pw > 0.0) || !(d.ph > 0.0) || !std::isfinite(d.pw) || !std::isfinite(d.ph))
            throw InputError("cluster_anchors: box " + std::to_string(i) + " has non-positive dimensions");
    }
    AnchorResult res = detail::KMeans(dims, cfg).run();
    res.per_scale = assign_to_scales(res.anchors, cfg.strides);
    return res;
}

// ---------------------------------------------------------------------------
// Anchor text file: '#' comment lines, then one "pw,ph" pair per line.

inline std::string write_anchor_file(std::span<const AnchorBox> anchors, std::span<const std::string> header) {
    std::string out;
    for (const auto& line : header) out += "# " + line + "\n";
    std::vector<AnchorBox> sorted(anchors.begin(), anchors.end());
    std::sort(sorted.begin(), sorted.end(), detail::anchor_less);
    char buf[64];
    for (const auto& a : sorted) {
        std::snprintf(buf, sizeof buf, "%.3f,%.3f\n", a.pw, a.ph);
        out += buf;
    }
    return out;
}

inline std::vector<AnchorBox> read_anchor_file(const std::string& text) {
    std::vector<AnchorBox> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        AnchorBox a;
        char comma = 0;
        std::istringstream ls(line.substr(first));
        if (!(ls >> a.pw >> comma >> a.ph) || comma != ',' || !(a.pw > 0.0) || !(a.ph > 0.0))
            throw SchemaError("anchor file line " + std::to_string(lineno) + ": expected 'pw,ph'");
        out.push_back(a);
    }
    return out;
}

}  // namespace wbc

#endif  // WBC_ANCHOR_KMEANS_HPP_
