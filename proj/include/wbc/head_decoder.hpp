#ifndef WBC_HEAD_DECODER_HPP_
#define WBC_HEAD_DECODER_HPP_

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"

namespace wbc {

/// Anchor prior in network-input pixels.
struct AnchorBox {
    double pw = 0.0;
    double ph = 0.0;

    double area() const noexcept { return pw * ph; }
    friend bool operator==(const AnchorBox&, const AnchorBox&) = default;
};

/// Number of raw attributes per anchor slot besides the class scores: t_x, t_y, t_w, t_h, t_obj.
inline constexpr int kBoxAttributes = 5;

inline constexpr int kDefaultInputSize = 416;
inline const std::vector<int> kDefaultStrides = {32, 16, 8};

/// Configuration of the YOLOv3 detection head.
///
/// Scale `s` has stride `strides[s]` and uses anchors
/// `anchors[s*b .. s*b + b)`. Channel depth of every scale is b*(5+c).
class HeadSpec {
 public:
    /// \param declared_depth  depth of the kernel the caller intends to pair with this
    ///                        head; construction fails unless it equals b*(5+c).
    HeadSpec(int num_classes, int boxes_per_cell, std::vector<int> strides, int input_size,
             std::vector<AnchorBox> anchors, std::optional<int> declared_depth = std::nullopt)
        : num_classes_{num_classes}, boxes_per_cell_{boxes_per_cell}, strides_{std::move(strides)},
          input_size_{input_size}, anchors_{std::move(anchors)} {
        if (num_classes_ < 1) throw ConfigError("head: num_classes must be >= 1");
        if (boxes_per_cell_ < 1) throw ConfigError("head: boxes_per_cell must be >= 1");
        if (strides_.empty()) throw ConfigError("head: at least one stride is required");
        if (input_size_ <= 0) throw ConfigError("head: input_size must be positive");
        for (int s : strides_) {
            if (s <= 0 || input_size_ % s != 0)
                throw ConfigError("head: input size " + std::to_string(input_size_) +
                                  " is not divisible by stride " + std::to_string(s));
        }
        const auto want = static_cast<std::size_t>(boxes_per_cell_) * strides_.size();
        if (anchors_.size() != want)
            throw ConfigError("head: expected " + std::to_string(want) + " anchors, got " +
                              std::to_string(anchors_.size()));
        for (const auto& a : anchors_) {
            if (!(a.pw > 0.0) || !(a.ph > 0.0) || !std::isfinite(a.pw) || !std::isfinite(a.ph))
                throw ConfigError("head: anchor dimensions must be positive and finite");
        }
        if (declared_depth && *declared_depth != depth())
            throw ShapeError("head: kernel depth mismatch, expected " + std::to_string(depth()) + " (" +
                             std::to_string(boxes_per_cell_) + "x" + std::to_string(kBoxAttributes + num_classes_) +
                             "), got " + std::to_string(*declared_depth));
    }

    int num_classes() const noexcept { return num_classes_; }
    int boxes_per_cell() const noexcept { return boxes_per_cell_; }
    int input_size() const noexcept { return input_size_; }
    const std::vector<int>& strides() const noexcept { return strides_; }
    const std::vector<AnchorBox>& anchors() const noexcept { return anchors_; }
    int num_scales() const noexcept { return static_cast<int>(strides_.size()); }

    int attributes() const noexcept { return kBoxAttributes + num_classes_; }
    int depth() const noexcept { return boxes_per_cell_ * attributes(); }

    int stride(int scale) const { return strides_.at(static_cast<std::size_t>(scale)); }
    int grid_size(int scale) const { return input_size_ / stride(scale); }

    const AnchorBox& anchor(int scale, int slot) const {
        return anchors_.at(static_cast<std::size_t>(scale * boxes_per_cell_ + slot));
    }

 private:
    int num_classes_;
    int boxes_per_cell_;
    std::vector<int> strides_;
    int input_size_;
    std::vector<AnchorBox> anchors_;
};

/// One scale's raw head output, row-major [cell_y][cell_x][anchor][attribute].
class GridTensor {
 public:
    GridTensor(int scale_index, int grid_h, int grid_w, int depth, std::vector<float> values)
        : scale_index_{scale_index}, grid_h_{grid_h}, grid_w_{grid_w}, depth_{depth}, values_{std::move(values)} {
        if (grid_h <= 0 || grid_w <= 0 || depth <= 0)
            throw ShapeError("grid tensor dimensions must be positive");
        const auto want = static_cast<std::size_t>(grid_h) * grid_w * depth;
        if (values_.size() != want)
            throw ShapeError("grid tensor holds " + std::to_string(values_.size()) + " values, expected " +
                             std::to_string(want));
    }

    static GridTensor zeros(int scale_index, int grid_h, int grid_w, int depth) {
        return GridTensor(scale_index, grid_h, grid_w, depth,
                          std::vector<float>(static_cast<std::size_t>(grid_h) * grid_w * depth, 0.0f));
    }

    int scale_index() const noexcept { return scale_index_; }
    int grid_h() const noexcept { return grid_h_; }
    int grid_w() const noexcept { return grid_w_; }
    int depth() const noexcept { return depth_; }
    std::span<const float> values() const noexcept { return values_; }
    std::span<float> values() noexcept { return values_; }

    /// Attributes of one cell (all anchor slots), length == depth.
    std::span<const float> cell(int y, int x) const {
        return std::span<const float>(values_).subspan(offset(y, x), static_cast<std::size_t>(depth_));
    }
    std::span<float> cell(int y, int x) {
        return std::span<float>(values_).subspan(offset(y, x), static_cast<std::size_t>(depth_));
    }

    friend bool operator==(const GridTensor&, const GridTensor&) = default;

 private:
    std::size_t offset(int y, int x) const {
        if (y < 0 || y >= grid_h_ || x < 0 || x >= grid_w_) throw ContractError("grid tensor cell out of range");
        return (static_cast<std::size_t>(y) * grid_w_ + x) * depth_;
    }

    int scale_index_, grid_h_, grid_w_, depth_;
    std::vector<float> values_;
};

struct CellIndex {
    int x = 0;
    int y = 0;
    friend bool operator==(const CellIndex&, const CellIndex&) = default;
};

/// A decoded head slot before thresholding.
struct RawDetection {
    Box box;  ///< PixelNetwork frame
    double objectness = 0.0;
    std::vector<double> class_probs;
    int scale_index = 0;
    CellIndex cell;
    int anchor_index = 0;
};

/// Logistic function whose result stays strictly inside (0, 1) for every finite input.
inline double sigmoid(double t) {
    double s;
    if (t >= 0.0) {
        s = 1.0 / (1.0 + std::exp(-t));
    } else {
        const double e = std::exp(t);
        s = e / (1.0 + e);
    }
    return std::clamp(s, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

inline double logit(double p) {
    if (!(p > 0.0) || !(p < 1.0))
        throw DomainError("logit undefined for probability " + std::to_string(p));
    return std::log(p / (1.0 - p));
}

namespace detail {

// Position `cell + frac` in grid units scaled to pixels, kept inside [cell*stride, (cell+1)*stride).
inline double confined_center(int cell, double frac, int stride) {
    const double lo = static_cast<double>(cell) * stride;
    const double hi = static_cast<double>(cell + 1) * stride;
    const double v = (cell + frac) * stride;
    if (v >= hi) return std::nextafter(hi, lo);
    if (v < lo) return lo;
    return v;
}

inline double positive_extent(double prior, double t) {
    const double v = prior * std::exp(t);
    return std::clamp(v, std::numeric_limits<double>::min(), std::numeric_limits<double>::max());
}

}  // namespace detail

/// Decodes one anchor slot:
///   B_x = (sigma(t_x) + C_x) * stride,  B_y = (sigma(t_y) + C_y) * stride,
///   B_w = P_w * exp(t_w),               B_h = P_h * exp(t_h),
/// with objectness and class scores passed through independent sigmoids.
template<typename T>
RawDetection decode_cell(std::span<const T> t, CellIndex cell, const AnchorBox& anchor, int stride) {
    if (t.size() < static_cast<std::size_t>(kBoxAttributes + 1))
        throw DecodeError("decode_cell: slot needs at least 6 attributes, got " + std::to_string(t.size()));
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (!std::isfinite(static_cast<double>(t[i])))
            throw DecodeError("decode_cell: non-finite attribute at index " + std::to_string(i));
    }
    const double bx = detail::confined_center(cell.x, sigmoid(t[0]), stride);
    const double by = detail::confined_center(cell.y, sigmoid(t[1]), stride);
    const double bw = detail::positive_extent(anchor.pw, t[2]);
    const double bh = detail::positive_extent(anchor.ph, t[3]);

    RawDetection d{Box::from_center(bx, by, bw, bh, Frame::network()), sigmoid(t[4]), {}, 0, cell, 0};
    d.class_probs.reserve(t.size() - kBoxAttributes);
    for (std::size_t i = kBoxAttributes; i < t.size(); ++i) d.class_probs.push_back(sigmoid(t[i]));
    return d;
}

inline RawDetection decode_cell(std::span<const double> t, CellIndex cell, const AnchorBox& anchor, int stride) {
    return decode_cell<double>(t, cell, anchor, stride);
}

/// Inverse of decode_cell. Requires the center strictly inside d.cell and all
/// probabilities strictly inside (0, 1).
inline std::vector<double> encode_cell(const RawDetection& d, const AnchorBox& anchor, int stride) {
    const double fx = d.box.cx() / stride - d.cell.x;
    const double fy = d.box.cy() / stride - d.cell.y;
    if (!(fx > 0.0 && fx < 1.0) || !(fy > 0.0 && fy < 1.0))
        throw DomainError("encode_cell: box center is not strictly inside cell (" + std::to_string(d.cell.x) + "," +
                          std::to_string(d.cell.y) + ")");
    std::vector<double> t;
    t.reserve(kBoxAttributes + d.class_probs.size());
    t.push_back(logit(fx));
    t.push_back(logit(fy));
    t.push_back(std::log(d.box.w() / anchor.pw));
    t.push_back(std::log(d.box.h() / anchor.ph));
    t.push_back(logit(d.objectness));
    for (double p : d.class_probs) t.push_back(logit(p));
    return t;
}

inline void validate_grid(const GridTensor& g, const HeadSpec& spec) {
    if (g.depth() != spec.depth())
        throw ShapeError("grid depth mismatch: expected " + std::to_string(spec.depth()) + ", actual " +
                         std::to_string(g.depth()));
    if (g.scale_index() < 0 || g.scale_index() >= spec.num_scales())
        throw ShapeError("grid scale index " + std::to_string(g.scale_index()) + " out of range");
    const int n = spec.grid_size(g.scale_index());
    if (g.grid_h() != n || g.grid_w() != n)
        throw ShapeError("grid size mismatch at scale " + std::to_string(g.scale_index()) + ": expected " +
                         std::to_string(n) + "x" + std::to_string(n) + ", actual " + std::to_string(g.grid_h()) +
                         "x" + std::to_string(g.grid_w()));
}

/// Decodes every slot of one scale, ordered by (cell_y, cell_x, anchor).
inline std::vector<RawDetection> decode_grid(const GridTensor& g, const HeadSpec& spec) {
    validate_grid(g, spec);
    const int b = spec.boxes_per_cell();
    const int attrs = spec.attributes();
    const int stride = spec.stride(g.scale_index());
    std::vector<RawDetection> out;
    out.reserve(static_cast<std::size_t>(g.grid_h()) * g.grid_w() * b);
    for (int y = 0; y < g.grid_h(); ++y) {
        for (int x = 0; x < g.grid_w(); ++x) {
            const auto cell = g.cell(y, x);
            for (int a = 0; a < b; ++a) {
                auto slot = cell.subspan(static_cast<std::size_t>(a * attrs), static_cast<std::size_t>(attrs));
                RawDetection d = decode_cell<float>(slot, {x, y}, spec.anchor(g.scale_index(), a), stride);
                d.scale_index = g.scale_index();
                d.anchor_index = a;
                out.push_back(std::move(d));
            }
        }
    }
    return out;
}

inline std::vector<RawDetection> decode_all(std::span<const GridTensor> grids, const HeadSpec& spec) {
    if (grids.size() != static_cast<std::size_t>(spec.num_scales()))
        throw ShapeError("expected " + std::to_string(spec.num_scales()) + " scales, got " +
                         std::to_string(grids.size()));
    std::vector<RawDetection> out;
    for (const auto& g : grids) {
        auto part = decode_grid(g, spec);
        out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    }
    return out;
}

}  // namespace wbc

#endif  // WBC_HEAD_DECODER_HPP_
