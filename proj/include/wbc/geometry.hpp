#ifndef WBC_GEOMETRY_HPP_
#define WBC_GEOMETRY_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "wbc/detail/random.hpp"
#include "wbc/errors.hpp"

namespace wbc {

enum class FrameKind : std::uint8_t {
    PixelOriginal,  ///< pixels of the source image
    PixelNetwork,   ///< pixels of the square (letterboxed) network input
    GridScale       ///< grid-cell units of one detection scale
};

/// Coordinate frame a box lives in. `scale` is only meaningful for GridScale.
struct Frame {
    FrameKind kind = FrameKind::PixelOriginal;
    int scale = 0;

    static constexpr Frame original() { return {FrameKind::PixelOriginal, 0}; }
    static constexpr Frame network() { return {FrameKind::PixelNetwork, 0}; }
    static constexpr Frame grid(int s) { return {FrameKind::GridScale, s}; }

    friend constexpr bool operator==(const Frame& a, const Frame& b) {
        return a.kind == b.kind && (a.kind != FrameKind::GridScale || a.scale == b.scale);
    }
};

inline std::string to_string(const Frame& f) {
    switch (f.kind) {
        case FrameKind::PixelOriginal: return "PixelOriginal";
        case FrameKind::PixelNetwork: return "PixelNetwork";
        case FrameKind::GridScale: return "GridScale(" + std::to_string(f.scale) + ")";
    }
    return "?";
}

inline void require_same_frame(const Frame& a, const Frame& b, std::string_view where) {
    if (!(a == b))
        throw ContractError(std::string(where) + ": frame mismatch (" + to_string(a) + " vs " +
                            to_string(b) + ")");
}

/// Axis-aligned rectangle stored in center form. Width and height are strictly positive.
class Box {
 public:
    static Box from_center(double cx, double cy, double w, double h, Frame frame = Frame::original()) {
        return Box(cx, cy, w, h, frame);
    }

    static Box from_corners(double x_min, double y_min, double x_max, double y_max,
                            Frame frame = Frame::original()) {
        return Box(0.5 * (x_min + x_max), 0.5 * (y_min + y_max), x_max - x_min, y_max - y_min, frame);
    }

    double cx() const noexcept { return cx_; }
    double cy() const noexcept { return cy_; }
    double w() const noexcept { return w_; }
    double h() const noexcept { return h_; }
    const Frame& frame() const noexcept { return frame_; }

    double x_min() const noexcept { return cx_ - 0.5 * w_; }
    double y_min() const noexcept { return cy_ - 0.5 * h_; }
    double x_max() const noexcept { return cx_ + 0.5 * w_; }
    double y_max() const noexcept { return cy_ + 0.5 * h_; }
    double area() const noexcept { return w_ * h_; }

    Box with_frame(Frame f) const { return Box(cx_, cy_, w_, h_, f); }

    friend bool operator==(const Box&, const Box&) = default;

 private:
    Box(double cx, double cy, double w, double h, Frame frame)
        : cx_{cx}, cy_{cy}, w_{w}, h_{h}, frame_{frame} {
        if (!std::isfinite(cx) || !std::isfinite(cy) || !std::isfinite(w) || !std::isfinite(h))
            throw GeometryError("box has non-finite coordinates");
        if (!(w > 0.0) || !(h > 0.0))
            throw GeometryError("box width and height must be positive (got w=" + std::to_string(w) +
                                ", h=" + std::to_string(h) + ")");
    }

    double cx_, cy_, w_, h_;
    Frame frame_;
};

/// Area of the overlap of two boxes; touching edges give 0.
inline double intersection_area(const Box& a, const Box& b) {
    const double iw = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
    const double ih = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

inline double iou(const Box& a, const Box& b) {
    require_same_frame(a.frame(), b.frame(), "iou");
    const double inter = intersection_area(a, b);
    if (inter <= 0.0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return std::clamp(inter / uni, 0.0, 1.0);
}

/// IoU of two width/height rectangles sharing a center; the anchor clustering metric.
inline double centered_iou(double w1, double h1, double w2, double h2) {
    const double inter = std::min(w1, w2) * std::min(h1, h2);
    return inter / (w1 * h1 + w2 * h2 - inter);
}

struct ImageDims {
    int width = 0;
    int height = 0;
    friend bool operator==(const ImageDims&, const ImageDims&) = default;
};

inline bool inside_image(const Box& b, ImageDims dims, double tol = 1e-9) {
    return b.x_min() >= -tol && b.y_min() >= -tol && b.x_max() <= dims.width + tol &&
           b.y_max() <= dims.height + tol;
}

/// Intersects a box with the image rectangle; nullopt when nothing of positive area remains.
inline std::optional<Box> clamp_to_image(const Box& b, ImageDims dims) {
    const double x0 = std::clamp(b.x_min(), 0.0, static_cast<double>(dims.width));
    const double y0 = std::clamp(b.y_min(), 0.0, static_cast<double>(dims.height));
    const double x1 = std::clamp(b.x_max(), 0.0, static_cast<double>(dims.width));
    const double y1 = std::clamp(b.y_max(), 0.0, static_cast<double>(dims.height));
    if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
    return Box::from_corners(x0, y0, x1, y1, b.frame());
}

// ---------------------------------------------------------------------------
// Augmentation bookkeeping. Rotations are clockwise and limited to right angles.

enum class AugmentKind : std::uint8_t { FlipH, FlipV, Rot90, Rot180, Rot270, Noise };

struct AugmentOp {
    AugmentKind kind = AugmentKind::FlipH;
    std::uint64_t seed = 0;  ///< Noise only
    double sigma = 0.0;      ///< Noise only

    static AugmentOp noise(std::uint64_t seed, double sigma) { return {AugmentKind::Noise, seed, sigma}; }
    friend bool operator==(const AugmentOp&, const AugmentOp&) = default;
};

inline std::string augment_name(const AugmentOp& op) {
    switch (op.kind) {
        case AugmentKind::FlipH: return "fliph";
        case AugmentKind::FlipV: return "flipv";
        case AugmentKind::Rot90: return "rot90";
        case AugmentKind::Rot180: return "rot180";
        case AugmentKind::Rot270: return "rot270";
        case AugmentKind::Noise: return "noise";
    }
    return "?";
}

inline std::optional<AugmentKind> parse_augment_kind(std::string_view s) {
    if (s == "fliph") return AugmentKind::FlipH;
    if (s == "flipv") return AugmentKind::FlipV;
    if (s == "rot90") return AugmentKind::Rot90;
    if (s == "rot180") return AugmentKind::Rot180;
    if (s == "rot270") return AugmentKind::Rot270;
    if (s == "noise") return AugmentKind::Noise;
    return std::nullopt;
}

/// Image dimensions after the transform (quarter turns swap width and height).
inline ImageDims augmented_dims(const AugmentOp& op, ImageDims dims) {
    if (op.kind == AugmentKind::Rot90 || op.kind == AugmentKind::Rot270) return {dims.height, dims.width};
    return dims;
}

inline Box augment_box(const AugmentOp& op, ImageDims dims, const Box& b) {
    const double W = dims.width, H = dims.height;
    switch (op.kind) {
        case AugmentKind::FlipH: return Box::from_center(W - b.cx(), b.cy(), b.w(), b.h(), b.frame());
        case AugmentKind::FlipV: return Box::from_center(b.cx(), H - b.cy(), b.w(), b.h(), b.frame());
        case AugmentKind::Rot180: return Box::from_center(W - b.cx(), H - b.cy(), b.w(), b.h(), b.frame());
        // (x, y) -> (H - y, x) in an H-wide, W-tall image
        case AugmentKind::Rot90: return Box::from_center(H - b.cy(), b.cx(), b.h(), b.w(), b.frame());
        // (x, y) -> (y, W - x)
        case AugmentKind::Rot270: return Box::from_center(b.cy(), W - b.cx(), b.h(), b.w(), b.frame());
        case AugmentKind::Noise: return b;
    }
    return b;
}

inline std::vector<Box> apply_augment(const AugmentOp& op, ImageDims dims, std::span<const Box> boxes) {
    std::vector<Box> out;
    out.reserve(boxes.size());
    for (std::size_t i = 0; i < boxes.size(); ++i) {
        const Box& b = boxes[i];
        require_same_frame(b.frame(), Frame::original(), "apply_augment");
        if (!inside_image(b, dims))
            throw InputError("apply_augment: box " + std::to_string(i) + " lies outside the " +
                             std::to_string(dims.width) + "x" + std::to_string(dims.height) + " image");
        out.push_back(augment_box(op, dims, b));
    }
    return out;
}

/// Photometric stub: adds seeded Gaussian noise to a pixel buffer. Boxes are never touched.
inline void apply_noise(const AugmentOp& op, std::span<float> pixels) {
    if (op.kind != AugmentKind::Noise) return;
    detail::Rng rng(op.seed);
    for (float& p : pixels) p += static_cast<float>(op.sigma * detail::normal(rng));
}

// ---------------------------------------------------------------------------
// Letterbox: aspect-preserving resize of a src_w x src_h image into a square
// dst_size input with symmetric padding.

class LetterboxMap {
 public:
    LetterboxMap(int src_w, int src_h, int dst_size) : src_w_{src_w}, src_h_{src_h}, dst_size_{dst_size} {
        if (src_w <= 0 || src_h <= 0 || dst_size <= 0)
            throw ConfigError("letterbox: image and network sizes must be positive");
        scale_ = std::min(static_cast<double>(dst_size) / src_w, static_cast<double>(dst_size) / src_h);
        pad_x_ = 0.5 * (dst_size - src_w * scale_);
        pad_y_ = 0.5 * (dst_size - src_h * scale_);
    }

    double scale() const noexcept { return scale_; }
    double pad_x() const noexcept { return pad_x_; }
    double pad_y() const noexcept { return pad_y_; }
    int src_w() const noexcept { return src_w_; }
    int src_h() const noexcept { return src_h_; }
    int dst_size() const noexcept { return dst_size_; }
    ImageDims src_dims() const noexcept { return {src_w_, src_h_}; }

    Box forward(const Box& b) const {
        require_same_frame(b.frame(), Frame::original(), "letterbox_forward");
        return Box::from_center(b.cx() * scale_ + pad_x_, b.cy() * scale_ + pad_y_, b.w() * scale_,
                                b.h() * scale_, Frame::network());
    }

    Box backward(const Box& b) const {
        require_same_frame(b.frame(), Frame::network(), "letterbox_backward");
        return Box::from_center((b.cx() - pad_x_) / scale_, (b.cy() - pad_y_) / scale_, b.w() / scale_,
                                b.h() / scale_, Frame::original());
    }

 private:
    int src_w_, src_h_, dst_size_;
    double scale_ = 1.0, pad_x_ = 0.0, pad_y_ = 0.0;
};

inline Box letterbox_forward(const LetterboxMap& m, const Box& b) { return m.forward(b); }
inline Box letterbox_backward(const LetterboxMap& m, const Box& b) { return m.backward(b); }

}  // namespace wbc

#endif  // WBC_GEOMETRY_HPP_
