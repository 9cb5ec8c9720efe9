#ifndef WBC_INFERENCE_HPP_
#define WBC_INFERENCE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "wbc/detail/random.hpp"
#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"
#include "wbc/head_decoder.hpp"
#include "wbc/tensor_file.hpp"

namespace wbc {

/// Anything that turns an image into per-scale head tensors. Implementations
/// must tolerate concurrent calls.
class BackboneAdapter {
 public:
    virtual ~BackboneAdapter() = default;
    virtual std::vector<GridTensor> infer(std::string_view image_id, const HeadSpec& spec) const = 0;
    virtual std::string kind() const = 0;
};

/// A ground-truth object to bake into toy head outputs.
struct Plant {
    Box box;  ///< PixelNetwork frame
    int class_id = 0;
    double confidence = 0.95;
};

/// Deterministic stand-in for a trained network. Planted objects are encoded
/// into the slot whose anchor best matches their shape; every other slot holds
/// seeded low-magnitude noise with a strongly negative objectness logit.
class ToyBackbone final : public BackboneAdapter {
 public:
    explicit ToyBackbone(std::uint64_t seed, std::map<std::string, std::vector<Plant>> plants = {})
        : seed_{seed}, plants_{std::move(plants)} {}

    void plant(const std::string& image_id, Plant p) { plants_[image_id].push_back(std::move(p)); }

    std::uint64_t seed() const noexcept { return seed_; }
    const std::map<std::string, std::vector<Plant>>& plants() const noexcept { return plants_; }
    std::string kind() const override { return "toy"; }

    std::vector<GridTensor> infer(std::string_view image_id, const HeadSpec& spec) const override {
        detail::Rng rng(detail::mix(seed_, detail::fnv1a(image_id)));
        const int b = spec.boxes_per_cell();
        const int attrs = spec.attributes();

        std::vector<GridTensor> out;
        for (int s = 0; s < spec.num_scales(); ++s) {
            const int n = spec.grid_size(s);
            GridTensor g = GridTensor::zeros(s, n, n, spec.depth());
            auto v = g.values();
            for (std::size_t i = 0; i < v.size(); ++i) {
                const auto attr = static_cast<int>(i % static_cast<std::size_t>(attrs));
                v[i] = static_cast<float>(attr == 4 ? detail::uniform(rng, -6.0, -3.0) : detail::uniform(rng, -0.1, 0.1));
            }
            out.push_back(std::move(g));
        }

        const auto it = plants_.find(std::string(image_id));
        if (it == plants_.end()) return out;

        std::set<std::tuple<int, int, int, int>> used;
        for (const auto& p : it->second) {
            require_same_frame(p.box.frame(), Frame::network(), "toy backbone plant");
            const ImageDims net{spec.input_size(), spec.input_size()};
            if (!inside_image(p.box, net))
                throw ConfigError("toy backbone: plant for " + std::string(image_id) + " lies outside the network frame");
            if (!(p.confidence > 0.0 && p.confidence < 1.0))
                throw ConfigError("toy backbone: plant confidence must lie in (0,1)");
            const int cls = spec.num_classes() == 1 ? 0 : p.class_id;
            if (cls < 0 || cls >= spec.num_classes())
                throw ConfigError("toy backbone: plant class " + std::to_string(p.class_id) + " outside head classes");

            int best_scale = 0, best_slot = 0;
            double best_iou = -1.0;
            for (int s = 0; s < spec.num_scales(); ++s) {
                for (int a = 0; a < b; ++a) {
                    const auto& anc = spec.anchor(s, a);
                    const double q = centered_iou(p.box.w(), p.box.h(), anc.pw, anc.ph);
                    if (q > best_iou) {
                        best_iou = q;
                        best_scale = s;
                        best_slot = a;
                    }
                }
            }
            const int stride = spec.stride(best_scale);
            const int n = spec.grid_size(best_scale);
            auto place = [&](double c, int& cell) {
                cell = std::clamp(static_cast<int>(std::floor(c / stride)), 0, n - 1);
                const double frac = std::clamp(c / stride - cell, 1e-6, 1.0 - 1e-6);
                return (cell + frac) * stride;
            };
            CellIndex cell;
            const double cx = place(p.box.cx(), cell.x);
            const double cy = place(p.box.cy(), cell.y);
            if (!used.emplace(best_scale, cell.y, cell.x, best_slot).second)
                throw ConfigError("toy backbone: two plants of " + std::string(image_id) + " share one head slot");

            const double root = std::sqrt(p.confidence);
            RawDetection d{Box::from_center(cx, cy, p.box.w(), p.box.h(), Frame::network()), root,
                           std::vector<double>(static_cast<std::size_t>(spec.num_classes()), std::min(0.01, 0.5 * root)),
                           best_scale, cell, best_slot};
            d.class_probs[static_cast<std::size_t>(cls)] = root;
            const auto t = encode_cell(d, spec.anchor(best_scale, best_slot), stride);
            auto slot = out[static_cast<std::size_t>(best_scale)].cell(cell.y, cell.x).subspan(
                static_cast<std::size_t>(best_slot * attrs), static_cast<std::size_t>(attrs));
            for (std::size_t i = 0; i < t.size(); ++i) slot[i] = static_cast<float>(t[i]);
        }
        return out;
    }

 private:
    std::uint64_t seed_;
    std::map<std::string, std::vector<Plant>> plants_;
};

namespace detail {

inline std::vector<std::uint8_t> read_binary_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

/// Loads `<dir>/<image_id>.wbct` files produced by an external exporter.
class TensorDirBackbone final : public BackboneAdapter {
 public:
    explicit TensorDirBackbone(std::filesystem::path dir) : dir_{std::move(dir)} {}

    std::string kind() const override { return "tensors"; }
    const std::filesystem::path& dir() const noexcept { return dir_; }

    std::vector<GridTensor> infer(std::string_view image_id, const HeadSpec& spec) const override {
        const auto path = dir_ / (std::string(image_id) + ".wbct");
        if (!std::filesystem::is_regular_file(path)) throw IoError("missing tensor file " + path.string());
        const auto bytes = detail::read_binary_file(path);
        return read_tensor_file(bytes, spec);
    }

 private:
    std::filesystem::path dir_;
};

}  // namespace wbc

#endif  // WBC_INFERENCE_HPP_
