#ifndef WBC_DATASET_HPP_
#define WBC_DATASET_HPP_

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "wbc/detail/random.hpp"
#include "wbc/detail/xml.hpp"
#include "wbc/errors.hpp"
#include "wbc/geometry.hpp"

namespace wbc {

namespace detail {

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Class vocabularies. Phase-2 ids follow the report row order and never change.

class ClassVocabulary {
 public:
    static const ClassVocabulary& phase1() {
        static const ClassVocabulary v({"WBC"});
        return v;
    }
    static const ClassVocabulary& phase2() {
        static const ClassVocabulary v({"Eosinophil", "Lymphocyte", "Monocyte", "Neutrophil"});
        return v;
    }

    explicit ClassVocabulary(std::vector<std::string> names) : names_{std::move(names)} {
        for (std::size_t i = 0; i < names_.size(); ++i)
            for (std::size_t j = i + 1; j < names_.size(); ++j)
                if (detail::lower(names_[i]) == detail::lower(names_[j]))
                    throw ConfigError("duplicate class name " + names_[i]);
    }

    const std::vector<std::string>& names() const noexcept { return names_; }
    std::size_t size() const noexcept { return names_.size(); }
    const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }

    /// Case-insensitive lookup ("LYMPHOCYTE" and "Lymphocyte" are the same class).
    std::optional<int> id_of(std::string_view name) const {
        const std::string key = detail::lower(name);
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (detail::lower(names_[i]) == key) return static_cast<int>(i);
        return std::nullopt;
    }

    std::optional<std::string> canonical(std::string_view name) const {
        if (auto id = id_of(name)) return names_[static_cast<std::size_t>(*id)];
        return std::nullopt;
    }

 private:
    std::vector<std::string> names_;
};

// ---------------------------------------------------------------------------
// Annotations

struct AnnotatedObject {
    std::string class_name;
    Box box;  ///< PixelOriginal

    friend bool operator==(const AnnotatedObject&, const AnnotatedObject&) = default;
};

struct Annotation {
    std::string image_id;
    int image_w = 0;
    int image_h = 0;
    std::vector<AnnotatedObject> objects;

    ImageDims dims() const noexcept { return {image_w, image_h}; }
    friend bool operator==(const Annotation&, const Annotation&) = default;
};

namespace detail {

inline long parse_int_field(const xml::Node& parent, std::string_view field, const std::string& context) {
    const xml::Node* n = parent.child(field);
    if (!n) throw SchemaError(context + ": missing <" + std::string(field) + ">");
    const std::string_view t = xml::trim(n->text);
    long v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec == std::errc() && p == t.data() + t.size()) return v;
    // Some exporters write "12.0"; accept integral decimals only.
    double d = 0.0;
    auto [p2, ec2] = std::from_chars(t.data(), t.data() + t.size(), d);
    if (ec2 == std::errc() && p2 == t.data() + t.size() && std::floor(d) == d && std::abs(d) < 1e9)
        return static_cast<long>(d);
    throw SchemaError(context + ": <" + std::string(field) + "> is not an integer ('" + std::string(t) + "')");
}

inline std::string stem_of(std::string_view filename) {
    return std::filesystem::path(std::string(filename)).stem().string();
}

}  // namespace detail

/// Parses a Pascal-VOC annotation. Corners are inclusive pixel indices and
/// width = xmax - xmin. Class names are kept verbatim.
inline Annotation parse_voc(std::string_view xml_text, std::string_view fallback_id = {}) {
    const detail::xml::Node root = detail::xml::parse(xml_text);
    if (root.name != "annotation") throw SchemaError("VOC root element must be <annotation>, got <" + root.name + ">");

    Annotation a;
    if (const auto* fn = root.child("filename"); fn && !detail::xml::trim(fn->text).empty())
        a.image_id = detail::stem_of(detail::xml::trim(fn->text));
    else
        a.image_id = std::string(fallback_id);

    const auto* size = root.child("size");
    if (!size) throw SchemaError("VOC annotation has no <size> element");
    a.image_w = static_cast<int>(detail::parse_int_field(*size, "width", "size"));
    a.image_h = static_cast<int>(detail::parse_int_field(*size, "height", "size"));
    if (a.image_w <= 0 || a.image_h <= 0) throw SchemaError("VOC <size> must be positive");

    int index = 0;
    for (const auto* obj : root.children_named("object")) {
        const std::string ctx = "object " + std::to_string(index);
        const auto* name = obj->child("name");
        if (!name) throw SchemaError(ctx + ": missing <name>");
        const auto* bb = obj->child("bndbox");
        if (!bb) throw SchemaError(ctx + ": missing <bndbox>");
        const long x0 = detail::parse_int_field(*bb, "xmin", ctx);
        const long y0 = detail::parse_int_field(*bb, "ymin", ctx);
        const long x1 = detail::parse_int_field(*bb, "xmax", ctx);
        const long y1 = detail::parse_int_field(*bb, "ymax", ctx);
        if (x1 <= x0 || y1 <= y0)
            throw GeometryError(ctx + ": degenerate bndbox (" + std::to_string(x0) + "," + std::to_string(y0) + "," +
                                std::to_string(x1) + "," + std::to_string(y1) + ")");
        Box box = Box::from_corners(static_cast<double>(x0), static_cast<double>(y0), static_cast<double>(x1),
                                    static_cast<double>(y1));
        if (!inside_image(box, a.dims()))
            throw GeometryError(ctx + ": bndbox exceeds the " + std::to_string(a.image_w) + "x" +
                                std::to_string(a.image_h) + " image");
        a.objects.push_back({std::string(detail::xml::trim(name->text)), box});
        ++index;
    }
    return a;
}

inline std::string serialize_voc(const Annotation& a) {
    namespace x = detail::xml;
    std::ostringstream o;
    o << "<annotation>\n";
    o << "\t<filename>" << x::escape(a.image_id) << ".jpg</filename>\n";
    o << "\t<size>\n\t\t<width>" << a.image_w << "</width>\n\t\t<height>" << a.image_h
      << "</height>\n\t\t<depth>3</depth>\n\t</size>\n";
    for (const auto& obj : a.objects) {
        o << "\t<object>\n\t\t<name>" << x::escape(obj.class_name) << "</name>\n\t\t<bndbox>\n";
        o << "\t\t\t<xmin>" << std::lround(obj.box.x_min()) << "</xmin>\n";
        o << "\t\t\t<ymin>" << std::lround(obj.box.y_min()) << "</ymin>\n";
        o << "\t\t\t<xmax>" << std::lround(obj.box.x_max()) << "</xmax>\n";
        o << "\t\t\t<ymax>" << std::lround(obj.box.y_max()) << "</ymax>\n";
        o << "\t\t</bndbox>\n\t</object>\n";
    }
    o << "</annotation>\n";
    return o.str();
}

// ---------------------------------------------------------------------------
// Manifests

enum class Split : std::uint8_t { Train, Test };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

inline Split parse_split(std::string_view s) {
    const auto l = detail::lower(s);
    if (l == "train") return Split::Train;
    if (l == "test") return Split::Test;
    throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct ManifestEntry {
    std::string image_id;
    std::string image_path;
    std::string label;  ///< image-level subtype, empty when unknown
    ImageDims dims;     ///< zero when unknown
    std::optional<Annotation> annotation;
    std::string provenance;  ///< "image_id#op" for augmented copies
};

struct DatasetManifest {
    Split split = Split::Train;
    std::vector<ManifestEntry> entries;
    std::map<std::string, std::size_t> per_class_counts;
    std::vector<std::string> warnings;

    void recount() {
        per_class_counts.clear();
        for (const auto& e : entries)
            if (!e.label.empty()) ++per_class_counts[e.label];
    }

    void sort_entries() {
        std::stable_sort(entries.begin(), entries.end(),
                         [](const ManifestEntry& a, const ManifestEntry& b) { return a.image_id < b.image_id; });
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [k, v] : per_class_counts) n += v;
        return n;
    }
};

/// Per-class image counts of the public augmented subtype corpus.
inline std::map<std::string, std::size_t> reference_counts(Split split) {
    if (split == Split::Train)
        return {{"Eosinophil", 2497}, {"Lymphocyte", 2483}, {"Monocyte", 2487}, {"Neutrophil", 2499}};
    return {{"Eosinophil", 574}, {"Lymphocyte", 620}, {"Monocyte", 620}, {"Neutrophil", 616}};
}

namespace detail {

inline std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline bool is_image_file(const std::filesystem::path& p) {
    const auto ext = lower(p.extension().string());
    return ext == ".jpeg" || ext == ".jpg" || ext == ".png" || ext == ".bmp";
}

inline std::optional<std::filesystem::path> find_split_dir(const std::filesystem::path& root, Split split) {
    const std::string name = to_string(split);
    std::string upper = name, title = name;
    for (char& c : upper) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    title[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(title[0])));
    for (const auto& n : {name, upper, title}) {
        const auto p = root / n;
        if (std::filesystem::is_directory(p)) return p;
    }
    return std::nullopt;
}

}  // namespace detail

/// Reads every `*.xml` in a directory. Files that fail to parse are reported in
/// `warnings` and skipped. Results are sorted by image id.
inline std::vector<Annotation> load_voc_dir(const std::filesystem::path& dir, std::vector<std::string>* warnings = nullptr) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("annotation directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& de : fs::directory_iterator(dir))
        if (de.is_regular_file() && detail::lower(de.path().extension().string()) == ".xml") files.push_back(de.path());
    std::sort(files.begin(), files.end());
    std::vector<Annotation> out;
    for (const auto& f : files) {
        try {
            out.push_back(parse_voc(detail::read_text_file(f), f.stem().string()));
        } catch (const Error& e) {
            if (warnings) warnings->push_back("skipping " + f.filename().string() + ": " + e.what());
        }
    }
    std::stable_sort(out.begin(), out.end(), [](const Annotation& a, const Annotation& b) { return a.image_id < b.image_id; });
    return out;
}

/// Scans `<root>/<split>/<ClassName>/*.jpeg` and attaches `<root>/annotations/<stem>.xml`
/// when present. An optional JSON file `{"ClassName": count, ...}` is checked
/// against the scanned counts; disagreements become warnings.
inline DatasetManifest build_manifest(const std::filesystem::path& root, Split split,
                                      const std::optional<std::filesystem::path>& expected_counts = std::nullopt) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());

    DatasetManifest m;
    m.split = split;
    const auto& vocab = ClassVocabulary::phase2();
    const auto split_dir = detail::find_split_dir(root, split);
    if (!split_dir) {
        m.warnings.push_back("no '" + to_string(split) + "' directory under " + root.string());
    } else {
        std::vector<fs::path> class_dirs;
        for (const auto& de : fs::directory_iterator(*split_dir))
            if (de.is_directory()) class_dirs.push_back(de.path());
        std::sort(class_dirs.begin(), class_dirs.end());
        const fs::path ann_dir = root / "annotations";
        const bool have_ann = fs::is_directory(ann_dir);

        for (const auto& cd : class_dirs) {
            const auto label = vocab.canonical(cd.filename().string());
            if (!label) {
                m.warnings.push_back("ignoring unknown class directory " + cd.filename().string());
                continue;
            }
            std::vector<fs::path> images;
            for (const auto& de : fs::directory_iterator(cd))
                if (de.is_regular_file() && detail::is_image_file(de.path())) images.push_back(de.path());
            std::sort(images.begin(), images.end());
            for (const auto& img : images) {
                ManifestEntry e;
                e.image_id = img.stem().string();
                e.image_path = img.string();
                e.label = *label;
                if (have_ann) {
                    const fs::path xml = ann_dir / (img.stem().string() + ".xml");
                    if (fs::is_regular_file(xml)) {
                        try {
                            e.annotation = parse_voc(detail::read_text_file(xml), e.image_id);
                            e.annotation->image_id = e.image_id;
                            e.dims = e.annotation->dims();
                        } catch (const Error& err) {
                            m.warnings.push_back("skipping annotation " + xml.filename().string() + ": " + err.what());
                        }
                    }
                }
                m.entries.push_back(std::move(e));
            }
        }
    }

    // Ids must be unique; stems shared between class folders get qualified.
    std::map<std::string, int> seen;
    for (const auto& e : m.entries) ++seen[e.image_id];
    for (auto& e : m.entries) {
        if (seen[e.image_id] > 1) {
            e.image_id = e.label + "/" + e.image_id;
            if (e.annotation) e.annotation->image_id = e.image_id;
        }
    }
    m.sort_entries();
    m.recount();

    if (expected_counts) {
        const auto j = nlohmann::json::parse(detail::read_text_file(*expected_counts), nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            m.warnings.push_back("integrity: expected-counts file is not a JSON object");
        } else {
            for (const auto& [name, count] : j.items()) {
                const auto canon = vocab.canonical(name).value_or(name);
                const std::size_t got = m.per_class_counts.count(canon) ? m.per_class_counts.at(canon) : 0;
                if (!count.is_number_unsigned() || count.get<std::size_t>() != got)
                    m.warnings.push_back("integrity: " + canon + " has " + std::to_string(got) + " images, expected " +
                                         count.dump());
            }
        }
    }
    return m;
}

/// Builds a manifest from parsed annotations. `labels` optionally supplies image-level subtypes.
inline DatasetManifest manifest_from_annotations(std::span<const Annotation> anns, Split split,
                                                 const std::map<std::string, std::string>& labels = {}) {
    DatasetManifest m;
    m.split = split;
    for (const auto& a : anns) {
        ManifestEntry e;
        e.image_id = a.image_id;
        e.dims = a.dims();
        e.annotation = a;
        if (auto it = labels.find(a.image_id); it != labels.end()) e.label = it->second;
        m.entries.push_back(std::move(e));
    }
    m.sort_entries();
    m.recount();
    return m;
}

/// Draws n/|classes| images per class (by image label) with a seeded shuffle.
inline std::vector<ManifestEntry> sample_detection_testset(const DatasetManifest& m, int n, std::uint64_t seed,
                                                           const ClassVocabulary& vocab = ClassVocabulary::phase2()) {
    const auto classes = static_cast<int>(vocab.size());
    if (n <= 0 || n % classes != 0)
        throw SamplingError("sample size " + std::to_string(n) + " is not divisible by " + std::to_string(classes) +
                            " classes");
    const auto per = static_cast<std::size_t>(n / classes);
    detail::Rng rng(seed);
    std::vector<ManifestEntry> out;
    out.reserve(static_cast<std::size_t>(n));
    for (const auto& cls : vocab.names()) {
        std::vector<const ManifestEntry*> pool;
        for (const auto& e : m.entries)
            if (e.label == cls) pool.push_back(&e);
        if (pool.size() < per)
            throw SamplingError("class " + cls + " has " + std::to_string(pool.size()) + " images, need " +
                                std::to_string(per));
        std::sort(pool.begin(), pool.end(), [](const auto* a, const auto* b) { return a->image_id < b->image_id; });
        detail::shuffle(pool.begin(), pool.end(), rng);
        for (std::size_t i = 0; i < per; ++i) out.push_back(*pool[i]);
    }
    return out;
}

/// Adds one transformed copy of every entry per op, id `image_id#opname`.
/// Noise copies get a per-image seed derived from the op seed and `seed`.
inline DatasetManifest expand_augmented(const DatasetManifest& m, std::span<const AugmentOp> ops, std::uint64_t seed) {
    DatasetManifest out = m;
    for (const auto& e : m.entries) {
        for (const auto& op0 : ops) {
            AugmentOp op = op0;
            if (op.kind == AugmentKind::Noise) op.seed = detail::mix(op.seed, detail::mix(seed, detail::fnv1a(e.image_id)));
            ManifestEntry c = e;
            c.provenance = e.image_id + "#" + augment_name(op);
            c.image_id = c.provenance;
            if (e.dims.width > 0 && e.dims.height > 0) c.dims = augmented_dims(op, e.dims);
            if (e.annotation) {
                const Annotation& src = *e.annotation;
                Annotation a;
                a.image_id = c.image_id;
                const ImageDims nd = augmented_dims(op, src.dims());
                a.image_w = nd.width;
                a.image_h = nd.height;
                for (const auto& obj : src.objects)
                    a.objects.push_back({obj.class_name, augment_box(op, src.dims(), obj.box)});
                c.annotation = std::move(a);
            }
            out.entries.push_back(std::move(c));
        }
    }
    out.sort_entries();
    out.recount();
    return out;
}

/// Ground-truth objects of an entry expressed in a phase's vocabulary.
/// Phase 1 maps every WBC or subtype object to "WBC"; phase 2 keeps subtype objects
/// and relabels generic "WBC" objects with the image-level subtype.
inline std::vector<AnnotatedObject> resolve_truth_objects(const ManifestEntry& e, const ClassVocabulary& vocab) {
    std::vector<AnnotatedObject> out;
    if (!e.annotation) return out;
    const auto& subtypes = ClassVocabulary::phase2();
    const bool single = vocab.size() == 1;
    for (const auto& obj : e.annotation->objects) {
        const bool is_wbc = detail::lower(obj.class_name) == "wbc";
        const auto sub = subtypes.canonical(obj.class_name);
        if (single) {
            if (is_wbc || sub) out.push_back({vocab.name(0), obj.box});
            continue;
        }
        if (auto c = vocab.canonical(obj.class_name)) out.push_back({*c, obj.box});
        else if (is_wbc && !e.label.empty())
            if (auto lc = vocab.canonical(e.label)) out.push_back({*lc, obj.box});
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines manifest cache: one record per entry.

inline nlohmann::json entry_to_json(const ManifestEntry& e, Split split) {
    nlohmann::json j;
    j["image_id"] = e.image_id;
    j["path"] = e.image_path;
    j["label"] = e.label;
    j["split"] = to_string(split);
    j["width"] = e.dims.width;
    j["height"] = e.dims.height;
    if (!e.provenance.empty()) j["provenance"] = e.provenance;
    if (e.annotation) {
        auto objs = nlohmann::json::array();
        for (const auto& o : e.annotation->objects)
            objs.push_back({{"name", o.class_name},
                            {"xmin", o.box.x_min()},
                            {"ymin", o.box.y_min()},
                            {"xmax", o.box.x_max()},
                            {"ymax", o.box.y_max()}});
        j["objects"] = std::move(objs);
    }
    return j;
}

inline std::string write_manifest_jsonl(const DatasetManifest& m) {
    std::string out;
    for (const auto& e : m.entries) out += entry_to_json(e, m.split).dump() + "\n";
    return out;
}

inline DatasetManifest read_manifest_jsonl(const std::string& text) {
    DatasetManifest m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    bool split_set = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::xml::trim(line).empty()) continue;
        const auto j = nlohmann::json::parse(line, nullptr, false);
        const std::string ctx = "manifest line " + std::to_string(lineno);
        if (j.is_discarded() || !j.is_object()) throw SchemaError(ctx + ": not a JSON object");
        try {
            ManifestEntry e;
            e.image_id = j.at("image_id").get<std::string>();
            e.image_path = j.value("path", std::string{});
            e.label = j.value("label", std::string{});
            e.provenance = j.value("provenance", std::string{});
            e.dims = {j.value("width", 0), j.value("height", 0)};
            if (!split_set && j.contains("split")) {
                m.split = parse_split(j["split"].get<std::string>());
                split_set = true;
            }
            if (j.contains("objects")) {
                Annotation a;
                a.image_id = e.image_id;
                a.image_w = e.dims.width;
                a.image_h = e.dims.height;
                for (const auto& o : j["objects"])
                    a.objects.push_back({o.at("name").get<std::string>(),
                                         Box::from_corners(o.at("xmin").get<double>(), o.at("ymin").get<double>(),
                                                           o.at("xmax").get<double>(), o.at("ymax").get<double>())});
                e.annotation = std::move(a);
            }
            m.entries.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw SchemaError(ctx + ": " + ex.what());
        } catch (const GeometryError& ex) {
            throw SchemaError(ctx + ": " + ex.what());
        }
    }
    m.sort_entries();
    m.recount();
    return m;
}

}  // namespace wbc

#endif  // WBC_DATASET_HPP_
