#ifndef WBC_TESTS_FIXTURES_HPP_
#define WBC_TESTS_FIXTURES_HPP_

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>

namespace wbc::testing {

namespace fs = std::filesystem;

/// Fresh, empty directory under the build tree's scratch area.
inline fs::path scratch_dir(std::string_view name) {
    const fs::path p = fs::path(WBC_TEST_TMP) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

inline void write_text(const fs::path& p, std::string_view text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << text;
}

inline std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Empty placeholder images laid out as `<root>/<SPLIT>/<Class>/_<i>_<n>.jpeg`.
inline void make_class_tree(const fs::path& root, std::string_view split_dir,
                            const std::map<std::string, std::size_t>& counts) {
    for (const auto& [cls, n] : counts) {
        const fs::path dir = root / split_dir / cls;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < n; ++i) {
            char name[64];
            std::snprintf(name, sizeof name, "_%zu_%s.jpeg", i, cls.substr(0, 3).c_str());
            std::ofstream(dir / name).put('\0');
        }
    }
}

inline std::string voc_xml(std::string_view filename, int w, int h, std::string_view objects) {
    std::string s = "<annotation>\n\t<folder>JPEGImages</folder>\n\t<filename>";
    s += filename;
    s += "</filename>\n\t<size>\n\t\t<width>" + std::to_string(w) + "</width>\n\t\t<height>" + std::to_string(h) +
         "</height>\n\t\t<depth>3</depth>\n\t</size>\n";
    s += objects;
    s += "</annotation>\n";
    return s;
}

inline std::string voc_object(std::string_view name, int x0, int y0, int x1, int y1) {
    return "\t<object>\n\t\t<name>" + std::string(name) + "</name>\n\t\t<pose>Unspecified</pose>\n\t\t<bndbox>\n\t\t\t<xmin>" +
           std::to_string(x0) + "</xmin>\n\t\t\t<ymin>" + std::to_string(y0) + "</ymin>\n\t\t\t<xmax>" +
           std::to_string(x1) + "</xmax>\n\t\t\t<ymax>" + std::to_string(y1) + "</ymax>\n\t\t</bndbox>\n\t</object>\n";
}

}  // namespace wbc::testing

#endif  // WBC_TESTS_FIXTURES_HPP_
