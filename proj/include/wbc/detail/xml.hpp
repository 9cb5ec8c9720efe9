#ifndef WBC_DETAIL_XML_HPP_
#define WBC_DETAIL_XML_HPP_

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "wbc/errors.hpp"

// Small non-validating XML reader covering what annotation files use: a prolog,
// comments, DOCTYPE, CDATA, attributes, character/entity references. Errors
// carry the byte offset where parsing stopped.
namespace wbc::detail::xml {

struct Node {
    std::string name;
    std::vector<std::pair<std::string, std::string>> attributes;
    std::string text;
    std::vector<Node> children;
    std::size_t offset = 0;

    const Node* child(std::string_view n) const {
        for (const auto& c : children)
            if (c.name == n) return &c;
        return nullptr;
    }

    std::vector<const Node*> children_named(std::string_view n) const {
        std::vector<const Node*> out;
        for (const auto& c : children)
            if (c.name == n) out.push_back(&c);
        return out;
    }
};

class Parser {
 public:
    explicit Parser(std::string_view src) : s_{src} {}

    Node parse_document() {
        skip_misc();
        if (eof() || peek() != '<') fail("expected root element");
        Node root = parse_element();
        skip_misc();
        if (!eof()) fail("content after root element");
        return root;
    }

 private:
    [[noreturn]] void fail(const std::string& msg) const { throw ParseError("malformed XML: " + msg, pos_); }

    bool eof() const { return pos_ >= s_.size(); }
    char peek() const { return s_[pos_]; }
    bool starts_with(std::string_view p) const { return s_.substr(pos_, p.size()) == p; }

    static bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }
    static bool is_name_char(char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
               c == '-' || c == '.' || c == ':' || static_cast<unsigned char>(c) >= 0x80;
    }

    void skip_space() {
        while (!eof() && is_space(peek())) ++pos_;
    }

    void skip_until(std::string_view end, const char* what) {
        const auto at = s_.find(end, pos_);
        if (at == std::string_view::npos) {
            pos_ = s_.size();
            fail(std::string("unterminated ") + what);
        }
        pos_ = at + end.size();
    }

    // Prolog, comments, processing instructions and DOCTYPE between elements.
    void skip_misc() {
        for (;;) {
            skip_space();
            if (starts_with("<?")) skip_until("?>", "processing instruction");
            else if (starts_with("<!--")) skip_until("-->", "comment");
            else if (starts_with("<!DOCTYPE")) skip_until(">", "DOCTYPE");
            else return;
        }
    }

    std::string parse_name() {
        const std::size_t start = pos_;
        while (!eof() && is_name_char(peek())) ++pos_;
        if (pos_ == start) fail("expected a name");
        return std::string(s_.substr(start, pos_ - start));
    }

    static void append_utf8(std::string& out, std::uint32_t cp) {
        if (cp < 0x80) {
            out += static_cast<char>(cp);
        } else if (cp < 0x800) {
            out += static_cast<char>(0xC0 | (cp >> 6));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        } else if (cp < 0x10000) {
            out += static_cast<char>(0xE0 | (cp >> 12));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        } else {
            out += static_cast<char>(0xF0 | (cp >> 18));
            out += static_cast<char>(0x80 | ((cp >> 12) & 0x3F));
            out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (cp & 0x3F));
        }
    }

    void parse_reference(std::string& out) {
        const std::size_t start = pos_;  // at '&'
        const auto semi = s_.find(';', pos_);
        if (semi == std::string_view::npos || semi - pos_ > 12) fail("bad entity reference");
        const std::string_view ent = s_.substr(pos_ + 1, semi - pos_ - 1);
        pos_ = semi + 1;
        if (ent == "lt") out += '<';
        else if (ent == "gt") out += '>';
        else if (ent == "amp") out += '&';
        else if (ent == "quot") out += '"';
        else if (ent == "apos") out += '\'';
        else if (!ent.empty() && ent[0] == '#') {
            std::uint32_t cp = 0;
            const bool hex = ent.size() > 1 && (ent[1] == 'x' || ent[1] == 'X');
            const std::string_view digits = ent.substr(hex ? 2 : 1);
            if (digits.empty()) {
                pos_ = start;
                fail("empty character reference");
            }
            for (char c : digits) {
                int v;
                if (c >= '0' && c <= '9') v = c - '0';
                else if (hex && c >= 'a' && c <= 'f') v = c - 'a' + 10;
                else if (hex && c >= 'A' && c <= 'F') v = c - 'A' + 10;
                else {
                    pos_ = start;
                    fail("bad character reference");
                }
                cp = cp * (hex ? 16u : 10u) + static_cast<std::uint32_t>(v);
                if (cp > 0x10FFFF) {
                    pos_ = start;
                    fail("character reference out of range");
                }
            }
            append_utf8(out, cp);
        } else {
            pos_ = start;
            fail("unknown entity '&" + std::string(ent) + ";'");
        }
    }

    std::string parse_attr_value() {
        if (eof() || (peek() != '"' && peek() != '\'')) fail("expected quoted attribute value");
        const char q = peek();
        ++pos_;
        std::string v;
        while (!eof() && peek() != q) {
            if (peek() == '<') fail("'<' in attribute value");
            if (peek() == '&') parse_reference(v);
            else v += s_[pos_++];
        }
        if (eof()) fail("unterminated attribute value");
        ++pos_;
        return v;
    }

    Node parse_element() {
        Node node;
        node.offset = pos_;
        ++pos_;  // '<'
        node.name = parse_name();
        for (;;) {
            skip_space();
            if (eof()) fail("unterminated start tag <" + node.name + ">");
            if (starts_with("/>")) {
                pos_ += 2;
                return node;
            }
            if (peek() == '>') {
                ++pos_;
                break;
            }
            std::string key = parse_name();
            skip_space();
            if (eof() || peek() != '=') fail("expected '=' after attribute " + key);
            ++pos_;
            skip_space();
            node.attributes.emplace_back(std::move(key), parse_attr_value());
        }
        for (;;) {
            if (eof()) fail("missing </" + node.name + ">");
            if (starts_with("</")) {
                pos_ += 2;
                const std::size_t at = pos_;
                const std::string close = parse_name();
                if (close != node.name) {
                    pos_ = at;
                    fail("mismatched closing tag </" + close + "> for <" + node.name + ">");
                }
                skip_space();
                if (eof() || peek() != '>') fail("expected '>'");
                ++pos_;
                return node;
            }
            if (starts_with("<!--")) skip_until("-->", "comment");
            else if (starts_with("<![CDATA[")) {
                pos_ += 9;
                const auto end = s_.find("]]>", pos_);
                if (end == std::string_view::npos) {
                    pos_ = s_.size();
                    fail("unterminated CDATA");
                }
                node.text.append(s_.substr(pos_, end - pos_));
                pos_ = end + 3;
            } else if (starts_with("<?")) skip_until("?>", "processing instruction");
            else if (peek() == '<') node.children.push_back(parse_element());
            else if (peek() == '&') parse_reference(node.text);
            else node.text += s_[pos_++];
        }
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

inline Node parse(std::string_view src) { return Parser(src).parse_document(); }

inline std::string escape(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace wbc::detail::xml

#endif  // WBC_DETAIL_XML_HPP_
