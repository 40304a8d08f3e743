#include "timerag/prompt.hpp"

#include "timerag/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace timerag {

std::string render_template(const std::string& tpl, const TemplateValues& values) {
    std::string out;
    out.reserve(tpl.size());
    std::size_t pos = 0;
    while (pos < tpl.size()) {
        const auto open = tpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tpl, pos, std::string::npos);
            break;
        }
        out.append(tpl, pos, open - pos);
        const auto close = tpl.find("}}", open + 2);
        if (close == std::string::npos) throw TemplateError("unterminated placeholder at offset " + std::to_string(open));
        const std::string name = tpl.substr(open + 2, close - open - 2);
        const auto it = values.find(name);
        if (it == values.end()) throw TemplateError("unresolved placeholder {{" + name + "}}");
        out += it->second;
        pos = close + 2;
    }
    return out;
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArgumentError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string format_fixed(double value, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    std::string s = buf;
    if (s == "-0" || s.find_first_not_of("-0.") == std::string::npos) {
        // avoid "-0.0000"
        if (!s.empty() && s[0] == '-') s.erase(0, 1);
    }
    return s;
}

}  // namespace timerag
