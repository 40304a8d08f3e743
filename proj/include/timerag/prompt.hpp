#pragma once

#include <filesystem>
#include <map>
#include <string>

namespace timerag {

using TemplateValues = std::map<std::string, std::string>;

/// Replaces every `{{name}}` with values.at(name). Unknown placeholders raise
/// TemplateError naming the placeholder; unused values are ignored.
std::string render_template(const std::string& tpl, const TemplateValues& values);

std::string read_text_file(const std::filesystem::path& path);

/// Fixed-point formatting used in every rendered prompt, so golden files stay stable.
std::string format_fixed(double value, int decimals = 4);

}  // namespace timerag
