#include "ccis/util/toml.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "ccis/core/errors.hpp"
#include "ccis/util/hash.hpp"

namespace ccis {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
            return false;
    return !k.starts_with(".") && !k.ends_with(".") && k.find("..") == std::string::npos;
}

TomlValue parse_value(const std::string& raw, int line) {
    const std::string s = trim(raw);
    if (s.empty()) throw ConfigError("toml: empty value at line " + std::to_string(line));
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"')
            throw ConfigError("toml: unterminated string at line " + std::to_string(line));
        std::string out;
        for (size_t i = 1; i + 1 < s.size(); ++i) {
            if (s[i] == '\\' && i + 2 < s.size()) {
                ++i;
                switch (s[i]) {
                    case 'n': out.push_back('\n'); break;
                    case 't': out.push_back('\t'); break;
                    case '"': out.push_back('"'); break;
                    case '\\': out.push_back('\\'); break;
                    default:
                        throw ConfigError("toml: bad escape at line " + std::to_string(line));
                }
            } else {
                out.push_back(s[i]);
            }
        }
        return out;
    }
    if (s == "true") return true;
    if (s == "false") return false;
    // integer first, then float
    {
        int64_t iv = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), iv);
        if (ec == std::errc() && p == s.data() + s.size()) return iv;
    }
    try {
        size_t used = 0;
        const double dv = std::stod(s, &used);
        if (used == s.size()) return dv;
    } catch (...) {
    }
    throw ConfigError("toml: cannot parse value '" + s + "' at line " + std::to_string(line));
}

}  // namespace

TomlTable toml_parse(const std::string& text) {
    TomlTable out;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // strip comments outside strings
        bool in_str = false;
        for (size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        const std::string s = trim(line);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']')
                throw ConfigError("toml: bad table header at line " + std::to_string(lineno));
            section = trim(s.substr(1, s.size() - 2));
            if (!valid_key(section))
                throw ConfigError("toml: bad table name at line " + std::to_string(lineno));
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml: expected key = value at line " + std::to_string(lineno));
        std::string key = trim(s.substr(0, eq));
        if (!valid_key(key)) throw ConfigError("toml: bad key at line " + std::to_string(lineno));
        if (!section.empty()) key = section + "." + key;
        out[key] = parse_value(s.substr(eq + 1), lineno);
    }
    return out;
}

TomlTable toml_parse_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config file: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return toml_parse(ss.str());
}

std::pair<std::string, TomlValue> toml_parse_override(const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + kv);
    std::string key = trim(kv.substr(0, eq));
    if (!valid_key(key)) throw ConfigError("override has invalid key: " + kv);
    std::string val = trim(kv.substr(eq + 1));
    // bare strings are allowed on the command line
    try {
        return {key, parse_value(val, 0)};
    } catch (const ConfigError&) {
        return {key, TomlValue(val)};
    }
}

std::string toml_value_str(const TomlValue& v) {
    std::ostringstream os;
    if (std::holds_alternative<int64_t>(v)) {
        os << std::get<int64_t>(v);
    } else if (std::holds_alternative<double>(v)) {
        os.precision(17);
        os << std::get<double>(v);
    } else if (std::holds_alternative<bool>(v)) {
        os << (std::get<bool>(v) ? "true" : "false");
    } else {
        os << '"';
        for (char c : std::get<std::string>(v)) {
            if (c == '"' || c == '\\') os << '\\';
            os << c;
        }
        os << '"';
    }
    return os.str();
}

std::string toml_emit(const TomlTable& t) {
    std::ostringstream os;
    for (const auto& [k, v] : t) os << k << " = " << toml_value_str(v) << "\n";
    return os.str();
}

}  // namespace ccis
