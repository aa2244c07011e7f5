#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "grow/conditioning.hpp"
#include "grow/diffusion.hpp"
#include "grow/dit.hpp"

namespace grow {

// Flat `key = value` config. Strings are double-quoted with \" \\ \t \n
// escapes; `#` starts a comment line; unknown keys are rejected. Every key
// has a default except the path keys, which may be absent.
struct Config {
    ModelConfig model;

    int64_t sched_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 2e-2;

    int64_t train_steps = 2000;
    double lr = 1e-3;
    int64_t batch = 8;
    uint64_t seed = 0;
    int64_t dataset_size = 512;
    uint64_t data_seed = 1234;
    double p_drop_llm = 0.01;
    double p_drop_all = 0.001;
    double s_t5 = 7.0;
    double s_llm = 12.5;
    int64_t sample_steps = 50;
    int64_t verify_probes = 8;

    int64_t len_t5 = 16;
    int64_t len_llm = 24;
    int64_t vocab_t5 = 4096;
    int64_t vocab_llm = 8192;
    uint64_t seed_t5 = 17;
    uint64_t seed_llm = 23;
    std::string template_prefix = "[INST] Describe and generate: ";
    std::string template_suffix = " [/INST]";
    std::string separator = ". ";
    std::string sample_prompt = "square moving right";
    std::string sample_prompt_long = "";
    std::string freeze_prefixes = "";  // comma-separated parameter-name prefixes

    // paths: no defaults, may stay empty
    std::string ckpt;
    std::string out;
    std::string metrics;
    std::string prompts;

    static Config parse_text(const std::string& text);
    static Config parse_file(const std::string& path);
    std::string serialize() const;

    EncoderConfig encoder_config() const {
        EncoderConfig enc;
        enc.t5 = StubSpec{len_t5, model.d_t5, vocab_t5, seed_t5};
        enc.llm = StubSpec{len_llm, model.d_llm, vocab_llm, seed_llm};
        enc.tmpl = TemplateSpec{template_prefix, template_suffix};
        enc.separator = separator;
        return enc;
    }

    NoiseSchedule schedule() const { return NoiseSchedule::linear(sched_steps, beta_start, beta_end); }

    DropoutPolicy dropout_policy() const { return DropoutPolicy{p_drop_llm, p_drop_all}; }

    GuidanceScales guidance() const { return GuidanceScales{s_t5, s_llm}; }

    std::vector<std::string> freeze_prefix_list() const {
        std::vector<std::string> out_list;
        std::string cur;
        for (char c : freeze_prefixes) {
            if (c == ',') {
                if (!cur.empty()) out_list.push_back(cur);
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
        if (!cur.empty()) out_list.push_back(cur);
        return out_list;
    }
};

namespace detail {

inline std::string quote_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            default: out += c;
        }
    }
    return out + "\"";
}

inline std::string unquote_string(const std::string& s, const std::string& key) {
    if (s.size() < 2 || s.front() != '"' || s.back() != '"')
        fail(ErrorKind::config, "config: string value for '" + key + "' must be double-quoted");
    std::string out;
    for (size_t i = 1; i + 1 < s.size(); ++i) {
        char c = s[i];
        if (c == '\\') {
            if (i + 1 >= s.size() - 1) fail(ErrorKind::config, "config: dangling escape in '" + key + "'");
            char e = s[++i];
            switch (e) {
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                case 't': out += '\t'; break;
                case 'n': out += '\n'; break;
                default: fail(ErrorKind::config, std::string("config: bad escape '\\") + e + "' in '" + key + "'");
            }
        } else {
            out += c;
        }
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct ConfigField {
    std::function<void(Config&, const std::string&, const std::string& key)> set;
    std::function<std::string(const Config&)> get;
    bool is_path = false;
};

inline const std::vector<std::pair<std::string, ConfigField>>& config_fields() {
    auto i64 = [](int64_t Config::*mem) {
        return ConfigField{
            [mem](Config& c, const std::string& v, const std::string& key) {
                try {
                    c.*mem = std::stoll(v);
                } catch (const std::exception&) {
                    fail(ErrorKind::config, "config: bad integer for '" + key + "': " + v);
                }
            },
            [mem](const Config& c) { return std::to_string(c.*mem); }};
    };
    auto u64 = [](uint64_t Config::*mem) {
        return ConfigField{
            [mem](Config& c, const std::string& v, const std::string& key) {
                try {
                    c.*mem = std::stoull(v);
                } catch (const std::exception&) {
                    fail(ErrorKind::config, "config: bad integer for '" + key + "': " + v);
                }
            },
            [mem](const Config& c) { return std::to_string(c.*mem); }};
    };
    auto f64 = [](double Config::*mem) {
        return ConfigField{
            [mem](Config& c, const std::string& v, const std::string& key) {
                try {
                    size_t pos = 0;
                    c.*mem = std::stod(v, &pos);
                    if (pos != v.size()) throw std::invalid_argument(v);
                } catch (const std::exception&) {
                    fail(ErrorKind::config, "config: bad real for '" + key + "': " + v);
                }
            },
            [mem](const Config& c) { return format_double(c.*mem); }};
    };
    auto str = [](std::string Config::*mem, bool is_path = false) {
        return ConfigField{
            [mem](Config& c, const std::string& v, const std::string& key) {
                c.*mem = unquote_string(v, key);
            },
            [mem](const Config& c) { return quote_string(c.*mem); }, is_path};
    };
    auto mi64 = [](int64_t ModelConfig::*mem) {
        return ConfigField{
            [mem](Config& c, const std::string& v, const std::string& key) {
                try {
                    c.model.*mem = std::stoll(v);
                } catch (const std::exception&) {
                    fail(ErrorKind::config, "config: bad integer for '" + key + "': " + v);
                }
            },
            [mem](const Config& c) { return std::to_string(c.model.*mem); }};
    };

    static const std::vector<std::pair<std::string, ConfigField>> fields = {
        {"channels", mi64(&ModelConfig::channels)},
        {"frames", mi64(&ModelConfig::frames)},
        {"height", mi64(&ModelConfig::height)},
        {"width", mi64(&ModelConfig::width)},
        {"hidden", mi64(&ModelConfig::hidden)},
        {"heads", mi64(&ModelConfig::heads)},
        {"blocks", mi64(&ModelConfig::blocks)},
        {"ffn_mult", mi64(&ModelConfig::ffn_mult)},
        {"d_t5", mi64(&ModelConfig::d_t5)},
        {"d_llm", mi64(&ModelConfig::d_llm)},
        {"llm_branch",
         ConfigField{[](Config& c, const std::string& v, const std::string& key) {
                         if (v == "true") c.model.llm_branch = true;
                         else if (v == "false") c.model.llm_branch = false;
                         else fail(ErrorKind::config, "config: bad bool for '" + key + "': " + v);
                     },
                     [](const Config& c) { return c.model.llm_branch ? "true" : "false"; }}},
        {"sched_steps", i64(&Config::sched_steps)},
        {"beta_start", f64(&Config::beta_start)},
        {"beta_end", f64(&Config::beta_end)},
        {"train_steps", i64(&Config::train_steps)},
        {"lr", f64(&Config::lr)},
        {"batch", i64(&Config::batch)},
        {"seed", u64(&Config::seed)},
        {"dataset_size", i64(&Config::dataset_size)},
        {"data_seed", u64(&Config::data_seed)},
        {"p_drop_llm", f64(&Config::p_drop_llm)},
        {"p_drop_all", f64(&Config::p_drop_all)},
        {"s_t5", f64(&Config::s_t5)},
        {"s_llm", f64(&Config::s_llm)},
        {"sample_steps", i64(&Config::sample_steps)},
        {"verify_probes", i64(&Config::verify_probes)},
        {"len_t5", i64(&Config::len_t5)},
        {"len_llm", i64(&Config::len_llm)},
        {"vocab_t5", i64(&Config::vocab_t5)},
        {"vocab_llm", i64(&Config::vocab_llm)},
        {"seed_t5", u64(&Config::seed_t5)},
        {"seed_llm", u64(&Config::seed_llm)},
        {"template_prefix", str(&Config::template_prefix)},
        {"template_suffix", str(&Config::template_suffix)},
        {"separator", str(&Config::separator)},
        {"sample_prompt", str(&Config::sample_prompt)},
        {"sample_prompt_long", str(&Config::sample_prompt_long)},
        {"freeze_prefixes", str(&Config::freeze_prefixes)},
        {"ckpt", str(&Config::ckpt, true)},
        {"out", str(&Config::out, true)},
        {"metrics", str(&Config::metrics, true)},
        {"prompts", str(&Config::prompts, true)},
    };
    return fields;
}

}  // namespace detail

inline Config Config::parse_text(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos) continue;
        if (line[start] == '#') continue;
        size_t eq = line.find('=', start);
        if (eq == std::string::npos)
            fail(ErrorKind::config, "config line " + std::to_string(lineno) + ": expected key = value");
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string val = line.substr(eq + 1);
        size_t vs = val.find_first_not_of(" \t");
        val = vs == std::string::npos ? "" : val.substr(vs);
        while (!val.empty() && (val.back() == ' ' || val.back() == '\t' || val.back() == '\r')) val.pop_back();

        bool found = false;
        for (const auto& [name, field] : detail::config_fields()) {
            if (name == key) {
                field.set(cfg, val, key);
                found = true;
                break;
            }
        }
        if (!found) fail(ErrorKind::config, "config: unknown key '" + key + "'");
    }
    cfg.model.validate();
    return cfg;
}

inline Config Config::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::config, "cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

inline std::string Config::serialize() const {
    std::ostringstream os;
    for (const auto& [name, field] : detail::config_fields()) {
        if (field.is_path) {
            // unset paths are omitted so serialize/parse is a fixed point
            std::string v = field.get(*this);
            if (v == "\"\"") continue;
        }
        os << name << " = " << field.get(*this) << "\n";
    }
    return os.str();
}

}  // namespace grow
