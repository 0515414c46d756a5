#pragma once

// Flat key-value experiment configuration.
//
//   # comment
//   variant = sdda
//   schedule.lambda = 0.5
//   [shift]                 # prefixes following keys with "shift."
//   translation = 0.5, -0.3
//
// Every key is typed and checked; unknown keys are errors.

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sdda/errors.hpp"
#include "sdda/trainer.hpp"

namespace sdda {

namespace detail {

inline std::string trim(const std::string& s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline std::string where(std::size_t line) {
    return line ? "config line " + std::to_string(line) : std::string("config override");
}

inline std::string unquote(const std::string& s) {
    if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
        return s.substr(1, s.size() - 2);
    }
    return s;
}

struct ConfigValue {
    std::string text;
    std::size_t line = 0;
    std::string key;

    [[noreturn]] void fail(const std::string& what) const {
        throw ConfigError(where(line) + ": key '" + key + "': " + what);
    }

    double as_double() const {
        const std::string s = unquote(text);
        double v = 0.0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) fail("expected a number, got '" + text + "'");
        return v;
    }

    std::uint64_t as_unsigned() const {
        const std::string s = unquote(text);
        std::uint64_t v = 0;
        const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
            fail("expected a non-negative integer, got '" + text + "'");
        }
        return v;
    }

    bool as_bool() const {
        const std::string s = unquote(text);
        if (s == "true" || s == "1") return true;
        if (s == "false" || s == "0") return false;
        fail("expected true or false, got '" + text + "'");
    }

    std::string as_string() const { return unquote(text); }

    std::vector<double> as_list() const {
        std::string s = trim(text);
        if (!s.empty() && s.front() == '[' && s.back() == ']') s = s.substr(1, s.size() - 2);
        std::vector<double> out;
        std::istringstream in(s);
        std::string item;
        while (std::getline(in, item, ',')) {
            ConfigValue v{trim(item), line, key};
            out.push_back(v.as_double());
        }
        if (out.empty()) fail("expected a comma-separated list of numbers");
        return out;
    }
};

using Setter = std::function<void(ExperimentConfig&, const ConfigValue&)>;

inline const std::map<std::string, Setter>& config_setters() {
    static const std::map<std::string, Setter> setters = [] {
        std::map<std::string, Setter> m;
        auto size = [](std::size_t ExperimentConfig::*field) {
            return [field](ExperimentConfig& c, const ConfigValue& v) { c.*field = v.as_unsigned(); };
        };
        m["variant"] = [](ExperimentConfig& c, const ConfigValue& v) {
            const auto parsed = parse_variant(v.as_string());
            if (!parsed) v.fail("unknown variant '" + v.as_string() + "' (baseline|sdda|sdda_p|sdda_g|oracle|plugin_mmd)");
            c.variant = *parsed;
        };
        m["seed"] = [](ExperimentConfig& c, const ConfigValue& v) { c.seed = v.as_unsigned(); };
        m["run_id"] = [](ExperimentConfig& c, const ConfigValue& v) {
            c.run_id = v.as_string();
            if (c.run_id.empty() || c.run_id.find_first_of(",\n") != std::string::npos) v.fail("run id must be non-empty without commas");
        };
        m["epochs"] = size(&ExperimentConfig::epochs);
        m["generation_epochs"] = size(&ExperimentConfig::generation_epochs);
        m["batch_size"] = size(&ExperimentConfig::batch_size);
        m["hidden"] = size(&ExperimentConfig::hidden);
        m["latent_dim"] = size(&ExperimentConfig::latent_dim);
        m["generated_count"] = size(&ExperimentConfig::generated_count);
        m["eval_every"] = size(&ExperimentConfig::eval_every);
        m["discrepancy_every"] = size(&ExperimentConfig::discrepancy_every);
        m["stall_window"] = size(&ExperimentConfig::stall_window);
        m["saturating_generator"] = [](ExperimentConfig& c, const ConfigValue& v) { c.saturating_generator = v.as_bool(); };
        m["mmd_bandwidth"] = [](ExperimentConfig& c, const ConfigValue& v) { c.mmd_bandwidth = v.as_double(); };

        m["data.kind"] = [](ExperimentConfig& c, const ConfigValue& v) {
            const std::string s = v.as_string();
            if (s == "two_moons") {
                c.data.kind = DatasetKind::TwoMoons;
            } else if (s == "blobs") {
                c.data.kind = DatasetKind::Blobs;
                if (c.data.classes < 3) c.data.classes = 3;
            } else {
                v.fail("unknown dataset kind '" + s + "' (two_moons|blobs)");
            }
        };
        m["data.samples"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.samples = v.as_unsigned(); };
        m["data.noise"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.noise = v.as_double(); };
        m["data.classes"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.classes = v.as_unsigned(); };
        m["data.blob_spread"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.blob_spread = v.as_double(); };
        m["data.blob_radius"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.blob_radius = v.as_double(); };
        m["data.test_fraction"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.test_fraction = v.as_double(); };

        m["shift.rotation_deg"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.shift.rotation_deg = v.as_double(); };
        m["shift.translation"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.shift.translation = v.as_list(); };
        m["shift.scale"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.shift.scale = v.as_list(); };
        m["shift.noise_std"] = [](ExperimentConfig& c, const ConfigValue& v) { c.data.shift.noise_std = v.as_double(); };

        m["schedule.delta"] = [](ExperimentConfig& c, const ConfigValue& v) { c.schedule.delta = v.as_double(); };
        m["schedule.alpha0"] = [](ExperimentConfig& c, const ConfigValue& v) { c.schedule.alpha0 = v.as_double(); };
        m["schedule.beta0"] = [](ExperimentConfig& c, const ConfigValue& v) { c.schedule.beta0 = v.as_double(); };
        m["schedule.decay"] = [](ExperimentConfig& c, const ConfigValue& v) { c.schedule.decay = v.as_double(); };
        m["schedule.lambda"] = [](ExperimentConfig& c, const ConfigValue& v) { c.schedule.lambda = v.as_double(); };
        m["schedule.mu_gate_fraction"] = [](ExperimentConfig& c, const ConfigValue& v) { c.mu_gate_fraction = v.as_double(); };

        m["adam.learning_rate"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adam.learning_rate = v.as_double(); };
        m["adam.beta1"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adam.beta1 = v.as_double(); };
        m["adam.beta2"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adam.beta2 = v.as_double(); };
        m["adam.epsilon"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adam.epsilon = v.as_double(); };

        m["adapt_adam.learning_rate"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adapt_adam.learning_rate = v.as_double(); };
        m["adapt_adam.beta1"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adapt_adam.beta1 = v.as_double(); };
        m["adapt_adam.beta2"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adapt_adam.beta2 = v.as_double(); };
        m["adapt_adam.epsilon"] = [](ExperimentConfig& c, const ConfigValue& v) { c.adapt_adam.epsilon = v.as_double(); };

        m["pretrain.epochs"] = [](ExperimentConfig& c, const ConfigValue& v) { c.pretrain.epochs = v.as_unsigned(); };
        m["pretrain.batch_size"] = [](ExperimentConfig& c, const ConfigValue& v) { c.pretrain.batch_size = v.as_unsigned(); };
        m["pretrain.learning_rate"] = [](ExperimentConfig& c, const ConfigValue& v) { c.pretrain.learning_rate = v.as_double(); };
        m["pretrain.min_accuracy"] = [](ExperimentConfig& c, const ConfigValue& v) { c.pretrain.min_accuracy = v.as_double(); };
        m["pretrain.test_fraction"] = [](ExperimentConfig& c, const ConfigValue& v) { c.pretrain.test_fraction = v.as_double(); };

        m["losses.lik"] = [](ExperimentConfig& c, const ConfigValue& v) { c.losses.lik = v.as_bool(); };
        m["losses.adv"] = [](ExperimentConfig& c, const ConfigValue& v) { c.losses.adv = v.as_bool(); };
        m["losses.crs"] = [](ExperimentConfig& c, const ConfigValue& v) { c.losses.crs = v.as_bool(); };
        m["losses.dis"] = [](ExperimentConfig& c, const ConfigValue& v) { c.losses.dis = v.as_bool(); };
        m["losses.cls"] = [](ExperimentConfig& c, const ConfigValue& v) { c.losses.cls = v.as_bool(); };
        return m;
    }();
    return setters;
}

// Invariants checked after all keys are applied; the message names the key.
inline void validate_config(const ExperimentConfig& c) {
    auto bad = [](const std::string& key, const std::string& constraint) {
        throw ConfigError("config: key '" + key + "' violates " + constraint);
    };
    if (!(c.schedule.delta >= 0.0)) bad("schedule.delta", "delta >= 0");
    if (!(c.schedule.alpha0 >= 0.0)) bad("schedule.alpha0", "alpha0 >= 0");
    if (!(c.schedule.beta0 >= 0.0)) bad("schedule.beta0", "beta0 >= 0");
    if (!(c.schedule.lambda >= 0.0)) bad("schedule.lambda", "lambda >= 0");
    if (!(c.schedule.decay > 0.0 && c.schedule.decay <= 1.0)) bad("schedule.decay", "0 < decay <= 1");
    if (!(c.mu_gate_fraction >= 0.0 && c.mu_gate_fraction <= 1.0)) bad("schedule.mu_gate_fraction", "0 <= fraction <= 1");
    if (c.epochs == 0) bad("epochs", "epochs > 0");
    if (c.batch_size == 0) bad("batch_size", "batch_size > 0");
    if (c.hidden == 0) bad("hidden", "hidden > 0");
    if (c.latent_dim == 0) bad("latent_dim", "latent_dim > 0");
    if (c.eval_every == 0) bad("eval_every", "eval_every > 0");
    if (c.stall_window == 0) bad("stall_window", "stall_window > 0");
    if (c.variant == Variant::SddaG && c.generated_count == 0) bad("generated_count", "generated_count > 0 for sdda_g");
    if (c.data.samples < 10) bad("data.samples", "samples >= 10");
    if (!(c.data.noise >= 0.0)) bad("data.noise", "noise >= 0");
    if (c.data.kind == DatasetKind::Blobs && c.data.classes < 2) bad("data.classes", "classes >= 2");
    if (!(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0)) bad("data.test_fraction", "0 < fraction < 1");
    if (!(c.data.blob_spread >= 0.0)) bad("data.blob_spread", "spread >= 0");
    if (c.data.shift.translation.size() != 2) bad("shift.translation", "exactly 2 entries");
    if (c.data.shift.scale.size() != 2) bad("shift.scale", "exactly 2 entries");
    for (double s : c.data.shift.scale) {
        if (!(s > 0.0)) bad("shift.scale", "scale factors > 0");
    }
    if (!(c.data.shift.noise_std >= 0.0)) bad("shift.noise_std", "noise_std >= 0");
    if (!(c.adam.learning_rate > 0.0)) bad("adam.learning_rate", "learning_rate > 0");
    if (!(c.adam.beta1 >= 0.0 && c.adam.beta1 < 1.0)) bad("adam.beta1", "0 <= beta1 < 1");
    if (!(c.adam.beta2 >= 0.0 && c.adam.beta2 < 1.0)) bad("adam.beta2", "0 <= beta2 < 1");
    if (!(c.adam.epsilon > 0.0)) bad("adam.epsilon", "epsilon > 0");
    if (!(c.adapt_adam.learning_rate > 0.0)) bad("adapt_adam.learning_rate", "learning_rate > 0");
    if (!(c.adapt_adam.beta1 >= 0.0 && c.adapt_adam.beta1 < 1.0)) bad("adapt_adam.beta1", "0 <= beta1 < 1");
    if (!(c.adapt_adam.beta2 >= 0.0 && c.adapt_adam.beta2 < 1.0)) bad("adapt_adam.beta2", "0 <= beta2 < 1");
    if (!(c.adapt_adam.epsilon > 0.0)) bad("adapt_adam.epsilon", "epsilon > 0");
    if (c.pretrain.epochs == 0) bad("pretrain.epochs", "epochs > 0");
    if (c.pretrain.batch_size == 0) bad("pretrain.batch_size", "batch_size > 0");
    if (!(c.pretrain.learning_rate > 0.0)) bad("pretrain.learning_rate", "learning_rate > 0");
    if (!(c.pretrain.min_accuracy >= 0.0 && c.pretrain.min_accuracy <= 1.0)) bad("pretrain.min_accuracy", "0 <= accuracy <= 1");
    if (!(c.pretrain.test_fraction > 0.0 && c.pretrain.test_fraction < 1.0)) bad("pretrain.test_fraction", "0 < fraction < 1");
    if (!(c.mmd_bandwidth >= 0.0)) bad("mmd_bandwidth", "mmd_bandwidth >= 0");
}

} // namespace detail

// Applies one `key = value` assignment; used for files and for overrides.
inline void apply_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value, std::size_t line = 0) {
    const auto& setters = detail::config_setters();
    const auto it = setters.find(key);
    if (it == setters.end()) {
        throw ConfigError(detail::where(line) + ": unknown key '" + key + "'");
    }
    it->second(cfg, detail::ConfigValue{detail::trim(value), line, key});
}

inline ExperimentConfig parse_config_text(const std::string& text, ExperimentConfig cfg = {}) {
    std::istringstream in(text);
    std::string raw;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        apply_config_value(cfg, key, line.substr(eq + 1), line_no);
    }
    detail::validate_config(cfg);
    return cfg;
}

inline ExperimentConfig parse_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot read " + path.string());
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str());
}

// Applies `key=value` overrides on top of a parsed config and re-validates.
inline ExperimentConfig with_overrides(ExperimentConfig cfg, const std::vector<std::string>& assignments) {
    for (const std::string& a : assignments) {
        const auto eq = a.find('=');
        if (eq == std::string::npos) throw ConfigError("config override '" + a + "': expected key=value");
        apply_config_value(cfg, detail::trim(a.substr(0, eq)), a.substr(eq + 1));
    }
    detail::validate_config(cfg);
    return cfg;
}

// Every accepted key, sorted; for usage text.
inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& [k, _] : detail::config_setters()) keys.push_back(k);
    return keys;
}

} // namespace sdda
