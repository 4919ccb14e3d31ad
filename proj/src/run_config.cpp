#include "insight/run_config.hpp"

#include "insight/tensor_store.hpp"

#include <toml.hpp>

#include <functional>
#include <map>
#include <sstream>

namespace insight {

namespace fs = std::filesystem;

void RunConfig::apply_seed(std::uint64_t value) {
    seed = value;
    affinity.seed = value;
    sae.seed = value;
    probe.seed = value;
}

namespace {

using Json = nlohmann::json;

std::string where(const std::string& section, const std::string& key) {
    return section.empty() ? key : section + "." + key;
}

double get_double(const Json& v, const std::string& name) {
    if (!v.is_number()) {
        throw ConfigError("config key '" + name + "' must be a number");
    }
    return v.get<double>();
}

std::uint64_t get_count(const Json& v, const std::string& name) {
    if (!v.is_number_integer() || v.get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + name + "' must be a non-negative integer");
    }
    return v.get<std::uint64_t>();
}

bool get_bool(const Json& v, const std::string& name) {
    if (!v.is_boolean()) {
        throw ConfigError("config key '" + name + "' must be true or false");
    }
    return v.get<bool>();
}

std::string get_string(const Json& v, const std::string& name) {
    if (!v.is_string()) {
        throw ConfigError("config key '" + name + "' must be a string");
    }
    return v.get<std::string>();
}

using Setter = std::function<void(const Json&, const std::string&)>;

} // namespace

RunConfig run_config_from_json(const Json& doc, const fs::path& base_dir) {
    if (!doc.is_object()) {
        throw ConfigError("config document must be a table/object");
    }
    RunConfig cfg;
    const auto path_of = [&](const Json& v, const std::string& name) {
        const fs::path p = get_string(v, name);
        return p.is_absolute() || p.empty() ? p : base_dir / p;
    };

    std::map<std::string, std::map<std::string, Setter>> schema;
    schema["affinity"] = {
        {"lr", [&](auto& v, auto& n) { cfg.affinity.lr = get_double(v, n); }},
        {"batch_size", [&](auto& v, auto& n) { cfg.affinity.batch_size = get_count(v, n); }},
        {"epochs", [&](auto& v, auto& n) { cfg.affinity.epochs = get_count(v, n); }},
        {"gamma", [&](auto& v, auto& n) { cfg.affinity.gamma = get_double(v, n); }},
        {"d_prime", [&](auto& v, auto& n) { cfg.affinity.d_prime = get_count(v, n); }},
    };
    schema["sae"] = {
        {"m", [&](auto& v, auto& n) { cfg.sae.m = get_count(v, n); }},
        {"k", [&](auto& v, auto& n) { cfg.sae.k = get_count(v, n); }},
        {"shell_ratios",
         [&](auto& v, auto& n) {
             if (!v.is_array()) {
                 throw ConfigError("config key '" + n + "' must be an array of numbers");
             }
             cfg.sae.shell_ratios.clear();
             for (const auto& r : v) {
                 cfg.sae.shell_ratios.push_back(get_double(r, n));
             }
         }},
        {"lr", [&](auto& v, auto& n) { cfg.sae.lr = get_double(v, n); }},
        {"batch_patches", [&](auto& v, auto& n) { cfg.sae.batch_patches = get_count(v, n); }},
        {"epochs", [&](auto& v, auto& n) { cfg.sae.epochs = get_count(v, n); }},
        {"aux_coeff", [&](auto& v, auto& n) { cfg.sae.aux_coeff = get_double(v, n); }},
        {"dead_threshold", [&](auto& v, auto& n) { cfg.sae.dead_threshold = get_count(v, n); }},
        {"holdout_fraction", [&](auto& v, auto& n) { cfg.sae.holdout_fraction = get_double(v, n); }},
        {"threshold_decay", [&](auto& v, auto& n) { cfg.sae.threshold_decay = get_double(v, n); }},
    };
    schema["graph"] = {
        {"tau", [&](auto& v, auto& n) { cfg.graph_tau = get_double(v, n); }},
    };
    schema["naming"] = {
        {"alpha", [&](auto& v, auto& n) { cfg.naming.alpha = get_double(v, n); }},
        {"top_patches", [&](auto& v, auto& n) { cfg.naming.top_patches = get_count(v, n); }},
        {"vocabulary", [&](auto& v, auto& n) { cfg.vocabulary = path_of(v, n); }},
    };
    schema["metrics"] = {
        {"min_images", [&](auto& v, auto& n) { cfg.metrics_min_images = get_count(v, n); }},
    };
    schema["probe"] = {
        {"lr", [&](auto& v, auto& n) { cfg.probe.lr = get_double(v, n); }},
        {"batch_size", [&](auto& v, auto& n) { cfg.probe.batch_size = get_count(v, n); }},
        {"epochs", [&](auto& v, auto& n) { cfg.probe.epochs = get_count(v, n); }},
        {"l1", [&](auto& v, auto& n) { cfg.probe.l1 = get_double(v, n); }},
        {"weight_decay", [&](auto& v, auto& n) { cfg.probe.weight_decay = get_double(v, n); }},
        {"holdout_fraction", [&](auto& v, auto& n) { cfg.probe.holdout_fraction = get_double(v, n); }},
        {"mode", [&](auto& v, auto& n) { cfg.probe.mode = parse_pool_mode(get_string(v, n)); }},
        {"labels", [&](auto& v, auto& n) { cfg.probe_labels = path_of(v, n); }},
        {"thresholded", [&](auto& v, auto& n) { cfg.probe_thresholded = get_bool(v, n); }},
    };
    schema["segment"] = {
        {"labels", [&](auto& v, auto& n) { cfg.segment_labels = path_of(v, n); }},
        {"background", [&](auto& v, auto& n) { cfg.background = get_string(v, n); }},
        {"thresholded", [&](auto& v, auto& n) { cfg.segment_thresholded = get_bool(v, n); }},
    };
    schema["report"] = {
        {"top_n", [&](auto& v, auto& n) { cfg.top_n = get_count(v, n); }},
        {"svg", [&](auto& v, auto& n) { cfg.report_svg = get_bool(v, n); }},
    };

    std::uint64_t seed = 0;
    for (const auto& [key, value] : doc.items()) {
        if (key == "seed") {
            seed = get_count(value, key);
            continue;
        }
        const auto section = schema.find(key);
        if (section == schema.end()) {
            throw ConfigError("unknown config key '" + key + "'");
        }
        if (!value.is_object()) {
            throw ConfigError("config key '" + key + "' must be a table");
        }
        for (const auto& [name, v] : value.items()) {
            const auto setter = section->second.find(name);
            if (setter == section->second.end()) {
                throw ConfigError("unknown config key '" + where(key, name) + "'");
            }
            setter->second(v, where(key, name));
        }
    }
    cfg.apply_seed(seed);
    return cfg;
}

namespace {

Json toml_to_json(const toml::node& node, const std::string& name) {
    if (const auto* t = node.as_table()) {
        Json out = Json::object();
        for (const auto& [k, v] : *t) {
            out[std::string(k.str())] = toml_to_json(v, std::string(k.str()));
        }
        return out;
    }
    if (const auto* a = node.as_array()) {
        Json out = Json::array();
        for (const auto& v : *a) {
            out.push_back(toml_to_json(v, name));
        }
        return out;
    }
    if (const auto* v = node.as_integer()) {
        return v->get();
    }
    if (const auto* v = node.as_floating_point()) {
        return v->get();
    }
    if (const auto* v = node.as_boolean()) {
        return v->get();
    }
    if (const auto* v = node.as_string()) {
        return v->get();
    }
    throw ConfigError("config key '" + name + "' has an unsupported TOML type");
}

} // namespace

Json parse_toml_document(const std::string& text, const std::string& origin) {
    try {
        const auto table = toml::parse(text, origin);
        return toml_to_json(table, "");
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << origin << ":" << e.source().begin.line << ": " << e.description();
        throw ConfigError(msg.str());
    }
}

RunConfig load_run_config(const fs::path& path) {
    if (!fs::exists(path)) {
        throw ConfigError("config file not found: " + path.string());
    }
    const auto text = read_text(path);
    Json doc;
    if (path.extension() == ".json") {
        try {
            doc = Json::parse(text);
        } catch (const Json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
    } else if (path.extension() == ".toml") {
        doc = parse_toml_document(text, path.string());
    } else {
        throw ConfigError(path.string() + ": config must be .json or .toml");
    }
    return run_config_from_json(doc, path.parent_path());
}

nlohmann::ordered_json RunConfig::to_json() const {
    nlohmann::ordered_json out;
    out["seed"] = seed;
    out["affinity"] = {{"lr", affinity.lr},         {"batch_size", affinity.batch_size},
                       {"epochs", affinity.epochs}, {"gamma", affinity.gamma},
                       {"d_prime", affinity.d_prime}};
    out["sae"] = {{"m", sae.m},
                  {"k", sae.k},
                  {"shell_ratios", sae.shell_ratios},
                  {"lr", sae.lr},
                  {"batch_patches", sae.batch_patches},
                  {"epochs", sae.epochs},
                  {"aux_coeff", sae.aux_coeff},
                  {"dead_threshold", sae.dead_threshold},
                  {"holdout_fraction", sae.holdout_fraction},
                  {"threshold_decay", sae.threshold_decay}};
    out["graph"] = {{"tau", graph_tau}};
    out["naming"] = {{"alpha", naming.alpha}, {"top_patches", naming.top_patches}, {"vocabulary", vocabulary.string()}};
    out["metrics"] = {{"min_images", metrics_min_images}};
    out["probe"] = {{"lr", probe.lr},
                    {"batch_size", probe.batch_size},
                    {"epochs", probe.epochs},
                    {"l1", probe.l1},
                    {"weight_decay", probe.weight_decay},
                    {"holdout_fraction", probe.holdout_fraction},
                    {"mode", pool_mode_name(probe.mode)},
                    {"labels", probe_labels.string()},
                    {"thresholded", probe_thresholded}};
    out["segment"] = {
        {"labels", segment_labels.string()}, {"background", background}, {"thresholded", segment_thresholded}};
    out["report"] = {{"top_n", top_n}, {"svg", report_svg}};
    return out;
}

} // namespace insight
