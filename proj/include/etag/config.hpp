#pragma once

// Run configuration. Stored as JSON; every key a user supplies must exist in
// the defaults, so typos fail before any work starts.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "etag/errors.hpp"
#include "json.hpp"

namespace etag {

enum class Method { eTag, B0, B1, B2, B3, Fine, Joint };

inline const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names{"eTag", "B0", "B1", "B2", "B3", "Fine", "Joint"};
    return names;
}

inline std::string to_string(Method m) { return method_names().at(static_cast<std::size_t>(m)); }

inline Method parse_method(const std::string& name) {
    const auto& names = method_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == name) return static_cast<Method>(i);
    throw DomainError("unknown method/variant '" + name + "'");
}

struct DataConfig {
    std::string source = "synthetic";  // "synthetic" or "idx"
    std::size_t classes = 8;
    std::size_t dim = 16;
    double separation = 3.0;
    std::size_t samples_per_class = 250;
    std::string split = "equal";       // "equal" or "first_fraction"
    std::size_t tasks = 4;             // equal split
    double first_fraction = 0.5;       // first_fraction split
    std::size_t increments = 5;
    std::string train_images;
    std::string train_labels;
    std::string test_images;
    std::string test_labels;
};

struct SolverTrainConfig {
    std::vector<std::size_t> widths{8, 16, 32, 64};
    std::size_t epochs = 20;
    double lr = 1e-3;
    std::size_t batch_size = 64;
    double decay_at = 2.0 / 3.0;  // fraction of epochs after which lr is divided by 10
};

struct GeneratorTrainConfig {
    std::size_t latent_dim = 32;
    std::size_t hidden = 128;
    std::size_t epochs = 30;
    double lr = 1e-4;
    std::size_t batch_size = 64;
    double decay_at = 2.0 / 3.0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    Method method = Method::eTag;
    DataConfig data;
    SolverTrainConfig solver;
    GeneratorTrainConfig generator;
    double tau = 3.0;
    bool ss_ce_incremental = false;
    bool l2_squared = false;
    std::string ce_support = "task";           // "task" or "seen"
    std::string accuracy_weighting = "sample";  // "sample" or "task"
};

inline void to_json(nlohmann::json& j, const DataConfig& c) {
    j = {{"source", c.source},
         {"classes", c.classes},
         {"dim", c.dim},
         {"separation", c.separation},
         {"samples_per_class", c.samples_per_class},
         {"split", c.split},
         {"tasks", c.tasks},
         {"first_fraction", c.first_fraction},
         {"increments", c.increments},
         {"train_images", c.train_images},
         {"train_labels", c.train_labels},
         {"test_images", c.test_images},
         {"test_labels", c.test_labels}};
}

inline void from_json(const nlohmann::json& j, DataConfig& c) {
    c.source = j.at("source").get<std::string>();
    c.classes = j.at("classes").get<std::size_t>();
    c.dim = j.at("dim").get<std::size_t>();
    c.separation = j.at("separation").get<double>();
    c.samples_per_class = j.at("samples_per_class").get<std::size_t>();
    c.split = j.at("split").get<std::string>();
    c.tasks = j.at("tasks").get<std::size_t>();
    c.first_fraction = j.at("first_fraction").get<double>();
    c.increments = j.at("increments").get<std::size_t>();
    c.train_images = j.at("train_images").get<std::string>();
    c.train_labels = j.at("train_labels").get<std::string>();
    c.test_images = j.at("test_images").get<std::string>();
    c.test_labels = j.at("test_labels").get<std::string>();
}

inline void to_json(nlohmann::json& j, const SolverTrainConfig& c) {
    j = {{"widths", c.widths}, {"epochs", c.epochs}, {"lr", c.lr}, {"batch_size", c.batch_size}, {"decay_at", c.decay_at}};
}

inline void from_json(const nlohmann::json& j, SolverTrainConfig& c) {
    c.widths = j.at("widths").get<std::vector<std::size_t>>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.decay_at = j.at("decay_at").get<double>();
}

inline void to_json(nlohmann::json& j, const GeneratorTrainConfig& c) {
    j = {{"latent_dim", c.latent_dim}, {"hidden", c.hidden},         {"epochs", c.epochs},
         {"lr", c.lr},                 {"batch_size", c.batch_size}, {"decay_at", c.decay_at}};
}

inline void from_json(const nlohmann::json& j, GeneratorTrainConfig& c) {
    c.latent_dim = j.at("latent_dim").get<std::size_t>();
    c.hidden = j.at("hidden").get<std::size_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.lr = j.at("lr").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.decay_at = j.at("decay_at").get<double>();
}

inline void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"seed", c.seed},
         {"method", to_string(c.method)},
         {"data", c.data},
         {"solver", c.solver},
         {"generator", c.generator},
         {"tau", c.tau},
         {"ss_ce_incremental", c.ss_ce_incremental},
         {"l2_squared", c.l2_squared},
         {"ce_support", c.ce_support},
         {"accuracy_weighting", c.accuracy_weighting}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
    c.seed = j.at("seed").get<std::uint64_t>();
    c.method = parse_method(j.at("method").get<std::string>());
    c.data = j.at("data").get<DataConfig>();
    c.solver = j.at("solver").get<SolverTrainConfig>();
    c.generator = j.at("generator").get<GeneratorTrainConfig>();
    c.tau = j.at("tau").get<double>();
    c.ss_ce_incremental = j.at("ss_ce_incremental").get<bool>();
    c.l2_squared = j.at("l2_squared").get<bool>();
    c.ce_support = j.at("ce_support").get<std::string>();
    c.accuracy_weighting = j.at("accuracy_weighting").get<std::string>();
}

namespace detail {

// Reject keys of `user` that do not appear in `reference`; recurse into objects.
inline void check_known_keys(const nlohmann::json& user, const nlohmann::json& reference, const std::string& prefix) {
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'", key);
        if (it->is_object() && reference.at(it.key()).is_object()) check_known_keys(*it, reference.at(it.key()), key);
    }
}

// Overlay `patch` onto `base` object-wise.
inline void merge_into(nlohmann::json& base, const nlohmann::json& patch) {
    for (auto it = patch.begin(); it != patch.end(); ++it) {
        if (it->is_object() && base.contains(it.key()) && base[it.key()].is_object()) {
            merge_into(base[it.key()], *it);
        } else {
            base[it.key()] = *it;
        }
    }
}

}  // namespace detail

inline void validate(const RunConfig& c) {
    auto fail = [](const std::string& msg, const std::string& key) { throw ConfigError(msg, key); };
    if (c.data.source != "synthetic" && c.data.source != "idx") fail("data.source must be synthetic or idx", "data.source");
    if (c.data.split != "equal" && c.data.split != "first_fraction") {
        fail("data.split must be equal or first_fraction", "data.split");
    }
    if (c.ce_support != "task" && c.ce_support != "seen") fail("ce_support must be task or seen", "ce_support");
    if (c.accuracy_weighting != "sample" && c.accuracy_weighting != "task") {
        fail("accuracy_weighting must be sample or task", "accuracy_weighting");
    }
    if (!(c.tau > 0.0)) fail("tau must be positive", "tau");
    if (c.solver.widths.size() < 2) fail("solver.widths needs at least 2 stages", "solver.widths");
    if (c.solver.batch_size == 0) fail("solver.batch_size must be positive", "solver.batch_size");
    if (c.generator.batch_size == 0) fail("generator.batch_size must be positive", "generator.batch_size");
}

/// Parse a config JSON document on top of the defaults.
inline RunConfig config_from_json(const nlohmann::json& user) {
    nlohmann::json merged = RunConfig{};
    if (!user.is_object()) throw ConfigError("config must be a JSON object", "");
    detail::check_known_keys(user, merged, "");
    detail::merge_into(merged, user);
    RunConfig c;
    try {
        c = merged.get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("ill-typed config value: ") + e.what(), "");
    } catch (const DomainError& e) {
        throw ConfigError(e.what(), "method");
    }
    validate(c);
    return c;
}

/// Apply `dotted.key=value` overrides. Values parse as JSON when they can,
/// otherwise they are taken as strings.
inline RunConfig apply_overrides(const RunConfig& base, const std::vector<std::string>& overrides) {
    nlohmann::json j = base;
    for (const std::string& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' is not key=value", o);
        const std::string key = o.substr(0, eq);
        const std::string raw = o.substr(eq + 1);
        nlohmann::json* node = &j;
        std::string part;
        std::istringstream path(key);
        std::vector<std::string> parts;
        while (std::getline(path, part, '.')) parts.push_back(part);
        for (std::size_t i = 0; i < parts.size(); ++i) {
            if (!node->is_object() || !node->contains(parts[i])) {
                throw ConfigError("unknown config key '" + key + "'", key);
            }
            node = &(*node)[parts[i]];
        }
        nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
        if (value.is_discarded()) value = raw;
        *node = value;
    }
    return config_from_json(j);
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path, "");
    nlohmann::json j = nlohmann::json::parse(is, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + path + " is not valid JSON", "");
    return config_from_json(j);
}

}  // namespace etag
