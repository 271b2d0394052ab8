#pragma once
// Plain key=value run configuration shared by the command line tool and the
// acceptance scenarios. Lines are `key = value`, blank lines and # comments
// are skipped, unknown keys are errors (with the offending line number so a
// typo in a sweep script dies loudly instead of silently running defaults).

#include <nmp/simulator.hpp>

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace nmp {

struct RunConfig {
    // City and grid.
    uint64_t city_seed = 7;           // city.seed
    double city_extent_m = 600.0;     // city.extent_m
    double grid_resolution_m = 0.3;   // grid.resolution_m
    int grid_channels = 8;            // grid.channels

    // Fusion.
    std::string fusion_strategy = "ma";  // fusion.strategy
    double fusion_alpha = 0.5;           // fusion.alpha
    std::string fusion_mode = "inter";   // fusion.mode: inter | intra

    // Trips.
    int trips_count = 4;                    // trips.count
    int trips_frames = 8;                   // trips.frames
    double trips_spacing_m = 12.0;          // trips.spacing_m
    std::string trips_condition = "normal"; // trips.condition
    std::string trips_route_mode = "varied";// trips.route_mode: same | varied
    uint64_t trips_route_seed = 5;          // trips.route_seed

    // Optional overrides on top of the named condition preset. Negative
    // means "keep the preset's value".
    double condition_sigma = -1.0;      // condition.noise_sigma
    double condition_occlusion = -1.0;  // condition.occlusion_rate
    double condition_decay = -1.0;      // condition.range_decay

    // Store, service, evaluation.
    std::string store_dir;              // store.dir (empty: memory only)
    double store_resolution_m = 0.0;    // store.resolution_m (0: grid's)
    int store_capacity = 4096;          // store.capacity (resident tiles)
    bool store_freeze = false;          // store.freeze (read-only prior)
    std::string service_addr;           // service.addr (host:port)
    std::string eval_bev_preset = "near";  // eval.bev_preset

    // Seeds and weights.
    uint64_t run_seed = 1;       // run.seed (per-trip observation noise)
    uint64_t weights_seed = 7;   // weights.seed (embedding + fixed layers)
    std::string weights_path;    // weights.path (checkpoint; empty: seeded)

    void validate() const {
        parse_strategy(fusion_strategy);
        parse_mode(fusion_mode);
        if (trips_route_mode != "same" && trips_route_mode != "varied")
            throw std::invalid_argument("trips.route_mode must be same or varied");
        if (fusion_alpha < 0.0 || fusion_alpha > 1.0)
            throw std::invalid_argument("fusion.alpha outside [0,1]");
        if (trips_count < 1) throw std::invalid_argument("trips.count < 1");
        if (trips_frames < 1) throw std::invalid_argument("trips.frames < 1");
        if (trips_spacing_m <= 0.0)
            throw std::invalid_argument("trips.spacing_m must be positive");
        if (grid_channels < 4)
            throw std::invalid_argument("grid.channels < 4");
        if (store_capacity < 1)
            throw std::invalid_argument("store.capacity < 1");
        bev_preset(eval_bev_preset, grid_resolution_m, grid_channels);
        condition_preset(trips_condition);
    }

    Condition resolved_condition() const {
        Condition c = condition_preset(trips_condition);
        if (condition_sigma >= 0.0) c.noise_sigma = condition_sigma;
        if (condition_occlusion >= 0.0) c.occlusion_rate = condition_occlusion;
        if (condition_decay >= 0.0) c.range_decay = condition_decay;
        c.validate();
        return c;
    }

    nlohmann::json to_json() const {
        return {
            {"city.seed", city_seed},
            {"city.extent_m", city_extent_m},
            {"grid.resolution_m", grid_resolution_m},
            {"grid.channels", grid_channels},
            {"fusion.strategy", fusion_strategy},
            {"fusion.alpha", fusion_alpha},
            {"fusion.mode", fusion_mode},
            {"trips.count", trips_count},
            {"trips.frames", trips_frames},
            {"trips.spacing_m", trips_spacing_m},
            {"trips.condition", trips_condition},
            {"trips.route_mode", trips_route_mode},
            {"trips.route_seed", trips_route_seed},
            {"condition.noise_sigma", condition_sigma},
            {"condition.occlusion_rate", condition_occlusion},
            {"condition.range_decay", condition_decay},
            {"store.dir", store_dir},
            {"store.resolution_m", store_resolution_m},
            {"store.capacity", store_capacity},
            {"store.freeze", store_freeze},
            {"service.addr", service_addr},
            {"eval.bev_preset", eval_bev_preset},
            {"run.seed", run_seed},
            {"weights.seed", weights_seed},
            {"weights.path", weights_path},
        };
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline uint64_t parse_u64(const std::string& v) {
    uint64_t out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw std::invalid_argument("not an unsigned integer: " + v);
    return out;
}

inline int parse_int(const std::string& v) {
    int out = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size())
        throw std::invalid_argument("not an integer: " + v);
    return out;
}

inline double parse_double(const std::string& v) {
    try {
        size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("not a number: " + v);
    }
}

inline bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("not a boolean: " + v);
}

}  // namespace detail

// Applies one key=value pair. Throws invalid_argument on unknown keys or
// unparseable values; callers decorate with file/line context.
inline void apply_config_key(RunConfig& cfg, const std::string& key,
                             const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_int;
    using detail::parse_u64;
    if (key == "city.seed") cfg.city_seed = parse_u64(value);
    else if (key == "city.extent_m") cfg.city_extent_m = parse_double(value);
    else if (key == "grid.resolution_m") cfg.grid_resolution_m = parse_double(value);
    else if (key == "grid.channels") cfg.grid_channels = parse_int(value);
    else if (key == "fusion.strategy") cfg.fusion_strategy = value;
    else if (key == "fusion.alpha") cfg.fusion_alpha = parse_double(value);
    else if (key == "fusion.mode") cfg.fusion_mode = value;
    else if (key == "trips.count") cfg.trips_count = parse_int(value);
    else if (key == "trips.frames") cfg.trips_frames = parse_int(value);
    else if (key == "trips.spacing_m") cfg.trips_spacing_m = parse_double(value);
    else if (key == "trips.condition") cfg.trips_condition = value;
    else if (key == "trips.route_mode") cfg.trips_route_mode = value;
    else if (key == "trips.route_seed") cfg.trips_route_seed = parse_u64(value);
    else if (key == "condition.noise_sigma") cfg.condition_sigma = parse_double(value);
    else if (key == "condition.occlusion_rate") cfg.condition_occlusion = parse_double(value);
    else if (key == "condition.range_decay") cfg.condition_decay = parse_double(value);
    else if (key == "store.dir") cfg.store_dir = value;
    else if (key == "store.resolution_m") cfg.store_resolution_m = parse_double(value);
    else if (key == "store.capacity") cfg.store_capacity = parse_int(value);
    else if (key == "store.freeze") cfg.store_freeze = parse_bool(value);
    else if (key == "service.addr") cfg.service_addr = value;
    else if (key == "eval.bev_preset") cfg.eval_bev_preset = value;
    else if (key == "run.seed") cfg.run_seed = parse_u64(value);
    else if (key == "weights.seed") cfg.weights_seed = parse_u64(value);
    else if (key == "weights.path") cfg.weights_path = value;
    else throw std::invalid_argument("unknown config key: " + key);
}

inline RunConfig parse_config_text(const std::string& text,
                                   const std::string& origin = "<string>") {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": empty key or value");
        try {
            apply_config_key(cfg, key, value);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                        ": " + e.what());
        }
    }
    return cfg;
}

inline RunConfig load_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config file " + path);
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str(), path);
}

}  // namespace nmp
