#pragma once

// Flat "key = value" run configuration. '#' starts a comment; blank lines
// are ignored; unknown or repeated keys are errors.

#include <charconv>
#include <iomanip>
#include <filesystem>
#include <sstream>

#include "cen/blocks.hpp"
#include "cen/dataset.hpp"
#include "cen/optim.hpp"

namespace cen {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    NetworkConfig network;
    StepDecaySchedule schedule;
    AugmentSpec augment;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    std::filesystem::path data_root;
    std::filesystem::path eval_root;
    std::filesystem::path output_dir = "run";
    std::uint64_t checkpoint_every = 10000;
    std::uint64_t log_every = 100;
    std::size_t prefetch_workers = 2;

    /// Checks values and, when `check_paths` is set, that the dataset
    /// directories exist.
    void validate(bool check_paths = false) const {
        network.validate();
        schedule.validate();
        if (augment.crop_size == 0) throw ConfigError("crop_size must be positive");
        if (augment.crop_size % network.spatial_divisor() != 0)
            throw ConfigError("crop_size " + std::to_string(augment.crop_size) + " is not divisible by 2^num_stages = " +
                              std::to_string(network.spatial_divisor()));
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (checkpoint_every == 0) throw ConfigError("checkpoint_every must be positive");
        if (log_every == 0) throw ConfigError("log_every must be positive");
        if (check_paths) {
            if (data_root.empty()) throw ConfigError("data_root is not set");
            if (!std::filesystem::is_directory(data_root))
                throw ConfigError("data_root " + data_root.string() + " is not a directory");
            if (!eval_root.empty() && !std::filesystem::is_directory(eval_root))
                throw ConfigError("eval_root " + eval_root.string() + " is not a directory");
        }
    }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

template <typename U>
U parse_integer(const std::string& v, const std::string& key) {
    U out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || ptr != v.data() + v.size())
        throw ConfigError("key '" + key + "': expected an integer, got '" + v + "'");
    return out;
}

inline double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "': expected true or false, got '" + v + "'");
}

inline std::vector<int> parse_levels(const std::string& v, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_integer<int>(item, key));
    }
    return out;
}

inline std::string format_real(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

}  // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& v) {
    using namespace detail;
    if (key == "num_stages") cfg.network.num_stages = parse_integer<int>(v, key);
    else if (key == "base_channels") cfg.network.base_channels = parse_integer<int>(v, key);
    else if (key == "use_global_context") cfg.network.use_global_context = parse_bool(v, key);
    else if (key == "use_local_context") cfg.network.use_local_context = parse_bool(v, key);
    else if (key == "global_context_levels") cfg.network.global_context_levels = parse_levels(v, key);
    else if (key == "upsample") {
        if (v == "nearest") cfg.network.upsample = UpsampleMode::nearest;
        else if (v == "bilinear") cfg.network.upsample = UpsampleMode::bilinear;
        else throw ConfigError("key 'upsample': expected nearest or bilinear, got '" + v + "'");
    }
    else if (key == "learning_rate") cfg.schedule.initial_lr = parse_real(v, key);
    else if (key == "lr_decay_factor") cfg.schedule.decay_factor = parse_real(v, key);
    else if (key == "lr_decay_every") cfg.schedule.decay_every = parse_integer<std::uint64_t>(v, key);
    else if (key == "total_iters") cfg.schedule.total_iters = parse_integer<std::uint64_t>(v, key);
    else if (key == "crop_size") cfg.augment.crop_size = parse_integer<std::size_t>(v, key);
    else if (key == "flip") cfg.augment.enable_flip = parse_bool(v, key);
    else if (key == "rotate") cfg.augment.enable_rotation = parse_bool(v, key);
    else if (key == "batch_size") cfg.batch_size = parse_integer<std::size_t>(v, key);
    else if (key == "seed") cfg.seed = cfg.augment.rng_seed = parse_integer<std::uint64_t>(v, key);
    else if (key == "data_root") cfg.data_root = v;
    else if (key == "eval_root") cfg.eval_root = v;
    else if (key == "output_dir") cfg.output_dir = v;
    else if (key == "checkpoint_every") cfg.checkpoint_every = parse_integer<std::uint64_t>(v, key);
    else if (key == "log_every") cfg.log_every = parse_integer<std::uint64_t>(v, key);
    else if (key == "prefetch_workers") cfg.prefetch_workers = parse_integer<std::size_t>(v, key);
    else throw ConfigError("unknown key '" + key + "'");
}

inline RunConfig parse_run_config(std::string_view text) {
    RunConfig cfg;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        ++line_no;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        const std::string where = "line " + std::to_string(line_no) + ": ";
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = detail::trim(std::string_view(line).substr(0, eq));
        const std::string value = detail::trim(std::string_view(line).substr(eq + 1));
        if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
        try {
            set_config_value(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    try {
        cfg.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
        return parse_run_config(ss.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

inline std::string to_text(const RunConfig& cfg) {
    std::ostringstream os;
    const auto flag = [](bool b) { return b ? "true" : "false"; };
    os << "num_stages = " << cfg.network.num_stages << '\n'
       << "base_channels = " << cfg.network.base_channels << '\n'
       << "use_global_context = " << flag(cfg.network.use_global_context) << '\n'
       << "use_local_context = " << flag(cfg.network.use_local_context) << '\n';
    os << "global_context_levels = ";
    for (std::size_t i = 0; i < cfg.network.global_context_levels.size(); ++i)
        os << (i ? "," : "") << cfg.network.global_context_levels[i];
    os << '\n'
       << "upsample = " << (cfg.network.upsample == UpsampleMode::nearest ? "nearest" : "bilinear") << '\n'
       << "learning_rate = " << detail::format_real(cfg.schedule.initial_lr) << '\n'
       << "lr_decay_factor = " << detail::format_real(cfg.schedule.decay_factor) << '\n'
       << "lr_decay_every = " << cfg.schedule.decay_every << '\n'
       << "total_iters = " << cfg.schedule.total_iters << '\n'
       << "crop_size = " << cfg.augment.crop_size << '\n'
       << "flip = " << flag(cfg.augment.enable_flip) << '\n'
       << "rotate = " << flag(cfg.augment.enable_rotation) << '\n'
       << "batch_size = " << cfg.batch_size << '\n'
       << "seed = " << cfg.seed << '\n'
       << "data_root = " << cfg.data_root.string() << '\n'
       << "eval_root = " << cfg.eval_root.string() << '\n'
       << "output_dir = " << cfg.output_dir.string() << '\n'
       << "checkpoint_every = " << cfg.checkpoint_every << '\n'
       << "log_every = " << cfg.log_every << '\n'
       << "prefetch_workers = " << cfg.prefetch_workers << '\n';
    return os.str();
}

}  // namespace cen
