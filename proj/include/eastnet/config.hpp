#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "eastnet/data.hpp"
#include "eastnet/models.hpp"
#include "eastnet/train_eval.hpp"

namespace eastnet {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// key=value run configuration; unknown keys are rejected. Event entries use
//   event.<i> = kind,start,duration,recovery_shape,recovery_slots,s1:s2:...
struct RunConfig {
    // data
    int T = 4800, N = 12, C = 4, slot_minutes = 30;
    double base_scale = 20.0, noise_level = 0.4;
    uint64_t data_seed = 7;
    EventScript script;

    // model (settings defaults)
    VariantKind variant = VariantKind::EASTNet;
    int alpha = 8, beta = 8, q = 32, K = 3, L = 2, m = 8, D = 16;
    int mu_sp = 20, mu_mo = 3, v_prime = 2, pyramid = 2;

    // train
    int batch = 32;
    double lr = 5e-4;
    int epochs = 100, patience = 10;
    uint64_t seed = 1;
    double mape_eps = 1.0;

    // paths
    std::string dataset_path, checkpoint_path, out_dir = ".", source_checkpoint;

    std::map<std::string, std::string> raw;  // as parsed, for the run echo

    GeneratorConfig generator_config() const {
        GeneratorConfig g;
        g.seed = data_seed;
        g.T = T;
        g.N = N;
        g.C = C;
        g.slot_minutes = slot_minutes;
        g.base_scale = base_scale;
        g.noise_level = noise_level;
        g.script = script;
        return g;
    }

    VariantSpec variant_spec(int v_width) const {
        VariantSpec s;
        s.kind = variant;
        s.N = N;
        s.C = C;
        s.alpha = alpha;
        s.beta = beta;
        s.q = q;
        s.K = K;
        s.L = L;
        s.m = m;
        s.D = D;
        s.mu_sp = mu_sp;
        s.mu_mo = mu_mo;
        s.v = v_width;
        s.v_prime = v_prime;
        s.pyramid_factor = pyramid;
        s.seed = seed;
        return s;
    }

    TrainConfig train_config() const {
        TrainConfig t;
        t.batch_size = batch;
        t.lr = lr;
        t.max_epochs = epochs;
        t.patience = patience;
        t.seed = seed;
        t.mape_eps = mape_eps;
        return t;
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(trim(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline int to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": \"" + v + "\" is not an integer");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": \"" + v + "\" is not a number");
    }
}

inline uint64_t to_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": \"" + v + "\" is not a non-negative integer");
    }
}

inline EventEntry parse_event(const std::string& key, const std::string& v) {
    const std::vector<std::string> f = split(v, ',');
    if (f.size() != 6)
        throw ConfigError("config key " + key +
                          ": expected kind,start,duration,recovery,recovery_slots,severities");
    EventEntry e;
    if (f[0] == "blizzard")
        e.kind = EventKind::Blizzard;
    else if (f[0] == "pandemic")
        e.kind = EventKind::Pandemic;
    else if (f[0] == "holiday")
        e.kind = EventKind::Holiday;
    else
        throw ConfigError("config key " + key + ": unknown event kind \"" + f[0] + "\"");
    e.start = to_int(key, f[1]);
    e.duration = to_int(key, f[2]);
    if (f[3] == "step")
        e.recovery = RecoveryShape::Step;
    else if (f[3] == "linear")
        e.recovery = RecoveryShape::Linear;
    else if (f[3] == "exponential")
        e.recovery = RecoveryShape::Exponential;
    else
        throw ConfigError("config key " + key + ": unknown recovery shape \"" + f[3] + "\"");
    e.recovery_slots = to_int(key, f[4]);
    for (const std::string& s : split(f[5], ':')) e.severity.push_back(to_double(key, s));
    return e;
}

}  // namespace detail

inline void config_apply(RunConfig& cfg, const std::string& key, const std::string& value) {
    using namespace detail;
    cfg.raw[key] = value;
    if (key == "data.T") cfg.T = to_int(key, value);
    else if (key == "data.N") cfg.N = to_int(key, value);
    else if (key == "data.C") cfg.C = to_int(key, value);
    else if (key == "data.slot_minutes") cfg.slot_minutes = to_int(key, value);
    else if (key == "data.base_scale") cfg.base_scale = to_double(key, value);
    else if (key == "data.noise_level") cfg.noise_level = to_double(key, value);
    else if (key == "data.seed") cfg.data_seed = to_u64(key, value);
    else if (key.rfind("event.", 0) == 0) cfg.script.entries.push_back(parse_event(key, value));
    else if (key == "model.variant") cfg.variant = variant_from_name(value);
    else if (key == "model.alpha") cfg.alpha = to_int(key, value);
    else if (key == "model.beta") cfg.beta = to_int(key, value);
    else if (key == "model.q") cfg.q = to_int(key, value);
    else if (key == "model.K") cfg.K = to_int(key, value);
    else if (key == "model.L") cfg.L = to_int(key, value);
    else if (key == "model.m") cfg.m = to_int(key, value);
    else if (key == "model.D") cfg.D = to_int(key, value);
    else if (key == "model.mu_sp") cfg.mu_sp = to_int(key, value);
    else if (key == "model.mu_mo") cfg.mu_mo = to_int(key, value);
    else if (key == "model.v_prime") cfg.v_prime = to_int(key, value);
    else if (key == "model.pyramid") cfg.pyramid = to_int(key, value);
    else if (key == "train.batch") cfg.batch = to_int(key, value);
    else if (key == "train.lr") cfg.lr = to_double(key, value);
    else if (key == "train.epochs") cfg.epochs = to_int(key, value);
    else if (key == "train.patience") cfg.patience = to_int(key, value);
    else if (key == "train.seed") cfg.seed = to_u64(key, value);
    else if (key == "train.mape_eps") cfg.mape_eps = to_double(key, value);
    else if (key == "paths.dataset") cfg.dataset_path = value;
    else if (key == "paths.checkpoint") cfg.checkpoint_path = value;
    else if (key == "paths.out") cfg.out_dir = value;
    else if (key == "paths.source_checkpoint") cfg.source_checkpoint = value;
    else throw ConfigError("unknown config key \"" + key + "\"");
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file " + path);
    RunConfig cfg;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
        config_apply(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

inline void apply_set_override(RunConfig& cfg, const std::string& kv) {
    const size_t eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
    config_apply(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
}

}  // namespace eastnet
