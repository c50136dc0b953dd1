#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "eastnet/io.hpp"
#include "eastnet/tensor.hpp"

namespace eastnet {

// Dense T x N x C observation tensor (trips per slot, region, channel) with
// per-channel statistics computed on the training range.
struct MobilityTensor {
    Tensor values;  // T x N x C
    int slot_minutes = 30;

    int T() const { return values.dim(0); }
    int N() const { return values.dim(1); }
    int C() const { return values.dim(2); }

    double at(int t, int n, int c) const {
        return values[(static_cast<int64_t>(t) * N() + n) * C() + c];
    }
    double& at(int t, int n, int c) {
        return values[(static_cast<int64_t>(t) * N() + n) * C() + c];
    }

    int slots_per_day() const { return 1440 / slot_minutes; }
    int slots_per_week() const { return 7 * slots_per_day(); }
};

// One-hot calendar blocks per slot: time-of-day, day-of-week (7),
// month-of-year (12), holiday flag (1).
struct TemporalCovariates {
    Tensor rows;  // T x v
    int slots_per_day = 48;

    int T() const { return rows.dim(0); }
    int v() const { return rows.dim(1); }
};

inline int covariate_width(int slots_per_day) { return slots_per_day + 7 + 12 + 1; }

enum class EventKind { Blizzard, Pandemic, Holiday };
enum class RecoveryShape { Step, Linear, Exponential };

struct EventEntry {
    EventKind kind = EventKind::Blizzard;
    int start = 0;
    int duration = 0;
    RecoveryShape recovery = RecoveryShape::Step;
    int recovery_slots = 0;
    std::vector<double> severity;  // per-channel multipliers, >= 0
};

struct EventScript {
    std::vector<EventEntry> entries;
};

inline const char* event_kind_name(EventKind k) {
    switch (k) {
        case EventKind::Blizzard: return "blizzard";
        case EventKind::Pandemic: return "pandemic";
        case EventKind::Holiday: return "holiday";
    }
    return "?";
}

inline const char* recovery_name(RecoveryShape r) {
    switch (r) {
        case RecoveryShape::Step: return "step";
        case RecoveryShape::Linear: return "linear";
        case RecoveryShape::Exponential: return "exponential";
    }
    return "?";
}

namespace detail {

// Multiplier contributed by one event at slot t for channel c: the raw
// severity inside [start, start+duration), then the scripted recovery back
// to 1.
inline double event_multiplier(const EventEntry& e, int t, int c) {
    const double sev = e.severity[static_cast<size_t>(c) % e.severity.size()];
    if (t < e.start) return 1.0;
    if (t < e.start + e.duration) return sev;
    const int u = t - (e.start + e.duration);
    if (e.recovery_slots <= 0 || e.recovery == RecoveryShape::Step) return 1.0;
    if (u >= e.recovery_slots && e.recovery == RecoveryShape::Linear) return 1.0;
    const double frac = static_cast<double>(u) / e.recovery_slots;
    switch (e.recovery) {
        case RecoveryShape::Linear: return sev + (1.0 - sev) * frac;
        case RecoveryShape::Exponential: return 1.0 + (sev - 1.0) * std::exp(-4.0 * frac);
        case RecoveryShape::Step: return 1.0;
    }
    return 1.0;
}

}  // namespace detail

struct GeneratorConfig {
    uint64_t seed = 0;
    int T = 0, N = 0, C = 0;
    int slot_minutes = 30;
    double base_scale = 20.0;
    double noise_level = 0.4;
    EventScript script;
};

struct Dataset {
    MobilityTensor mobility;
    TemporalCovariates covariates;
};

// Per-(region, channel) daily+weekly sinusoid mixture with signal-
// proportional Gaussian noise, modulated multiplicatively by scripted events.
// The synthetic calendar starts on a Monday, Jan 1, with 30-day months.
inline Dataset generate_synthetic(const GeneratorConfig& cfg) {
    if (cfg.T <= 0 || cfg.N <= 0 || cfg.C <= 0 || cfg.slot_minutes <= 0 ||
        1440 % cfg.slot_minutes != 0)
        throw ContractError("generate_synthetic: invalid dimensions");
    for (const EventEntry& e : cfg.script.entries) {
        if (e.start < 0 || e.duration < 0 || e.start + e.duration > cfg.T)
            throw ContractError("generate_synthetic: event interval outside [0, T)");
        if (e.severity.empty()) throw ContractError("generate_synthetic: event without severities");
        for (double s : e.severity)
            if (s < 0.0) throw ContractError("generate_synthetic: negative severity");
    }

    Rng rng(cfg.seed);
    const int S = 1440 / cfg.slot_minutes;
    const int week = 7 * S;

    // per-series shape parameters
    std::vector<double> base(static_cast<size_t>(cfg.N) * cfg.C);
    std::vector<double> day_amp(base.size()), day_phase(base.size());
    std::vector<double> week_amp(base.size()), week_phase(base.size());
    for (size_t i = 0; i < base.size(); ++i) {
        base[i] = cfg.base_scale * (0.5 + rng.uniform01());
        day_amp[i] = 0.4 + 0.4 * rng.uniform01();
        day_phase[i] = rng.uniform(0.0, 2.0 * M_PI);
        week_amp[i] = 0.1 + 0.2 * rng.uniform01();
        week_phase[i] = rng.uniform(0.0, 2.0 * M_PI);
    }

    Dataset ds;
    ds.mobility.values = Tensor({cfg.T, cfg.N, cfg.C});
    ds.mobility.slot_minutes = cfg.slot_minutes;
    const int v = covariate_width(S);
    ds.covariates.rows = Tensor({cfg.T, v});
    ds.covariates.slots_per_day = S;

    for (int t = 0; t < cfg.T; ++t) {
        const int tod = t % S;
        const int day = t / S;
        const int dow = day % 7;
        const int month = (day / 30) % 12;

        bool holiday = false;
        for (const EventEntry& e : cfg.script.entries)
            if (e.kind == EventKind::Holiday && t >= e.start && t < e.start + e.duration)
                holiday = true;

        double* cov = ds.covariates.rows.data() + static_cast<int64_t>(t) * v;
        cov[tod] = 1.0;
        cov[S + dow] = 1.0;
        cov[S + 7 + month] = 1.0;
        cov[S + 7 + 12] = holiday ? 1.0 : 0.0;

        for (int n = 0; n < cfg.N; ++n) {
            for (int c = 0; c < cfg.C; ++c) {
                const size_t i = static_cast<size_t>(n) * cfg.C + c;
                double signal = base[i] *
                                (1.0 + day_amp[i] * std::sin(2.0 * M_PI * tod / S + day_phase[i])) *
                                (1.0 + week_amp[i] * std::sin(2.0 * M_PI * (t % week) / week +
                                                              week_phase[i]));
                for (const EventEntry& e : cfg.script.entries)
                    signal *= detail::event_multiplier(e, t, c);
                double x = signal;
                if (cfg.noise_level > 0.0)
                    x += cfg.noise_level * std::sqrt(std::max(signal, 0.0)) * rng.normal();
                ds.mobility.at(t, n, c) = std::max(0.0, x);
            }
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Splitting, windowing, normalization
// ---------------------------------------------------------------------------

struct SlotRange {
    int begin = 0, end = 0;  // [begin, end)
    int length() const { return end - begin; }
};

struct ChronoSplit {
    SlotRange train, val, test;
};

// Contiguous 7:1:2 chronological split, no shuffling.
inline ChronoSplit split_chrono(const MobilityTensor& m) {
    const int T = m.T();
    if (T < 10) throw ContractError("split_chrono: need T >= 10, got " + std::to_string(T));
    const int n_train = static_cast<int>(std::floor(0.7 * T));
    const int n_val = static_cast<int>(std::floor(0.1 * T));
    return {{0, n_train}, {n_train, n_train + n_val}, {n_train + n_val, T}};
}

struct Window {
    int input_begin = 0;   // alpha slots
    int target_begin = 0;  // beta slots, == input_begin + alpha
    int cov_begin = 0;     // alpha + beta slots, == input_begin
};

// Stride-1 windows fully inside the range; covariate row i corresponds to
// tensor slot i.
inline std::vector<Window> make_windows(const SlotRange& range, int alpha, int beta) {
    std::vector<Window> out;
    if (range.length() < alpha + beta) {
        std::fprintf(stderr,
                     "warning: range of %d slots is shorter than alpha+beta=%d, no windows\n",
                     range.length(), alpha + beta);
        return out;
    }
    for (int s = range.begin; s + alpha + beta <= range.end; ++s)
        out.push_back({s, s + alpha, s});
    return out;
}

struct ChannelStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // clamped at 1e-8
};

inline ChannelStats compute_stats(const MobilityTensor& m, const SlotRange& train) {
    const int C = m.C();
    ChannelStats st;
    st.mean.assign(static_cast<size_t>(C), 0.0);
    st.stddev.assign(static_cast<size_t>(C), 0.0);
    const int64_t cnt = static_cast<int64_t>(train.length()) * m.N();
    for (int t = train.begin; t < train.end; ++t)
        for (int n = 0; n < m.N(); ++n)
            for (int c = 0; c < C; ++c) st.mean[static_cast<size_t>(c)] += m.at(t, n, c);
    for (int c = 0; c < C; ++c) st.mean[static_cast<size_t>(c)] /= static_cast<double>(cnt);
    for (int t = train.begin; t < train.end; ++t)
        for (int n = 0; n < m.N(); ++n)
            for (int c = 0; c < C; ++c) {
                const double d = m.at(t, n, c) - st.mean[static_cast<size_t>(c)];
                st.stddev[static_cast<size_t>(c)] += d * d;
            }
    for (int c = 0; c < C; ++c)
        st.stddev[static_cast<size_t>(c)] =
            std::max(std::sqrt(st.stddev[static_cast<size_t>(c)] / static_cast<double>(cnt)), 1e-8);
    return st;
}

inline MobilityTensor normalize(const MobilityTensor& m, const ChannelStats& st) {
    MobilityTensor out;
    out.slot_minutes = m.slot_minutes;
    out.values = m.values.clone();
    for (int t = 0; t < m.T(); ++t)
        for (int n = 0; n < m.N(); ++n)
            for (int c = 0; c < m.C(); ++c)
                out.at(t, n, c) = (m.at(t, n, c) - st.mean[static_cast<size_t>(c)]) /
                                  st.stddev[static_cast<size_t>(c)];
    return out;
}

inline MobilityTensor denormalize(const MobilityTensor& m, const ChannelStats& st) {
    MobilityTensor out;
    out.slot_minutes = m.slot_minutes;
    out.values = m.values.clone();
    for (int t = 0; t < m.T(); ++t)
        for (int n = 0; n < m.N(); ++n)
            for (int c = 0; c < m.C(); ++c)
                out.at(t, n, c) = m.at(t, n, c) * st.stddev[static_cast<size_t>(c)] +
                                  st.mean[static_cast<size_t>(c)];
    return out;
}

inline double denormalize_value(double x, const ChannelStats& st, int c) {
    return x * st.stddev[static_cast<size_t>(c)] + st.mean[static_cast<size_t>(c)];
}

// ---------------------------------------------------------------------------
// Dataset file: magic "MMT1", version, T, N, C, v, slot_minutes, values,
// covariates, all float64 little-endian row-major.
// ---------------------------------------------------------------------------

inline void write_dataset(const std::string& path, const Dataset& ds) {
    BinWriter w(path);
    w.magic("MMT1");
    w.u32(1);
    w.u32(static_cast<uint32_t>(ds.mobility.T()));
    w.u32(static_cast<uint32_t>(ds.mobility.N()));
    w.u32(static_cast<uint32_t>(ds.mobility.C()));
    w.u32(static_cast<uint32_t>(ds.covariates.v()));
    w.u32(static_cast<uint32_t>(ds.mobility.slot_minutes));
    w.tensor(ds.mobility.values);
    w.tensor(ds.covariates.rows);
    w.close();
}

inline Dataset read_dataset(const std::string& path) {
    BinReader r(path);
    r.expect_magic("MMT1");
    const uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(path + ": unsupported dataset version " + std::to_string(version));
    const int T = static_cast<int>(r.u32());
    const int N = static_cast<int>(r.u32());
    const int C = static_cast<int>(r.u32());
    const int v = static_cast<int>(r.u32());
    const int slot_minutes = static_cast<int>(r.u32());
    if (T <= 0 || N <= 0 || C <= 0 || v <= 0 || slot_minutes <= 0 || 1440 % slot_minutes != 0)
        throw FormatError(path + ": implausible header dimensions");
    const int S = 1440 / slot_minutes;
    if (v != covariate_width(S))
        throw FormatError(path + ": covariate width " + std::to_string(v) + " does not match " +
                          std::to_string(covariate_width(S)) + " for " +
                          std::to_string(slot_minutes) + "-minute slots");
    Dataset ds;
    ds.mobility.values = Tensor({T, N, C});
    ds.mobility.slot_minutes = slot_minutes;
    ds.covariates.rows = Tensor({T, v});
    ds.covariates.slots_per_day = S;
    r.tensor_into(ds.mobility.values);
    r.tensor_into(ds.covariates.rows);
    r.expect_eof();
    return ds;
}

}  // namespace eastnet
