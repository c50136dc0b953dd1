#pragma once

#include <string>
#include <vector>

#include "eastnet/graph.hpp"
#include "eastnet/io.hpp"
#include "eastnet/params.hpp"

namespace eastnet {

// Learnable prototype bank with an attention read head. The value projection
// (W_V, b_V) exists only in the plain memory-rectification mode; the filter
// generator consumes the reconstructed prototype directly.
struct MemoryBank {
    Tensor M;   // m x D
    Tensor Wq;  // d_flat x D
    Tensor bq;  // D
    Tensor Wv;  // D x D, optional
    Tensor bv;  // D, optional
    bool has_value_proj = false;
    int m = 0, D = 0, d_flat = 0;

    static MemoryBank init(int m, int D, int d_flat, bool with_value_proj, Rng& rng) {
        MemoryBank b;
        b.m = m;
        b.D = D;
        b.d_flat = d_flat;
        b.has_value_proj = with_value_proj;
        const double sm = 1.0 / std::sqrt(static_cast<double>(D));
        b.M = Tensor::uniform({m, D}, -sm, sm, rng);
        const double sq = 1.0 / std::sqrt(static_cast<double>(d_flat));
        b.Wq = Tensor::uniform({d_flat, D}, -sq, sq, rng);
        b.bq = Tensor::zeros({D});
        if (with_value_proj) {
            b.Wv = Tensor::uniform({D, D}, -sm, sm, rng);
            b.bv = Tensor::zeros({D});
        }
        return b;
    }
};

struct MemoryRead {
    Tensor value;  // B x D: reconstructed prototype (value-projected in Eq.4 mode)
    Tensor phi;    // B x m: attention scores, rows sum to 1
};

// Q = flat(features) W_Q + b_Q; phi = softmax(Q . M[j]); V = sum_j phi_j M[j].
inline MemoryRead memory_query(const MemoryBank& bank, const Tensor& query_features) {
    Tensor f = query_features.rank() == 1 ? reshape(query_features, {1, query_features.dim(0)})
                                          : query_features;
    if (f.rank() != 2 || f.dim(1) != bank.d_flat)
        throw ShapeError("memory_query: flattened query " + shape_str(f.shape()) +
                         " does not match d_flat=" + std::to_string(bank.d_flat));
    const Tensor q = add_bias(matmul(f, bank.Wq), bank.bq);
    const Tensor phi = softmax_rows(matmul(q, transpose2d(bank.M)));
    Tensor v = matmul(phi, bank.M);
    if (bank.has_value_proj) v = add_bias(matmul(v, bank.Wv), bank.bv);
    return {v, phi};
}

// FN layer: zero-mean, unit-variance standardization with learnable scalar
// gain and shift. A constant input standardizes to zero, so the output is
// the shift.
inline Tensor filter_normalize(const Tensor& v, const Tensor& gain, const Tensor& shift) {
    return layer_norm_rows(v, gain, shift, 1e-6);
}

struct FilterGroupSpec {
    std::string name;
    int K = 0, p = 0, q = 0;

    int64_t param_count() const { return static_cast<int64_t>(K + 1) * p * q; }
};

// Two bias-free linear layers around FN; one output head per target kernel
// group, each with its own gain/shift pair.
struct FilterGenerator {
    struct Head {
        FilterGroupSpec spec;
        Tensor gain;   // scalar
        Tensor shift;  // scalar
        Tensor W2;     // Dh x (K+1)*p*q
    };

    Tensor W1;  // D x Dh
    std::vector<Head> heads;
    int D = 0, Dh = 0;

    static FilterGenerator init(int D, int Dh, const std::vector<FilterGroupSpec>& groups,
                                Rng& rng) {
        FilterGenerator g;
        g.D = D;
        g.Dh = Dh;
        const double s1 = 1.0 / std::sqrt(static_cast<double>(D));
        g.W1 = Tensor::uniform({D, Dh}, -s1, s1, rng);
        for (const FilterGroupSpec& spec : groups) {
            Head h;
            h.spec = spec;
            h.gain = Tensor::scalar(1.0);
            h.shift = Tensor::scalar(0.0);
            // scaled down so generated kernels start near the static-init range
            const double s2 = 1.0 / static_cast<double>(Dh * (spec.K + 1) * spec.p);
            h.W2 = Tensor::uniform({Dh, static_cast<int>(spec.param_count())}, -s2, s2, rng);
            g.heads.push_back(std::move(h));
        }
        return g;
    }
};

// Theta_t = proj2(FN(proj1(V))), reshaped per group into (K+1) x p x q
// kernels. Output order follows the head order.
inline std::vector<DynKernel> generate_filters(const FilterGenerator& gen, const Tensor& v_mob) {
    Tensor v = v_mob.rank() == 1 ? reshape(v_mob, {1, v_mob.dim(0)}) : v_mob;
    if (v.dim(1) != gen.D)
        throw ShapeError("generate_filters: prototype width " + shape_str(v.shape()) +
                         " does not match D=" + std::to_string(gen.D));
    const Tensor hidden = matmul(v, gen.W1);
    std::vector<DynKernel> out;
    out.reserve(gen.heads.size());
    for (const FilterGenerator::Head& h : gen.heads) {
        const Tensor normed = filter_normalize(hidden, h.gain, h.shift);
        DynKernel k;
        k.K = h.spec.K;
        k.p = h.spec.p;
        k.q = h.spec.q;
        k.flat = matmul(normed, h.W2);
        out.push_back(std::move(k));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Memory snapshots: magic "EAMB", version, m, D, d_flat, then M, W_Q, b_Q.
// ---------------------------------------------------------------------------

enum class ImportMode { Freeze, Retrain };

inline void export_memory(const MemoryBank& bank, const std::string& path) {
    BinWriter w(path);
    w.magic("EAMB");
    w.u32(1);
    w.u32(static_cast<uint32_t>(bank.m));
    w.u32(static_cast<uint32_t>(bank.D));
    w.u32(static_cast<uint32_t>(bank.d_flat));
    w.tensor(bank.M);
    w.tensor(bank.Wq);
    w.tensor(bank.bq);
    w.close();
}

// Loads M and the query projections. Freeze marks them non-trainable in the
// registry (entries under `prefix`); retrain leaves them trainable. Header
// mismatch rejects the whole load.
inline void import_memory(MemoryBank& bank, ParamRegistry& registry, const std::string& path,
                          ImportMode mode, const std::string& prefix = "memory.") {
    BinReader r(path);
    r.expect_magic("EAMB");
    const uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(path + ": unsupported memory snapshot version " + std::to_string(version));
    const uint32_t m = r.u32(), D = r.u32(), d_flat = r.u32();
    if (static_cast<int>(m) != bank.m || static_cast<int>(D) != bank.D)
        throw FormatError(path + ": incompatible memory bank, file has (m=" + std::to_string(m) +
                          ", D=" + std::to_string(D) + ") but model expects (m=" +
                          std::to_string(bank.m) + ", D=" + std::to_string(bank.D) + ")");
    if (static_cast<int>(d_flat) != bank.d_flat)
        throw FormatError(path + ": incompatible query width, file d_flat=" + std::to_string(d_flat) +
                          " but model expects " + std::to_string(bank.d_flat));
    r.tensor_into(bank.M);
    r.tensor_into(bank.Wq);
    r.tensor_into(bank.bq);
    registry.set_trainable_prefix(prefix, mode == ImportMode::Retrain);
}

}  // namespace eastnet
