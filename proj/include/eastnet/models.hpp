#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "eastnet/data.hpp"
#include "eastnet/graph.hpp"
#include "eastnet/memory.hpp"
#include "eastnet/params.hpp"
#include "eastnet/recurrent.hpp"

namespace eastnet {

enum class VariantKind { STNet, STNetTcov, STNetMem, HMINet, EASTNet };

inline const char* variant_name(VariantKind k) {
    switch (k) {
        case VariantKind::STNet: return "STNet";
        case VariantKind::STNetTcov: return "STNetTcov";
        case VariantKind::STNetMem: return "STNetMem";
        case VariantKind::HMINet: return "HMINet";
        case VariantKind::EASTNet: return "EASTNet";
    }
    return "?";
}

inline VariantKind variant_from_name(const std::string& s) {
    if (s == "STNet") return VariantKind::STNet;
    if (s == "STNetTcov") return VariantKind::STNetTcov;
    if (s == "STNetMem") return VariantKind::STNetMem;
    if (s == "HMINet") return VariantKind::HMINet;
    if (s == "EASTNet") return VariantKind::EASTNet;
    throw ContractError("unknown variant \"" + s + "\"");
}

struct VariantSpec {
    VariantKind kind = VariantKind::STNet;
    int N = 0, C = 0;
    int alpha = 8, beta = 8;
    int q = 32, K = 3, L = 2;
    int m = 8, D = 16;
    int mu_sp = 20, mu_mo = 3;
    int v = 0, v_prime = 2;
    int pyramid_factor = 2;
    uint64_t seed = 0;
    // degenerate HMIN mode (modal states pinned to I_C, W_out q x C, no
    // covariates); used by the ST-Net equivalence checks
    bool modal_identity_probe = false;

    bool uses_tcov() const {
        return kind == VariantKind::STNetTcov ||
               ((kind == VariantKind::HMINet || kind == VariantKind::EASTNet) &&
                !modal_identity_probe);
    }
    bool uses_modal() const {
        return (kind == VariantKind::HMINet || kind == VariantKind::EASTNet) &&
               !modal_identity_probe;
    }
    bool uses_memory() const {
        return kind == VariantKind::STNetMem || kind == VariantKind::EASTNet;
    }
    bool uses_generator() const { return kind == VariantKind::EASTNet; }
};

struct Forecast {
    std::vector<Tensor> steps;  // beta tensors, N x C, normalized space

    Tensor stacked() const {
        std::vector<Tensor> planes;
        planes.reserve(steps.size());
        for (const Tensor& s : steps) planes.push_back(reshape(s, {1, s.dim(0), s.dim(1)}));
        return concat(std::span<const Tensor>(planes), 0);
    }

    Tensor denormalized(const ChannelStats& st) const {
        Tensor out = stacked().clone();
        const int C = out.dim(2);
        for (int64_t i = 0; i < out.size(); ++i)
            out[i] = denormalize_value(out[i], st, static_cast<int>(i % C));
        return out;
    }
};

struct WindowBatch {
    std::vector<Tensor> x_steps;    // alpha tensors, B x N x C (normalized)
    std::vector<Tensor> cov_steps;  // alpha+beta tensors, B x v
    std::vector<Tensor> y_steps;    // beta tensors, B x N x C (normalized)
    int B = 0;
};

inline WindowBatch assemble_batch(const MobilityTensor& normalized,
                                  const TemporalCovariates& cov, std::span<const Window> windows,
                                  int alpha, int beta) {
    WindowBatch batch;
    batch.B = static_cast<int>(windows.size());
    const int N = normalized.N(), C = normalized.C(), v = cov.v();
    const int64_t plane = static_cast<int64_t>(N) * C;
    for (int s = 0; s < alpha; ++s) {
        Tensor x({batch.B, N, C});
        for (int b = 0; b < batch.B; ++b) {
            const int t = windows[static_cast<size_t>(b)].input_begin + s;
            std::copy(normalized.values.data() + t * plane, normalized.values.data() + (t + 1) * plane,
                      x.data() + b * plane);
        }
        batch.x_steps.push_back(std::move(x));
    }
    for (int s = 0; s < beta; ++s) {
        Tensor y({batch.B, N, C});
        for (int b = 0; b < batch.B; ++b) {
            const int t = windows[static_cast<size_t>(b)].target_begin + s;
            std::copy(normalized.values.data() + t * plane, normalized.values.data() + (t + 1) * plane,
                      y.data() + b * plane);
        }
        batch.y_steps.push_back(std::move(y));
    }
    for (int s = 0; s < alpha + beta; ++s) {
        Tensor c({batch.B, v});
        for (int b = 0; b < batch.B; ++b) {
            const int t = windows[static_cast<size_t>(b)].cov_begin + s;
            std::copy(cov.rows.data() + static_cast<int64_t>(t) * v,
                      cov.rows.data() + static_cast<int64_t>(t + 1) * v,
                      c.data() + static_cast<int64_t>(b) * v);
        }
        batch.cov_steps.push_back(std::move(c));
    }
    return batch;
}

struct ForwardOutput {
    std::vector<Tensor> preds;  // beta tensors, B x N x C, on the active tape
    Tensor phi;                 // B x m attention scores (memory variants), else empty
};

// Assembled network for one ladder variant. Heap-pinned: the registry points
// into the component members. Single-driver: one thread per instance;
// parallelism goes across instances.
class Model {
public:
    VariantSpec spec;
    ParamRegistry registry;
    Tape tape;

    AdaptiveEdges sp_edges;
    AdaptiveEdges mo_edges;
    Tensor tcov_sp;  // v x v'
    Tensor tcov_mo;
    GcruStack sp_enc, sp_dec;
    GcruStack mo_enc, mo_dec;
    Tensor w_out;
    MemoryBank memory;
    FilterGenerator generator;

    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    static std::unique_ptr<Model> build(const VariantSpec& spec) {
        return std::unique_ptr<Model>(new Model(spec));
    }

    int64_t param_count() const { return registry.count(); }

    // Stage parameters on this model's own tape and activate it. Call before
    // a differentiated forward pass; evaluation runs without any tape.
    void stage() {
        tape.clear();
        registry.watch_all(tape);
    }

    ForwardOutput forward_batch(const WindowBatch& batch) {
        const int B = batch.B, N = spec.N, C = spec.C;
        const Tensor topo_sp = adaptive_topology(sp_edges);
        Tensor topo_mo;
        if (spec.uses_modal()) topo_mo = adaptive_topology(mo_edges);

        // stepwise covariate embeddings, fused into every node row
        std::vector<Tensor> tsp, tmo;
        if (spec.uses_tcov()) {
            for (const Tensor& c : batch.cov_steps) {
                tsp.push_back(reshape(matmul(c, tcov_sp), {B, 1, spec.v_prime}));
                if (spec.uses_modal())
                    tmo.push_back(reshape(matmul(c, tcov_mo), {B, 1, spec.v_prime}));
            }
        }
        auto fuse_sp = [&](const Tensor& x, int step) {
            if (!spec.uses_tcov()) return x;
            return concat({x, repeat_rows(tsp[static_cast<size_t>(step)], N)}, -1);
        };
        auto fuse_mo = [&](const Tensor& x_t, int step) {
            if (!spec.uses_tcov()) return x_t;
            return concat({x_t, repeat_rows(tmo[static_cast<size_t>(step)], C)}, -1);
        };

        std::vector<Tensor> sp_inputs, mo_inputs;
        for (int s = 0; s < spec.alpha; ++s) {
            sp_inputs.push_back(fuse_sp(batch.x_steps[static_cast<size_t>(s)], s));
            if (spec.uses_modal())
                mo_inputs.push_back(fuse_mo(transpose2d(batch.x_steps[static_cast<size_t>(s)]), s));
        }

        const EncodeResult enc_sp = encode(sp_enc, sp_inputs, topo_sp);
        EncodeResult enc_mo;
        if (spec.uses_modal()) enc_mo = encode(mo_enc, mo_inputs, topo_mo);

        ForwardOutput out;

        // MDFG: query on concatenated encoder states, then decode with the
        // generated kernels; encoder kernels stay static.
        DynStackKernels sp_dyn, mo_dyn;
        const DynStackKernels* sp_ovr = nullptr;
        const DynStackKernels* mo_ovr = nullptr;
        if (spec.uses_generator()) {
            const Tensor joined = concat({enc_sp.top(), enc_mo.top()}, 1);
            const MemoryRead read = memory_query(memory, reshape(joined, {B, (N + C) * spec.q}));
            out.phi = read.phi;
            std::vector<DynKernel> kernels = generate_filters(generator, read.value);
            // head order fixed at build: sp layers x (u, r, c), then mo
            size_t i = 0;
            for (int l = 0; l < spec.L; ++l) {
                DynCellKernels ck;
                ck.u = kernels[i++];
                ck.r = kernels[i++];
                ck.c = kernels[i++];
                sp_dyn.layers.push_back(std::move(ck));
            }
            for (int l = 0; l < spec.L; ++l) {
                DynCellKernels ck;
                ck.u = kernels[i++];
                ck.r = kernels[i++];
                ck.c = kernels[i++];
                mo_dyn.layers.push_back(std::move(ck));
            }
            sp_ovr = &sp_dyn;
            mo_ovr = &mo_dyn;
        }

        DecoderState sp_state = decoder_state_from(enc_sp);
        DecoderState mo_state;
        if (spec.uses_modal()) mo_state = decoder_state_from(enc_mo);

        const Tensor eye_c = Tensor::identity(C);
        std::vector<Tensor> phis;
        Tensor x_prev = Tensor::zeros({B, N, C});  // first decoder input is zeros
        for (int step = 0; step < spec.beta; ++step) {
            const int cov_ix = spec.alpha + step;
            const Tensor sp_in = fuse_sp(x_prev, cov_ix);
            const Tensor h_sp = decode_step(sp_dec, sp_in, sp_state, topo_sp, sp_ovr);

            Tensor pred;
            switch (spec.kind) {
                case VariantKind::STNet:
                case VariantKind::STNetTcov:
                    pred = matmul(h_sp, w_out);
                    break;
                case VariantKind::STNetMem: {
                    const MemoryRead read = memory_query(memory, reshape(h_sp, {B, N * spec.q}));
                    phis.push_back(read.phi);
                    const Tensor tiled = repeat_rows(reshape(read.value, {B, 1, spec.D}), N);
                    pred = matmul(concat({h_sp, tiled}, -1), w_out);
                    break;
                }
                case VariantKind::HMINet:
                case VariantKind::EASTNet: {
                    if (spec.modal_identity_probe) {
                        // H_mo pinned to I_C: the fusion collapses to the
                        // ST-Net dense head
                        pred = matmul(matmul(h_sp, w_out), transpose2d(eye_c));
                    } else {
                        const Tensor mo_in = fuse_mo(transpose2d(x_prev), cov_ix);
                        const Tensor h_mo = decode_step(mo_dec, mo_in, mo_state, topo_mo, mo_ovr);
                        pred = matmul(matmul(h_sp, w_out), transpose2d(h_mo));
                    }
                    break;
                }
            }
            if (!pred.all_finite())
                throw NumericError("non-finite forecast at decode step " + std::to_string(step + 1));
            out.preds.push_back(pred);
            x_prev = pred;  // the model consumes its own previous prediction
        }

        if (spec.kind == VariantKind::STNetMem && !phis.empty()) {
            Tensor acc = phis[0];
            for (size_t i = 1; i < phis.size(); ++i) acc = add(acc, phis[i]);
            out.phi = scale(acc, 1.0 / static_cast<double>(phis.size()));
        }
        return out;
    }

    // Single-window convenience: alpha observation planes and the full
    // covariate span in, beta forecast planes out.
    Forecast forward(const std::vector<Tensor>& x_window, const std::vector<Tensor>& cov_span) {
        if (static_cast<int>(x_window.size()) != spec.alpha)
            throw ContractError("forward: expected alpha=" + std::to_string(spec.alpha) +
                                " observation steps, got " + std::to_string(x_window.size()));
        if (static_cast<int>(cov_span.size()) != spec.alpha + spec.beta)
            throw ContractError("forward: covariate span must have alpha+beta steps");
        WindowBatch batch;
        batch.B = 1;
        for (const Tensor& x : x_window) {
            if (x.rank() != 2 || x.dim(0) != spec.N || x.dim(1) != spec.C)
                throw ShapeError("forward: observation " + shape_str(x.shape()) +
                                 " does not match N x C");
            batch.x_steps.push_back(reshape(x, {1, spec.N, spec.C}));
        }
        for (const Tensor& c : cov_span) batch.cov_steps.push_back(reshape(c, {1, spec.v}));
        ForwardOutput out = forward_batch(batch);
        Forecast f;
        for (const Tensor& p : out.preds) f.steps.push_back(reshape(p, {spec.N, spec.C}));
        return f;
    }

private:
    explicit Model(const VariantSpec& s) : spec(s) {
        validate(spec);
        Rng rng(spec.seed);

        sp_edges = AdaptiveEdges::init(spec.N, spec.mu_sp, rng);
        registry.add("sp.edges.E", sp_edges.E);
        registry.add("sp.edges.F", sp_edges.F);
        if (spec.uses_modal()) {
            mo_edges = AdaptiveEdges::init(spec.C, spec.mu_mo, rng);
            registry.add("mo.edges.E", mo_edges.E);
            registry.add("mo.edges.F", mo_edges.F);
        }

        if (spec.uses_tcov()) {
            const double s0 = 1.0 / std::sqrt(static_cast<double>(spec.v));
            tcov_sp = Tensor::uniform({spec.v, spec.v_prime}, -s0, s0, rng);
            registry.add("tcov.sp.W", tcov_sp);
            if (spec.uses_modal()) {
                tcov_mo = Tensor::uniform({spec.v, spec.v_prime}, -s0, s0, rng);
                registry.add("tcov.mo.W", tcov_mo);
            }
        }

        const int extra = spec.uses_tcov() ? spec.v_prime : 0;
        build_stacks("sp", spec.C + extra, spec.C + extra, sp_enc, sp_dec, rng);
        if (spec.uses_modal())
            build_stacks("mo", spec.N + extra, spec.N + extra, mo_enc, mo_dec, rng);

        switch (spec.kind) {
            case VariantKind::STNet:
            case VariantKind::STNetTcov: {
                const double s0 = 1.0 / std::sqrt(static_cast<double>(spec.q));
                w_out = Tensor::uniform({spec.q, spec.C}, -s0, s0, rng);
                break;
            }
            case VariantKind::STNetMem: {
                const double s0 = 1.0 / std::sqrt(static_cast<double>(spec.q + spec.D));
                w_out = Tensor::uniform({spec.q + spec.D, spec.C}, -s0, s0, rng);
                break;
            }
            case VariantKind::HMINet:
            case VariantKind::EASTNet: {
                const int cols = spec.modal_identity_probe ? spec.C : spec.q;
                const double s0 = 1.0 / std::sqrt(static_cast<double>(spec.q));
                w_out = Tensor::uniform({spec.q, cols}, -s0, s0, rng);
                break;
            }
        }
        registry.add("head.W_out", w_out);

        if (spec.uses_memory()) {
            const int d_flat = spec.kind == VariantKind::STNetMem ? spec.N * spec.q
                                                                  : (spec.N + spec.C) * spec.q;
            memory = MemoryBank::init(spec.m, spec.D, d_flat,
                                      spec.kind == VariantKind::STNetMem, rng);
            registry.add("memory.M", memory.M);
            registry.add("memory.Wq", memory.Wq);
            registry.add("memory.bq", memory.bq);
            if (memory.has_value_proj) {
                registry.add("memory.Wv", memory.Wv);
                registry.add("memory.bv", memory.bv);
            }
        }

        if (spec.uses_generator()) {
            std::vector<FilterGroupSpec> groups;
            auto add_groups = [&](const char* branch, const GcruStack& dec) {
                for (int l = 0; l < spec.L; ++l) {
                    const GcruCell& cell = dec.cells[static_cast<size_t>(l)];
                    for (const char* gate : {"u", "r", "c"})
                        groups.push_back({std::string(branch) + ".dec" + std::to_string(l) + "." +
                                              gate,
                                          spec.K, cell.conv_width(), spec.q});
                }
            };
            add_groups("sp", sp_dec);
            add_groups("mo", mo_dec);
            generator = FilterGenerator::init(spec.D, spec.D, groups, rng);
            registry.add("gen.W1", generator.W1);
            for (FilterGenerator::Head& h : generator.heads) {
                registry.add("gen." + h.spec.name + ".gain", h.gain);
                registry.add("gen." + h.spec.name + ".shift", h.shift);
                registry.add("gen." + h.spec.name + ".W2", h.W2);
            }
        }
    }

    void build_stacks(const std::string& branch, int enc_in, int dec_in, GcruStack& enc,
                      GcruStack& dec, Rng& rng) {
        enc.pyramid_factor = spec.pyramid_factor;
        dec.pyramid_factor = 1;  // decoders emit step-by-step, never merged
        const bool dec_static = !spec.uses_generator();
        // registry holds pointers into the cells: no growth past this point
        enc.cells.reserve(static_cast<size_t>(spec.L));
        dec.cells.reserve(static_cast<size_t>(spec.L));
        for (int l = 0; l < spec.L; ++l) {
            const int p_enc = l == 0 ? enc_in : spec.q * spec.pyramid_factor;
            enc.cells.push_back(GcruCell::init(spec.K, p_enc, spec.q, rng, true));
            register_cell(branch + ".enc" + std::to_string(l), enc.cells.back(), true);
        }
        for (int l = 0; l < spec.L; ++l) {
            const int p_dec = l == 0 ? dec_in : spec.q;
            dec.cells.push_back(GcruCell::init(spec.K, p_dec, spec.q, rng, dec_static));
            register_cell(branch + ".dec" + std::to_string(l), dec.cells.back(), dec_static);
        }
    }

    void register_cell(const std::string& name, GcruCell& cell, bool with_kernels) {
        if (with_kernels) {
            registry.add(name + ".u.theta", cell.ku.theta);
            registry.add(name + ".r.theta", cell.kr.theta);
            registry.add(name + ".c.theta", cell.kc.theta);
        }
        registry.add(name + ".bu", cell.bu);
        registry.add(name + ".br", cell.br);
        registry.add(name + ".bc", cell.bc);
    }

    static void validate(const VariantSpec& s) {
        auto positive = [](int x, const char* what) {
            if (x <= 0) throw ContractError(std::string("build_variant: ") + what + " must be positive");
        };
        positive(s.N, "N");
        positive(s.C, "C");
        positive(s.alpha, "alpha");
        positive(s.beta, "beta");
        positive(s.q, "q");
        positive(s.L, "L");
        positive(s.v_prime, "v_prime");
        positive(s.mu_sp, "mu_sp");
        positive(s.mu_mo, "mu_mo");
        if (s.K < 0) throw ContractError("build_variant: K must be >= 0");
        if (s.pyramid_factor != 1 && s.pyramid_factor != 2)
            throw ContractError("build_variant: pyramid_factor must be 1 or 2");
        if (s.uses_tcov() && s.v <= 0)
            throw ContractError("build_variant: covariate width v must be positive");
        if (s.uses_memory()) {
            positive(s.m, "m");
            positive(s.D, "D");
        }
        int required = 1;
        for (int l = 1; l < s.L; ++l) required *= s.pyramid_factor;
        if (s.alpha % required != 0)
            throw ContractError("build_variant: alpha=" + std::to_string(s.alpha) +
                                " is not divisible by pyramid_factor^(L-1)=" +
                                std::to_string(required));
        if (s.modal_identity_probe && s.kind != VariantKind::HMINet)
            throw ContractError("build_variant: modal_identity_probe applies to HMINet only");
    }
};

}  // namespace eastnet
