#pragma once

#include <optional>
#include <vector>

#include "eastnet/graph.hpp"

namespace eastnet {

struct DynCellKernels {
    DynKernel u, r, c;
};

// Graph-convolutional GRU cell. Gates convolve the concatenation [X, H];
// generated kernels, when supplied, replace the static ones for the step.
struct GcruCell {
    ConvKernel ku, kr, kc;
    Tensor bu, br, bc;
    int K = 0, p_in = 0, q = 0;
    bool has_static = true;

    static GcruCell init(int K, int p_in, int q, Rng& rng, bool with_static = true) {
        GcruCell c;
        c.K = K;
        c.p_in = p_in;
        c.q = q;
        c.has_static = with_static;
        const int p = p_in + q;
        if (with_static) {
            c.ku = ConvKernel::init(K, p, q, rng);
            c.kr = ConvKernel::init(K, p, q, rng);
            c.kc = ConvKernel::init(K, p, q, rng);
        }
        c.bu = Tensor::zeros({q});
        c.br = Tensor::zeros({q});
        c.bc = Tensor::zeros({q});
        return c;
    }

    int conv_width() const { return p_in + q; }
};

struct GcruStepDetail {
    Tensor u, r, c;
};

// One GCRU step:
//   u = sig(gc([X,H]) + bu), r = sig(gc([X,H]) + br),
//   C = tanh(gc([X, r.H]) + bc), H' = u.H + (1-u).C
inline Tensor gcru_step(const GcruCell& cell, const Tensor& x_t, const Tensor& h_prev,
                        const Tensor& topo, const DynCellKernels* override_kernels = nullptr,
                        GcruStepDetail* detail = nullptr) {
    if (x_t.dim(-1) != cell.p_in)
        throw ShapeError("gcru_step: input features " + shape_str(x_t.shape()) +
                         " do not match cell p_in=" + std::to_string(cell.p_in));
    if (h_prev.dim(-1) != cell.q)
        throw ShapeError("gcru_step: hidden " + shape_str(h_prev.shape()) +
                         " does not match cell q=" + std::to_string(cell.q));
    if (!override_kernels && !cell.has_static)
        throw ContractError("gcru_step: cell has no static kernels and no override was given");

    const Tensor z = concat({x_t, h_prev}, -1);
    Tensor gu, gr;
    if (override_kernels) {
        gu = graph_conv(z, topo, override_kernels->u);
        gr = graph_conv(z, topo, override_kernels->r);
    } else {
        gu = graph_conv(z, topo, cell.ku);
        gr = graph_conv(z, topo, cell.kr);
    }
    const Tensor u = sigmoid(add_bias(gu, cell.bu));
    const Tensor r = sigmoid(add_bias(gr, cell.br));
    const Tensor z2 = concat({x_t, mul(r, h_prev)}, -1);
    Tensor gc2 = override_kernels ? graph_conv(z2, topo, override_kernels->c)
                                  : graph_conv(z2, topo, cell.kc);
    const Tensor c = tanh(add_bias(gc2, cell.bc));
    if (detail) *detail = {u, r, c};
    const Tensor one = Tensor::scalar(1.0);
    return add(mul(u, h_prev), mul(sub(one, u), c));
}

// Concatenates adjacent pairs on the feature axis: T x [.. n x q] becomes
// (T/2) x [.. n x 2q].
inline std::vector<Tensor> pyramid_merge(const std::vector<Tensor>& seq) {
    if (seq.size() % 2 != 0)
        throw ContractError("pyramid_merge: sequence length " + std::to_string(seq.size()) +
                            " is odd; the input length must be divisible by 2^(L-1)");
    std::vector<Tensor> out;
    out.reserve(seq.size() / 2);
    for (size_t t = 0; t + 1 < seq.size(); t += 2) out.push_back(concat({seq[t], seq[t + 1]}, -1));
    return out;
}

struct StackConfig {
    int L = 2;
    int pyramid_factor = 2;  // 2 or 1
    int q = 32;
};

struct DynStackKernels {
    std::vector<DynCellKernels> layers;
};

// Stacked GCRU layers sharing one topology.
struct GcruStack {
    std::vector<GcruCell> cells;
    int pyramid_factor = 1;

    int layer_count() const { return static_cast<int>(cells.size()); }
};

struct EncodeResult {
    std::vector<Tensor> finals;  // last hidden per layer
    const Tensor& top() const { return finals.back(); }
};

inline Tensor zeros_like_hidden(const Tensor& ref_input, int q) {
    if (ref_input.rank() == 3) return Tensor::zeros({ref_input.dim(0), ref_input.dim(1), q});
    return Tensor::zeros({ref_input.dim(0), q});
}

// Runs layer l over layer l-1's (pyramid-merged) output sequence; hidden
// states start from zeros.
inline EncodeResult encode(const GcruStack& stack, const std::vector<Tensor>& inputs,
                           const Tensor& topo, const DynStackKernels* override_kernels = nullptr) {
    const int L = stack.layer_count();
    if (inputs.empty()) throw ContractError("encode: empty input sequence");
    int required = 1;
    for (int l = 1; l < L; ++l) required *= stack.pyramid_factor;
    if (static_cast<int>(inputs.size()) % required != 0)
        throw ContractError("encode: sequence length " + std::to_string(inputs.size()) +
                            " is not divisible by pyramid_factor^(L-1) = " + std::to_string(required));

    EncodeResult result;
    std::vector<Tensor> seq = inputs;
    for (int l = 0; l < L; ++l) {
        const GcruCell& cell = stack.cells[static_cast<size_t>(l)];
        const DynCellKernels* ovr =
            override_kernels ? &override_kernels->layers[static_cast<size_t>(l)] : nullptr;
        Tensor h = zeros_like_hidden(seq[0], cell.q);
        std::vector<Tensor> outs;
        outs.reserve(seq.size());
        for (const Tensor& x : seq) {
            h = gcru_step(cell, x, h, topo, ovr);
            outs.push_back(h);
        }
        result.finals.push_back(h);
        if (l + 1 < L)
            seq = stack.pyramid_factor == 2 ? pyramid_merge(outs) : std::move(outs);
    }
    return result;
}

using DecoderState = std::vector<Tensor>;  // hidden per layer

inline DecoderState decoder_state_from(const EncodeResult& enc) { return enc.finals; }

// One multi-layer decoder step (no pyramid merging); returns the top hidden.
inline Tensor decode_step(const GcruStack& stack, const Tensor& x_in, DecoderState& states,
                          const Tensor& topo, const DynStackKernels* override_kernels = nullptr) {
    const int L = stack.layer_count();
    if (static_cast<int>(states.size()) != L)
        throw ContractError("decode_step: state count does not match layer count");
    Tensor x = x_in;
    for (int l = 0; l < L; ++l) {
        const DynCellKernels* ovr =
            override_kernels ? &override_kernels->layers[static_cast<size_t>(l)] : nullptr;
        Tensor h = gcru_step(stack.cells[static_cast<size_t>(l)], x, states[static_cast<size_t>(l)],
                             topo, ovr);
        states[static_cast<size_t>(l)] = h;
        x = h;
    }
    return x;
}

}  // namespace eastnet
