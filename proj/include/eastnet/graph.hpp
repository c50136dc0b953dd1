#pragma once

#include <optional>

#include "eastnet/tensor.hpp"

namespace eastnet {

// Learned topology from a pair of node embeddings: softmax(relu(E F^T)).
// Rows are nonnegative and sum to 1; an all-zero logit row comes out uniform.
struct AdaptiveEdges {
    Tensor E;  // n x mu
    Tensor F;  // n x mu

    static AdaptiveEdges init(int n, int mu, Rng& rng) {
        const double s = 1.0 / std::sqrt(static_cast<double>(mu));
        AdaptiveEdges e;
        e.E = Tensor::uniform({n, mu}, -s, s, rng);
        e.F = Tensor::uniform({n, mu}, -s, s, rng);
        return e;
    }

    int nodes() const { return E.dim(0); }
};

// Row-stochastic n x n topology; recomputed per forward pass, cached by the
// caller for the duration of one pass.
inline Tensor adaptive_topology(const AdaptiveEdges& edges) {
    if (edges.E.dim(0) != edges.F.dim(0) || edges.E.dim(1) != edges.F.dim(1))
        throw ShapeError("adaptive_topology: embeddings " + shape_str(edges.E.shape()) + " and " +
                         shape_str(edges.F.shape()) + " disagree");
    return softmax_rows(relu(matmul(edges.E, transpose2d(edges.F))));
}

enum class Activation { Identity, Sigmoid, Tanh, Relu };

inline Tensor activate(const Tensor& x, Activation a) {
    switch (a) {
        case Activation::Identity: return x;
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Tanh: return tanh(x);
        case Activation::Relu: return relu(x);
    }
    return x;
}

// K-order graph convolution kernel, stored as one (K+1) x p x q tensor.
struct ConvKernel {
    Tensor theta;  // (K+1) x p x q
    int K = 0, p = 0, q = 0;

    static ConvKernel init(int K, int p, int q, Rng& rng) {
        ConvKernel k;
        k.K = K;
        k.p = p;
        k.q = q;
        const double s = 1.0 / std::sqrt(static_cast<double>((K + 1) * p));
        k.theta = Tensor::uniform({K + 1, p, q}, -s, s, rng);
        return k;
    }

    static ConvKernel zeros(int K, int p, int q) {
        ConvKernel k;
        k.K = K;
        k.p = p;
        k.q = q;
        k.theta = Tensor::zeros({K + 1, p, q});
        return k;
    }

    // support matrix for order k as a plain p x q view
    Tensor support(int k) const { return reshape(slice(theta, 0, k, 1), {p, q}); }
};

// Per-sequence kernels emitted by a filter generator: one [B x (K+1)*p*q]
// block per kernel, sliced into p x q supports at use.
struct DynKernel {
    Tensor flat;  // B x (K+1)*p*q
    int K = 0, p = 0, q = 0;

    Tensor support(int k) const {
        const int pq = p * q;
        return reshape(slice(flat, 1, k * pq, pq), {flat.dim(0), p, q});
    }
};

namespace detail {

template <typename SupportFn>
Tensor graph_conv_impl(const Tensor& x, const Tensor& topo, int K, Activation act,
                       SupportFn&& support) {
    if (topo.rank() != 2 || topo.dim(0) != topo.dim(1))
        throw ShapeError("graph_conv: topology must be square, got " + shape_str(topo.shape()));
    if (x.dim(-2) != topo.dim(0))
        throw ShapeError("graph_conv: input " + shape_str(x.shape()) +
                         " does not match topology " + shape_str(topo.shape()));
    // P^0 = I by definition; higher powers applied iteratively.
    Tensor sk = x;
    Tensor acc = matmul(sk, support(0));
    for (int k = 1; k <= K; ++k) {
        sk = matmul(topo, sk);
        acc = add(acc, matmul(sk, support(k)));
    }
    return activate(acc, act);
}

}  // namespace detail

// H = act( sum_{k=0..K} P^k X W_k ), X is [n x p] or [B x n x p].
inline Tensor graph_conv(const Tensor& x, const Tensor& topo, const ConvKernel& kernel,
                         Activation act = Activation::Identity) {
    if (x.dim(-1) != kernel.p)
        throw ShapeError("graph_conv: input feature dim " + shape_str(x.shape()) +
                         " does not match kernel p=" + std::to_string(kernel.p));
    return detail::graph_conv_impl(x, topo, kernel.K, act,
                                   [&](int k) { return kernel.support(k); });
}

inline Tensor graph_conv(const Tensor& x, const Tensor& topo, const DynKernel& kernel,
                         Activation act = Activation::Identity) {
    if (x.dim(-1) != kernel.p)
        throw ShapeError("graph_conv: input feature dim " + shape_str(x.shape()) +
                         " does not match generated kernel p=" + std::to_string(kernel.p));
    if (x.rank() != 3 || x.dim(0) != kernel.flat.dim(0))
        throw ShapeError("graph_conv: batch dim of " + shape_str(x.shape()) +
                         " does not match generated kernels " + shape_str(kernel.flat.shape()));
    return detail::graph_conv_impl(x, topo, kernel.K, act,
                                   [&](int k) { return kernel.support(k); });
}

}  // namespace eastnet
