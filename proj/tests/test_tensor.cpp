#include <catch_amalgamated.hpp>

#include "eastnet/tensor.hpp"
#include "oracles.hpp"

using namespace eastnet;
using oracles::fd_grad;
using oracles::max_rel_err;

namespace {

// builds a scalar objective: weighted sum of the op output, weights fixed by
// the given rng so forward and FD evaluations agree
Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum_all(mul(y, w)); }

Tensor random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    return Tensor::uniform(std::move(s), lo, hi, rng);
}

}  // namespace

TEST_CASE("matmul values", "[tensor]") {
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor out = matmul(Tensor::identity(2), a);
    for (int i = 0; i < 4; ++i) CHECK(out[i] == a[i]);

    const Tensor p({2, 2}, {1, 0, 0, 0});
    const Tensor v({2, 1}, {5, 7});
    const Tensor out2 = matmul(p, v);
    CHECK(out2[0] == 5.0);
    CHECK(out2[1] == 0.0);

    CHECK_THROWS_AS(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST_CASE("matmul gradient equals ones times B^T", "[tensor]") {
    Rng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);

    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.watch(a);
        tape.watch(b);
        tape.backward(sum_all(matmul(a, b)));
    }
    const Tensor* ga = tape.grad(a);
    REQUIRE(ga != nullptr);

    // closed form: d sum(AB) / dA = ones(3x2) B^T
    const Tensor closed = matmul(Tensor::ones({3, 2}), transpose2d(b));
    for (int64_t i = 0; i < closed.size(); ++i)
        CHECK((*ga)[i] == Catch::Approx(closed[i]).margin(1e-12));

    const Tensor fd = fd_grad([&]() { return sum_all(matmul(a, b)).item(); }, a);
    CHECK(max_rel_err(*ga, fd) < 1e-6);
}

TEST_CASE("elementwise values", "[tensor]") {
    CHECK(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    CHECK(relu(Tensor::scalar(-3.0)).item() == 0.0);
    CHECK(relu(Tensor::scalar(3.0)).item() == 3.0);
    CHECK_THROWS_AS(add(Tensor({2, 2}), Tensor({3, 2})), ShapeError);

    // scalar broadcast
    const Tensor s = add(Tensor({2}, {1.0, 2.0}), Tensor::scalar(10.0));
    CHECK(s[0] == 11.0);
    CHECK(s[1] == 12.0);
}

TEST_CASE("tanh derivative matches finite differences", "[tensor]") {
    Tensor x = Tensor::scalar(0.7);
    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.watch(x);
        tape.backward(sum_all(tanh(x)));
    }
    const double h = 1e-5;
    const double fd = (std::tanh(0.7 + h) - std::tanh(0.7 - h)) / (2.0 * h);
    CHECK(std::fabs((*tape.grad(x))[0] - fd) < 1e-8);
}

TEST_CASE("softmax rows", "[tensor]") {
    const Tensor u = softmax_rows(Tensor({1, 3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(u[i] == Catch::Approx(1.0 / 3).margin(1e-15));

    const Tensor big = softmax_rows(Tensor({1, 2}, {1000.0, 0.0}));
    CHECK(std::fabs(big[0] - 1.0) < 1e-12);
    CHECK(std::fabs(big[1]) < 1e-12);

    SECTION("rows sum to one and are shift invariant") {
        Rng rng(5);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor x = random_tensor({4, 6}, rng, -3, 3);
            const Tensor y = softmax_rows(x);
            for (int r = 0; r < 4; ++r) {
                double s = 0;
                for (int c = 0; c < 6; ++c) s += y[r * 6 + c];
                CHECK(std::fabs(s - 1.0) <= 1e-12);
            }
            Tensor shifted = x.clone();
            for (int64_t i = 0; i < shifted.size(); ++i) shifted[i] += 2.5;
            const Tensor y2 = softmax_rows(shifted);
            for (int64_t i = 0; i < y.size(); ++i) CHECK(std::fabs(y[i] - y2[i]) <= 1e-12);
        }
    }

    SECTION("jacobian matches finite differences") {
        Tensor x({1, 3}, {0.2, -0.4, 1.1});
        Rng rng(7);
        Tensor w = random_tensor({1, 3}, rng);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.watch(x);
            tape.backward(weighted_sum(softmax_rows(x), w));
        }
        const Tensor fd =
            fd_grad([&]() { return weighted_sum(softmax_rows(x), w).item(); }, x);
        CHECK(max_rel_err(*tape.grad(x), fd) < 1e-6);
    }
}

TEST_CASE("concat slice transpose reshape", "[tensor]") {
    Rng rng(3);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 5}, rng);
    const Tensor cat = concat({a, b}, 1);
    REQUIRE(cat.shape() == Shape{2, 8});
    CHECK(cat[0 * 8 + 0] == a[0]);
    CHECK(cat[0 * 8 + 3] == b[0]);

    const Tensor t = random_tensor({4, 6}, rng);
    const Tensor tt = transpose2d(transpose2d(t));
    for (int64_t i = 0; i < t.size(); ++i) CHECK(tt[i] == t[i]);  // exact involution

    const Tensor r = reshape(reshape(t, {24}), {4, 6});
    for (int64_t i = 0; i < t.size(); ++i) CHECK(r[i] == t[i]);

    CHECK_THROWS_AS(concat({Tensor({2, 3}), Tensor({3, 3})}, 1), ShapeError);
    CHECK_THROWS_AS(reshape(t, {5, 5}), ShapeError);
    CHECK_THROWS_AS(slice(t, 1, 4, 4), ShapeError);
}

TEST_CASE("gradient through concat splits into independent paths", "[tensor]") {
    Rng rng(9);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor b = random_tensor({2, 2}, rng);
    Tensor w = random_tensor({2, 5}, rng);

    auto loss_value = [&]() { return weighted_sum(concat({a, b}, 1), w).item(); };

    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.watch(a);
        tape.watch(b);
        tape.backward(weighted_sum(concat({a, b}, 1), w));
    }
    CHECK(max_rel_err(*tape.grad(a), fd_grad(loss_value, a)) < 1e-6);
    CHECK(max_rel_err(*tape.grad(b), fd_grad(loss_value, b)) < 1e-6);
}

TEST_CASE("backward basics", "[tensor]") {
    SECTION("sum gives ones") {
        Tensor w = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
        Tape tape;
        Tape::Scope scope(tape);
        tape.watch(w);
        tape.backward(sum_all(w));
        for (int64_t i = 0; i < 6; ++i) CHECK((*tape.grad(w))[i] == 1.0);
    }

    SECTION("least squares closed form") {
        Rng rng(21);
        Tensor w = random_tensor({2, 2}, rng);
        const Tensor x = random_tensor({2, 1}, rng);
        const Tensor y = random_tensor({2, 1}, rng);
        Tape tape;
        {
            Tape::Scope scope(tape);
            tape.watch(w);
            const Tensor d = sub(matmul(w, x), y);
            tape.backward(mean_all(mul(d, d)));
        }
        // grad = 2 (Wx - y) x^T / n elementwise
        const Tensor resid = sub(matmul(w, x), y);
        const Tensor closed = scale(matmul(resid, transpose2d(x)), 2.0 / 2.0);
        for (int64_t i = 0; i < closed.size(); ++i)
            CHECK((*tape.grad(w))[i] == Catch::Approx(closed[i]).margin(1e-12));
    }

    SECTION("non-scalar loss rejected") {
        Tensor w = Tensor::ones({2, 2});
        Tape tape;
        Tape::Scope scope(tape);
        tape.watch(w);
        CHECK_THROWS_AS(tape.backward(add(w, w)), ContractError);
    }

    SECTION("off-tape loss rejected") {
        Tape tape;
        CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), ContractError);
    }
}

TEST_CASE("shared subexpressions accumulate gradients", "[tensor]") {
    Rng rng(33);
    Tensor a = random_tensor({3, 3}, rng);
    const Tensor b = random_tensor({3, 3}, rng);
    const Tensor c = random_tensor({3, 3}, rng);

    Tape shared;
    {
        Tape::Scope scope(shared);
        shared.watch(a);
        shared.backward(sum_all(add(matmul(a, b), matmul(a, c))));
    }

    // duplicated-subgraph run: two equal-valued leaves, gradients summed
    Tensor a1 = a.clone(), a2 = a.clone();
    Tape dup;
    {
        Tape::Scope scope(dup);
        dup.watch(a1);
        dup.watch(a2);
        dup.backward(sum_all(add(matmul(a1, b), matmul(a2, c))));
    }
    for (int64_t i = 0; i < a.size(); ++i) {
        const double expect = (*dup.grad(a1))[i] + (*dup.grad(a2))[i];
        CHECK((*shared.grad(a))[i] == Catch::Approx(expect).margin(1e-12));
    }
}

TEST_CASE("adam update", "[tensor]") {
    SECTION("zero gradient leaves parameters unchanged") {
        Tensor p({3}, {1.0, -2.0, 0.5});
        const Tensor before = p.clone();
        std::vector<Tensor*> params{&p};
        AdamState st = AdamState::init(params, 5e-4);
        const Tensor zero = Tensor::zeros({3});
        std::vector<const Tensor*> grads{&zero};
        adam_step(st, params, grads);
        for (int i = 0; i < 3; ++i) CHECK(p[i] == before[i]);
        CHECK(st.t == 1);
    }

    SECTION("single step from zero state matches the hand-evaluated update") {
        Tensor p({1}, {0.0});
        std::vector<Tensor*> params{&p};
        AdamState st = AdamState::init(params, 5e-4);
        const Tensor g = Tensor::scalar(1.0);
        std::vector<const Tensor*> grads{&g};
        adam_step(st, params, grads);
        // mhat=1, vhat=1 after bias correction: delta = -lr / (1 + eps)
        const double expect = -5e-4 / (1.0 + 1e-8);
        CHECK(p[0] == Catch::Approx(expect).margin(1e-15));
    }

    SECTION("constant gradient drives the parameter monotonically") {
        Tensor p({1}, {0.3});
        std::vector<Tensor*> params{&p};
        AdamState st = AdamState::init(params, 1e-2);
        const Tensor g = Tensor::scalar(2.5);
        std::vector<const Tensor*> grads{&g};
        double prev = p[0];
        for (int i = 0; i < 50; ++i) {
            adam_step(st, params, grads);
            CHECK(p[0] < prev);
            prev = p[0];
        }
    }
}

TEST_CASE("every op gradient matches finite differences over 100 seeds", "[tensor][property]") {
    double worst = 0.0;
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Rng rng(seed);
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({3, 4}, rng);
        Tensor m = random_tensor({4, 2}, rng);
        Tensor bias = random_tensor({4}, rng);
        Tensor s = Tensor::scalar(rng.uniform(0.5, 1.5));
        Tensor batch_a = random_tensor({2, 3, 4}, rng);
        Tensor batch_m = random_tensor({2, 4, 3}, rng);
        Tensor gain = Tensor::scalar(rng.uniform(0.5, 2.0));
        Tensor shift = Tensor::scalar(rng.uniform(-1.0, 1.0));
        // keep relu/abs inputs away from the kink so the FD stencil is clean
        Tensor off = random_tensor({3, 4}, rng);
        for (int64_t i = 0; i < off.size(); ++i)
            off[i] += off[i] >= 0.0 ? 0.2 : -0.2;

        const Tensor w1 = random_tensor({3, 4}, rng);
        const Tensor w2 = random_tensor({3, 2}, rng);
        const Tensor w3 = random_tensor({2, 3, 3}, rng);
        const Tensor w4 = random_tensor({4, 3}, rng);
        const Tensor w5 = random_tensor({2, 3, 4}, rng);
        const Tensor w6 = random_tensor({2, 3, 2}, rng);

        auto graph = [&]() -> Tensor {
            Tensor acc = sum_all(mul(add(a, b), w1));
            acc = add(acc, sum_all(mul(sub(a, b), w1)));
            acc = add(acc, sum_all(mul(mul(a, b), w1)));
            acc = add(acc, sum_all(mul(scale(a, 1.7), w1)));
            acc = add(acc, sum_all(mul(add(a, s), w1)));
            acc = add(acc, sum_all(mul(mul(b, s), w1)));
            acc = add(acc, sum_all(mul(add_bias(a, bias), w1)));
            acc = add(acc, sum_all(mul(sigmoid(a), w1)));
            acc = add(acc, sum_all(mul(tanh(b), w1)));
            acc = add(acc, sum_all(mul(relu(off), w1)));
            acc = add(acc, sum_all(mul(abs(off), w1)));
            acc = add(acc, sum_all(mul(softmax_rows(a), w1)));
            acc = add(acc, sum_all(mul(layer_norm_rows(a, gain, shift), w1)));
            acc = add(acc, sum_all(mul(matmul(a, m), w2)));
            acc = add(acc, sum_all(mul(matmul(batch_a, m), w6)));
            acc = add(acc, sum_all(mul(matmul(a, batch_m), w3)));
            acc = add(acc, sum_all(mul(matmul(batch_a, batch_m), w3)));
            acc = add(acc, sum_all(mul(concat({a, b}, 1), concat({w1, w1}, 1))));
            acc = add(acc, sum_all(mul(slice(a, 1, 1, 2), w2)));
            acc = add(acc, sum_all(mul(transpose2d(a), w4)));
            acc = add(acc, sum_all(mul(reshape(a, {4, 3}), w4)));
            acc = add(acc, sum_all(mul(repeat_rows(reshape(bias, {1, 4}), 3), w1)));
            acc = add(acc, sum_all(mul(repeat_rows(slice(batch_a, 1, 0, 1), 3), w5)));
            acc = add(acc, mean_all(mul(a, b)));
            return acc;
        };

        std::vector<Tensor*> inputs{&a, &b, &m, &bias, &s, &batch_a, &batch_m, &gain, &shift, &off};
        Tape tape;
        std::vector<Tensor> analytic;
        {
            Tape::Scope scope(tape);
            for (Tensor* t : inputs) tape.watch(*t);
            tape.backward(graph());
            for (Tensor* t : inputs) {
                const Tensor* g = tape.grad(*t);
                REQUIRE(g != nullptr);
                analytic.push_back(g->clone());
            }
        }
        for (size_t i = 0; i < inputs.size(); ++i) {
            const Tensor fd = fd_grad([&]() { return graph().item(); }, *inputs[i]);
            worst = std::max(worst, max_rel_err(analytic[i], fd));
        }
    }
    CHECK(worst < 1e-5);
}

TEST_CASE("grad_check on a linear model is exact", "[tensor]") {
    Rng rng(77);
    Tensor w = random_tensor({4}, rng);
    const Tensor x = random_tensor({4}, rng);

    auto loss_fn = [&]() -> Tensor {
        Tape* t = Tape::active();
        if (t) t->watch(w);
        return sum_all(mul(w, x));
    };
    std::vector<Tensor*> params{&w};
    Rng probe_rng(5);
    const double err = grad_check(loss_fn, params, 8, 1e-5, probe_rng);
    CHECK(err < 1e-10);

    SECTION("contract violations") {
        Rng r2(1);
        CHECK_THROWS_AS(grad_check(loss_fn, params, 0, 1e-5, r2), ContractError);
        CHECK_THROWS_AS(grad_check(loss_fn, params, 1, 1e-3, r2), ContractError);
        CHECK_THROWS_AS(grad_check(loss_fn, params, 1, 1e-7, r2), ContractError);
    }
}

TEST_CASE("tensor invariants", "[tensor]") {
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), ShapeError);
    CHECK_THROWS_AS(Tensor::scalar(1.0).item() + Tensor({2}).item(), ContractError);

#ifndef NDEBUG
    SECTION("non-finite forward results rejected in debug builds") {
        const Tensor huge = Tensor::scalar(1e308);
        CHECK_THROWS_AS(mul(huge, huge), NumericError);
    }
#endif
}
