#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "eastnet/memory.hpp"
#include "oracles.hpp"

using namespace eastnet;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("memory query attention", "[memory]") {
    Rng rng(5);
    MemoryBank bank = MemoryBank::init(4, 6, 10, false, rng);

    SECTION("identical records give uniform attention and return the record") {
        for (int j = 0; j < 4; ++j)
            for (int d = 0; d < 6; ++d) bank.M[j * 6 + d] = 0.1 * d - 0.2;
        const Tensor f = Tensor::uniform({1, 10}, -1, 1, rng);
        const MemoryRead read = memory_query(bank, f);
        for (int j = 0; j < 4; ++j) CHECK(read.phi[j] == Catch::Approx(0.25).margin(1e-12));
        for (int d = 0; d < 6; ++d)
            CHECK(read.value[d] == Catch::Approx(0.1 * d - 0.2).margin(1e-12));
    }

    SECTION("a dominating record saturates the attention") {
        // record 0 aligned with the query, others orthogonal and tiny
        std::fill(bank.Wq.data(), bank.Wq.data() + bank.Wq.size(), 0.0);
        for (int d = 0; d < 6; ++d) bank.bq[d] = 10.0;
        std::fill(bank.M.data(), bank.M.data() + bank.M.size(), 0.0);
        for (int d = 0; d < 6; ++d) bank.M[d] = 5.0;  // M[0]
        const MemoryRead read = memory_query(bank, Tensor::zeros({1, 10}));
        CHECK(read.phi[0] > 1.0 - 1e-9);
        for (int d = 0; d < 6; ++d) CHECK(read.value[d] == Catch::Approx(5.0).margin(1e-6));
    }

    SECTION("phi rows sum to one") {
        Rng r2(6);
        const Tensor f = Tensor::uniform({3, 10}, -2, 2, r2);
        const MemoryRead read = memory_query(bank, f);
        for (int b = 0; b < 3; ++b) {
            double s = 0;
            for (int j = 0; j < 4; ++j) s += read.phi[b * 4 + j];
            CHECK(std::fabs(s - 1.0) <= 1e-12);
        }
    }

    SECTION("flattened width must match d_flat") {
        CHECK_THROWS_AS(memory_query(bank, Tensor::zeros({1, 9})), ShapeError);
    }
}

TEST_CASE("memory query gradients flow to M, W_Q, and the features", "[memory]") {
    Rng rng(9);
    MemoryBank bank = MemoryBank::init(3, 4, 5, false, rng);
    Tensor f = Tensor::uniform({2, 5}, -1, 1, rng);
    const Tensor wv = Tensor::uniform({2, 4}, -1, 1, rng);
    const Tensor wp = Tensor::uniform({2, 3}, -1, 1, rng);

    auto graph = [&]() -> Tensor {
        const MemoryRead read = memory_query(bank, f);
        return add(sum_all(mul(read.value, wv)), sum_all(mul(read.phi, wp)));
    };

    Tape tape;
    {
        Tape::Scope scope(tape);
        tape.watch(bank.M);
        tape.watch(bank.Wq);
        tape.watch(f);
        tape.backward(graph());
    }
    auto value = [&]() { return graph().item(); };
    CHECK(oracles::max_rel_err(*tape.grad(bank.M), oracles::fd_grad(value, bank.M)) < 1e-5);
    CHECK(oracles::max_rel_err(*tape.grad(bank.Wq), oracles::fd_grad(value, bank.Wq)) < 1e-5);
    CHECK(oracles::max_rel_err(*tape.grad(f), oracles::fd_grad(value, f)) < 1e-5);
}

TEST_CASE("filter normalization", "[memory]") {
    const Tensor one = Tensor::scalar(1.0);
    const Tensor zero = Tensor::scalar(0.0);

    SECTION("already standardized input passes through") {
        const Tensor out = filter_normalize(Tensor({2}, {1.0, -1.0}), one, zero);
        CHECK(out[0] == Catch::Approx(1.0).margin(1e-6));
        CHECK(out[1] == Catch::Approx(-1.0).margin(1e-6));
    }

    SECTION("constant vector collapses to the shift") {
        const Tensor out = filter_normalize(Tensor({3}, {5.0, 5.0, 5.0}), one, Tensor::scalar(0.7));
        for (int i = 0; i < 3; ++i) CHECK(out[i] == 0.7);
    }

    SECTION("output statistics match the gain") {
        Rng rng(17);
        for (int trial = 0; trial < 10; ++trial) {
            const double gain = rng.uniform(0.5, 2.0);
            const Tensor v = Tensor::uniform({64}, -2, 2, rng);
            const Tensor out = filter_normalize(v, Tensor::scalar(gain), zero);
            double mean = 0;
            for (int64_t i = 0; i < out.size(); ++i) mean += out[i];
            mean /= static_cast<double>(out.size());
            double var = 0;
            for (int64_t i = 0; i < out.size(); ++i) var += (out[i] - mean) * (out[i] - mean);
            var /= static_cast<double>(out.size());
            CHECK(std::fabs(mean) < 1e-8);
            CHECK(std::fabs(std::sqrt(var) - std::fabs(gain)) < 1e-6);
        }
    }

    SECTION("rows shorter than 2 are rejected") {
        CHECK_THROWS_AS(filter_normalize(Tensor({1}, {3.0}), one, zero), ContractError);
    }
}

TEST_CASE("filter generation", "[memory]") {
    Rng rng(23);
    const std::vector<FilterGroupSpec> groups{{"dec0.u", 2, 5, 3}, {"dec0.r", 2, 5, 3}};
    FilterGenerator gen = FilterGenerator::init(6, 6, groups, rng);

    SECTION("zero prototype with zero shifts produces zero kernels") {
        const std::vector<DynKernel> ks = generate_filters(gen, Tensor::zeros({1, 6}));
        for (const DynKernel& k : ks)
            for (int64_t i = 0; i < k.flat.size(); ++i) CHECK(k.flat[i] == 0.0);
    }

    SECTION("distinct prototypes produce distinct kernels") {
        const Tensor v1 = Tensor::uniform({1, 6}, -1, 1, rng);
        const Tensor v2 = Tensor::uniform({1, 6}, -1, 1, rng);
        const std::vector<DynKernel> k1 = generate_filters(gen, v1);
        const std::vector<DynKernel> k2 = generate_filters(gen, v2);
        double diff = 0;
        for (int64_t i = 0; i < k1[0].flat.size(); ++i)
            diff += std::fabs(k1[0].flat[i] - k2[0].flat[i]);
        CHECK(diff > 1e-9);
    }

    SECTION("generated element count equals the static kernel element count") {
        const std::vector<DynKernel> ks = generate_filters(gen, Tensor::zeros({1, 6}));
        Rng r2(24);
        const ConvKernel static_kernel = ConvKernel::init(2, 5, 3, r2);
        CHECK(ks[0].flat.size() == static_kernel.theta.size());
        // per-batch supports reshape to the same p x q planes
        const Tensor s0 = ks[0].support(1);
        CHECK(s0.shape() == Shape{1, 5, 3});
    }

    SECTION("prototype width is validated") {
        CHECK_THROWS_AS(generate_filters(gen, Tensor::zeros({1, 5})), ShapeError);
    }
}

TEST_CASE("memory snapshot export and import", "[memory]") {
    Rng rng(31);
    MemoryBank bank = MemoryBank::init(4, 6, 10, false, rng);
    ParamRegistry reg;
    reg.add("memory.M", bank.M);
    reg.add("memory.Wq", bank.Wq);
    reg.add("memory.bq", bank.bq);
    const std::string path = temp_path("eastnet_mem_test.eamb");
    export_memory(bank, path);

    SECTION("round trip restores every value bitwise") {
        const Tensor m0 = bank.M.clone();
        for (int64_t i = 0; i < bank.M.size(); ++i) bank.M[i] += 1.0;
        import_memory(bank, reg, path, ImportMode::Freeze);
        for (int64_t i = 0; i < bank.M.size(); ++i) CHECK(bank.M[i] == m0[i]);
        CHECK_FALSE(reg.find("memory.M")->trainable);
    }

    SECTION("freeze excludes the memory from updates, retrain keeps it trainable") {
        import_memory(bank, reg, path, ImportMode::Freeze);
        CHECK(reg.trainable().empty());
        import_memory(bank, reg, path, ImportMode::Retrain);
        CHECK(reg.trainable().size() == 3);

        // one Adam step with a nonzero gradient moves M only when trainable
        const Tensor before = bank.M.clone();
        std::vector<Tensor*> params = reg.trainable();
        AdamState st = AdamState::init(params, 1e-2);
        std::vector<Tensor> gs;
        for (Tensor* p : params) gs.push_back(Tensor::ones(p->shape()));
        std::vector<const Tensor*> gptr;
        for (Tensor& g : gs) gptr.push_back(&g);
        adam_step(st, params, gptr);
        double moved = 0;
        for (int64_t i = 0; i < bank.M.size(); ++i) moved += std::fabs(bank.M[i] - before[i]);
        CHECK(moved > 0.0);
    }

    SECTION("dimension mismatch rejects the whole load") {
        Rng r2(32);
        MemoryBank other = MemoryBank::init(5, 6, 10, false, r2);
        ParamRegistry reg2;
        reg2.add("memory.M", other.M);
        const Tensor before = other.M.clone();
        CHECK_THROWS_WITH(import_memory(other, reg2, path, ImportMode::Freeze),
                          Catch::Matchers::ContainsSubstring("m=4") &&
                              Catch::Matchers::ContainsSubstring("m=5"));
        for (int64_t i = 0; i < other.M.size(); ++i) CHECK(other.M[i] == before[i]);
    }

    SECTION("truncated snapshot names the byte offset") {
        const std::string cut = temp_path("eastnet_mem_cut.eamb");
        std::filesystem::copy_file(path, cut, std::filesystem::copy_options::overwrite_existing);
        std::filesystem::resize_file(cut, 40);
        ParamRegistry reg3;
        CHECK_THROWS_AS(import_memory(bank, reg3, cut, ImportMode::Freeze), FormatError);
        std::filesystem::remove(cut);
    }

    std::filesystem::remove(path);
}
