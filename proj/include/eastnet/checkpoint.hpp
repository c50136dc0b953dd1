#pragma once

#include <memory>
#include <string>

#include "eastnet/io.hpp"
#include "eastnet/models.hpp"

namespace eastnet {

// Model checkpoint: magic "EANW", version, spec fields, parameters in
// registry order (float64 LE), then the memory snapshot when present.

inline void write_checkpoint(const std::string& path, const Model& model) {
    if (model.spec.modal_identity_probe)
        throw ContractError("checkpoint: probe models are not serializable");
    BinWriter w(path);
    w.magic("EANW");
    w.u32(1);
    const VariantSpec& s = model.spec;
    w.u32(static_cast<uint32_t>(s.kind));
    for (int field : {s.N, s.C, s.alpha, s.beta, s.q, s.K, s.L, s.m, s.D, s.mu_sp, s.mu_mo, s.v,
                      s.v_prime, s.pyramid_factor})
        w.u32(static_cast<uint32_t>(field));
    w.u64(s.seed);
    w.u64(static_cast<uint64_t>(model.registry.count()));
    for (const ParamRegistry::Entry& e : model.registry.entries()) w.tensor(*e.value);
    if (s.uses_memory()) {
        w.u32(1);
        const MemoryBank& b = model.memory;
        w.magic("EAMB");
        w.u32(1);
        w.u32(static_cast<uint32_t>(b.m));
        w.u32(static_cast<uint32_t>(b.D));
        w.u32(static_cast<uint32_t>(b.d_flat));
        w.tensor(b.M);
        w.tensor(b.Wq);
        w.tensor(b.bq);
    } else {
        w.u32(0);
    }
    w.close();
}

inline std::unique_ptr<Model> read_checkpoint(const std::string& path) {
    BinReader r(path);
    r.expect_magic("EANW");
    const uint32_t version = r.u32();
    if (version != 1)
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    VariantSpec s;
    const uint32_t kind = r.u32();
    if (kind > static_cast<uint32_t>(VariantKind::EASTNet))
        throw FormatError(path + ": unknown variant id " + std::to_string(kind));
    s.kind = static_cast<VariantKind>(kind);
    int* fields[] = {&s.N, &s.C, &s.alpha, &s.beta, &s.q, &s.K, &s.L, &s.m, &s.D,
                     &s.mu_sp, &s.mu_mo, &s.v, &s.v_prime, &s.pyramid_factor};
    for (int* f : fields) *f = static_cast<int>(r.u32());
    s.seed = r.u64();

    std::unique_ptr<Model> model = Model::build(s);
    const uint64_t count = r.u64();
    if (count != static_cast<uint64_t>(model.get()->registry.count()))
        throw FormatError(path + ": parameter count " + std::to_string(count) +
                          " does not match the rebuilt model (" +
                          std::to_string(model.get()->registry.count()) + ")");
    for (ParamRegistry::Entry& e : model.get()->registry.entries()) r.tensor_into(*e.value);

    const uint32_t has_memory = r.u32();
    if (has_memory != (s.uses_memory() ? 1u : 0u))
        throw FormatError(path + ": memory snapshot flag does not match the variant");
    if (has_memory) {
        r.expect_magic("EAMB");
        const uint32_t mver = r.u32();
        if (mver != 1) throw FormatError(path + ": unsupported memory snapshot version");
        const uint32_t m = r.u32(), D = r.u32(), d_flat = r.u32();
        MemoryBank& b = model.get()->memory;
        if (static_cast<int>(m) != b.m || static_cast<int>(D) != b.D ||
            static_cast<int>(d_flat) != b.d_flat)
            throw FormatError(path + ": embedded memory snapshot (m=" + std::to_string(m) +
                              ", D=" + std::to_string(D) + ") does not match the model");
        r.tensor_into(b.M);
        r.tensor_into(b.Wq);
        r.tensor_into(b.bq);
    }
    r.expect_eof();
    return model;
}

}  // namespace eastnet
