#pragma once

#include "eastnet/train_eval.hpp"

namespace eastnet {

struct GradCheckSetup {
    int n_probes = 48;
    double h = 1e-5;
    int batch_windows = 2;
    uint64_t probe_seed = 1234;
};

// End-to-end gradient check of a variant's training loss on a small seeded
// synthetic batch. The probed loss is the squared error, which is smooth
// everywhere the finite-difference stencil lands.
inline double variant_grad_check(const VariantSpec& spec, const GradCheckSetup& setup = {}) {
    GeneratorConfig g;
    g.seed = spec.seed + 17;
    g.T = std::max(10, 3 * (spec.alpha + spec.beta)) + 4;
    g.N = spec.N;
    g.C = spec.C;
    g.slot_minutes = 30;
    g.noise_level = 0.3;
    const Dataset ds = generate_synthetic(g);

    VariantSpec s = spec;
    s.v = ds.covariates.v();
    std::unique_ptr<Model> model = Model::build(s);

    const ChronoSplit split = split_chrono(ds.mobility);
    const ChannelStats stats = compute_stats(ds.mobility, split.train);
    const MobilityTensor normalized = normalize(ds.mobility, stats);
    const std::vector<Window> windows = make_windows(split.train, s.alpha, s.beta);
    if (static_cast<int>(windows.size()) < setup.batch_windows)
        throw ContractError("variant_grad_check: probe dataset too short");
    const WindowBatch batch =
        assemble_batch(normalized, ds.covariates,
                       std::span<const Window>(windows.data(),
                                               static_cast<size_t>(setup.batch_windows)),
                       s.alpha, s.beta);

    auto loss_fn = [&]() {
        Tape* tape = Tape::active();
        if (tape) model->registry.watch_all(*tape);
        const ForwardOutput out = model->forward_batch(batch);
        std::vector<Tensor> p, t;
        for (size_t i = 0; i < out.preds.size(); ++i) {
            const Tensor& pr = out.preds[i];
            p.push_back(reshape(pr, {pr.dim(0), pr.dim(1) * pr.dim(2)}));
            const Tensor& ta = batch.y_steps[i];
            t.push_back(reshape(ta, {ta.dim(0), ta.dim(1) * ta.dim(2)}));
        }
        return mse_loss(concat(std::span<const Tensor>(p), 1),
                        concat(std::span<const Tensor>(t), 1));
    };

    const std::vector<Tensor*> params = model->registry.trainable();
    Rng rng(setup.probe_seed);
    return grad_check(loss_fn, params, setup.n_probes, setup.h, rng);
}

}  // namespace eastnet
