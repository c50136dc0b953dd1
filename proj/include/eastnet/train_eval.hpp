#pragma once

#include <chrono>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "eastnet/data.hpp"
#include "eastnet/models.hpp"

namespace eastnet {

struct TrainConfig {
    int batch_size = 32;
    double lr = 5e-4;
    int max_epochs = 100;
    int patience = 10;
    uint64_t seed = 0;
    double mape_eps = 1.0;  // raw units; targets below are masked out of MAPE

    void validate() const {
        if (batch_size <= 0 || max_epochs <= 0 || patience <= 0 || lr < 0.0)
            throw ContractError("train config: batch_size/max_epochs/patience must be positive");
        if (patience > max_epochs)
            throw ContractError("train config: patience must not exceed max_epochs");
    }
};

struct MetricValues {
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> mape_pct;  // empty when no target cleared the mask
    int64_t count = 0;
};

// Streaming accumulator over denormalized (prediction, target) pairs.
struct MetricAccum {
    double sq = 0.0, ab = 0.0, ape = 0.0;
    int64_t n = 0, n_mape = 0;
    double eps = 1.0;

    void add(double pred, double target) {
        const double e = pred - target;
        sq += e * e;
        ab += std::fabs(e);
        ++n;
        if (std::fabs(target) >= eps) {
            ape += std::fabs(e / target);
            ++n_mape;
        }
    }

    MetricValues finish() const {
        MetricValues v;
        v.count = n;
        if (n > 0) {
            v.rmse = std::sqrt(sq / static_cast<double>(n));
            v.mae = ab / static_cast<double>(n);
        }
        if (n_mape > 0) v.mape_pct = 100.0 * ape / static_cast<double>(n_mape);
        return v;
    }
};

inline MetricValues metrics(std::span<const double> pred, std::span<const double> target,
                            double mape_eps) {
    if (pred.size() != target.size())
        throw ShapeError("metrics: prediction and target lengths differ");
    MetricAccum acc;
    acc.eps = mape_eps;
    for (size_t i = 0; i < pred.size(); ++i) acc.add(pred[i], target[i]);
    return acc.finish();
}

// Mean absolute error in normalized space; subgradient at 0 is 0.
inline Tensor mae_loss(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target))
        throw ShapeError("mae_loss: shapes " + shape_str(pred.shape()) + " and " +
                         shape_str(target.shape()) + " differ");
    return mean_all(abs(sub(pred, target)));
}

inline Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    if (!pred.same_shape(target))
        throw ShapeError("mse_loss: shapes differ");
    const Tensor d = sub(pred, target);
    return mean_all(mul(d, d));
}

inline Tensor batch_mae_loss(const ForwardOutput& out, const WindowBatch& batch) {
    std::vector<Tensor> p, t;
    for (size_t s = 0; s < out.preds.size(); ++s) {
        const Tensor& pr = out.preds[s];
        p.push_back(reshape(pr, {pr.dim(0), pr.dim(1) * pr.dim(2)}));
        const Tensor& ta = batch.y_steps[s];
        t.push_back(reshape(ta, {ta.dim(0), ta.dim(1) * ta.dim(2)}));
    }
    return mae_loss(concat(std::span<const Tensor>(p), 1), concat(std::span<const Tensor>(t), 1));
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

// Historical average over the same slot-of-week position in the training
// range; positions never seen fall back to the global channel mean.
struct HistoricalAverage {
    std::vector<double> table;   // slots_per_week x N x C
    std::vector<int> counts;     // slots_per_week
    std::vector<double> global;  // C
    int week = 0, N = 0, C = 0;

    static HistoricalAverage fit(const MobilityTensor& raw, const SlotRange& train) {
        HistoricalAverage ha;
        ha.week = raw.slots_per_week();
        ha.N = raw.N();
        ha.C = raw.C();
        ha.table.assign(static_cast<size_t>(ha.week) * ha.N * ha.C, 0.0);
        ha.counts.assign(static_cast<size_t>(ha.week), 0);
        ha.global.assign(static_cast<size_t>(ha.C), 0.0);
        for (int t = train.begin; t < train.end; ++t) {
            const int w = t % ha.week;
            ha.counts[static_cast<size_t>(w)] += 1;
            for (int n = 0; n < ha.N; ++n)
                for (int c = 0; c < ha.C; ++c) {
                    ha.table[(static_cast<size_t>(w) * ha.N + n) * ha.C + c] += raw.at(t, n, c);
                    ha.global[static_cast<size_t>(c)] += raw.at(t, n, c);
                }
        }
        const int64_t total = static_cast<int64_t>(train.length()) * ha.N;
        for (int c = 0; c < ha.C; ++c) ha.global[static_cast<size_t>(c)] /= static_cast<double>(total);
        for (int w = 0; w < ha.week; ++w) {
            if (ha.counts[static_cast<size_t>(w)] == 0) continue;
            for (int n = 0; n < ha.N; ++n)
                for (int c = 0; c < ha.C; ++c)
                    ha.table[(static_cast<size_t>(w) * ha.N + n) * ha.C + c] /=
                        ha.counts[static_cast<size_t>(w)];
        }
        return ha;
    }

    double predict(int slot, int n, int c) const {
        const int w = slot % week;
        if (counts[static_cast<size_t>(w)] == 0) return global[static_cast<size_t>(c)];
        return table[(static_cast<size_t>(w) * N + n) * C + c];
    }
};

inline Tensor baseline_ha(const HistoricalAverage& ha, const Window& win, int alpha, int beta) {
    Tensor out({beta, ha.N, ha.C});
    for (int s = 0; s < beta; ++s)
        for (int n = 0; n < ha.N; ++n)
            for (int c = 0; c < ha.C; ++c)
                out[(static_cast<int64_t>(s) * ha.N + n) * ha.C + c] =
                    ha.predict(win.input_begin + alpha + s, n, c);
    return out;
}

// Repeats the latest observation for all beta steps, bitwise.
inline Tensor baseline_nf(const MobilityTensor& raw, const Window& win, int alpha, int beta) {
    const int N = raw.N(), C = raw.C();
    Tensor out({beta, N, C});
    const int last = win.input_begin + alpha - 1;
    for (int s = 0; s < beta; ++s)
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                out[(static_cast<int64_t>(s) * N + n) * C + c] = raw.at(last, n, c);
    return out;
}

// ---------------------------------------------------------------------------
// Experiment data bundle and evaluation
// ---------------------------------------------------------------------------

struct ExperimentData {
    Dataset ds;
    ChronoSplit split;
    ChannelStats stats;
    MobilityTensor normalized;
    std::vector<Window> train_windows, val_windows, test_windows;

    static ExperimentData prepare(Dataset dataset, int alpha, int beta) {
        ExperimentData x;
        x.ds = std::move(dataset);
        x.split = split_chrono(x.ds.mobility);
        x.stats = compute_stats(x.ds.mobility, x.split.train);
        x.normalized = normalize(x.ds.mobility, x.stats);
        x.train_windows = make_windows(x.split.train, alpha, beta);
        x.val_windows = make_windows(x.split.val, alpha, beta);
        x.test_windows = make_windows(x.split.test, alpha, beta);
        if (x.train_windows.empty() || x.test_windows.empty())
            throw ContractError("dataset too short for the requested alpha/beta windows");
        return x;
    }
};

struct EvalResult {
    MetricValues pooled;
    std::vector<MetricValues> per_horizon;
    std::vector<std::vector<double>> phi;  // one attention row per window (memory variants)
};

inline EvalResult evaluate(Model& model, const ExperimentData& x,
                           std::span<const Window> windows, int batch_size, double mape_eps,
                           bool collect_phi = false) {
    EvalResult res;
    MetricAccum pooled;
    pooled.eps = mape_eps;
    std::vector<MetricAccum> horizon(static_cast<size_t>(model.spec.beta));
    for (MetricAccum& h : horizon) h.eps = mape_eps;

    const int N = model.spec.N, C = model.spec.C;
    for (size_t off = 0; off < windows.size(); off += static_cast<size_t>(batch_size)) {
        const size_t take = std::min(static_cast<size_t>(batch_size), windows.size() - off);
        const WindowBatch batch = assemble_batch(x.normalized, x.ds.covariates,
                                                 windows.subspan(off, take), model.spec.alpha,
                                                 model.spec.beta);
        const ForwardOutput out = model.forward_batch(batch);  // no tape: plain evaluation
        for (int s = 0; s < model.spec.beta; ++s) {
            const Tensor& pr = out.preds[static_cast<size_t>(s)];
            for (int b = 0; b < batch.B; ++b) {
                const Window& w = windows[off + static_cast<size_t>(b)];
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double pred_raw = denormalize_value(
                            pr[(static_cast<int64_t>(b) * N + n) * C + c], x.stats, c);
                        const double target_raw = x.ds.mobility.at(w.target_begin + s, n, c);
                        pooled.add(pred_raw, target_raw);
                        horizon[static_cast<size_t>(s)].add(pred_raw, target_raw);
                    }
            }
        }
        if (collect_phi && out.phi.size() > 0) {
            for (int b = 0; b < batch.B; ++b) {
                std::vector<double> row(static_cast<size_t>(model.spec.m));
                for (int j = 0; j < model.spec.m; ++j)
                    row[static_cast<size_t>(j)] = out.phi[static_cast<int64_t>(b) * model.spec.m + j];
                res.phi.push_back(std::move(row));
            }
        }
    }
    res.pooled = pooled.finish();
    for (const MetricAccum& h : horizon) res.per_horizon.push_back(h.finish());
    return res;
}

struct MetricReport {
    MetricValues test;
    std::vector<MetricValues> per_horizon;
    std::vector<double> train_loss_curve;
    std::vector<double> val_mae_curve;
    int best_epoch = 0;        // 1-based
    double best_val_mae = 0.0;
    int epochs_run = 0;
    double wall_seconds = 0.0;
};

// Minibatch Adam on MAE with early stopping on denormalized validation MAE;
// the best-validation parameters are restored before the test pass.
inline MetricReport train(Model& model, const ExperimentData& x, const TrainConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<Tensor*> params = model.registry.trainable();
    AdamState adam = AdamState::init(params, cfg.lr);

    MetricReport report;
    std::vector<Tensor> best_snapshot = model.registry.snapshot();
    double best_val = std::numeric_limits<double>::infinity();
    int best_epoch = 0, bad_epochs = 0;

    std::vector<size_t> order(x.train_windows.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double loss_sum = 0.0;
        int batches = 0;
        for (size_t off = 0; off < order.size(); off += static_cast<size_t>(cfg.batch_size)) {
            const size_t take =
                std::min(static_cast<size_t>(cfg.batch_size), order.size() - off);
            std::vector<Window> ws(take);
            for (size_t i = 0; i < take; ++i) ws[i] = x.train_windows[order[off + i]];

            const WindowBatch batch = assemble_batch(x.normalized, x.ds.covariates, ws,
                                                     model.spec.alpha, model.spec.beta);
            model.stage();
            Tape::Scope scope(model.tape);
            const ForwardOutput out = model.forward_batch(batch);
            const Tensor loss = batch_mae_loss(out, batch);
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("training diverged: non-finite loss at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(batches + 1));
            model.tape.backward(loss);
            std::vector<const Tensor*> grads;
            grads.reserve(params.size());
            for (Tensor* p : params) grads.push_back(model.tape.grad(*p));
            adam_step(adam, params, grads);
            model.tape.clear();
            loss_sum += lv;
            ++batches;
        }
        report.train_loss_curve.push_back(loss_sum / std::max(batches, 1));
        report.epochs_run = epoch;

        const EvalResult val = evaluate(model, x, x.val_windows, cfg.batch_size, cfg.mape_eps);
        report.val_mae_curve.push_back(val.pooled.mae);
        if (val.pooled.mae < best_val) {
            best_val = val.pooled.mae;
            best_epoch = epoch;
            best_snapshot = model.registry.snapshot();
            bad_epochs = 0;
        } else {
            ++bad_epochs;
        }
        if (bad_epochs >= cfg.patience) break;
    }

    model.registry.restore(best_snapshot);
    report.best_epoch = best_epoch;
    report.best_val_mae = best_val;

    const EvalResult test = evaluate(model, x, x.test_windows, cfg.batch_size, cfg.mape_eps);
    report.test = test.pooled;
    report.per_horizon = test.per_horizon;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace eastnet
