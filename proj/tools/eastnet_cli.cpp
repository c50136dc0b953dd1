#include <CLI11.hpp>
#include <json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "eastnet/checkpoint.hpp"
#include "eastnet/config.hpp"
#include "eastnet/gradcheck.hpp"
#include "eastnet/report.hpp"
#include "eastnet/train_eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eastnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

int worker_cap() {
    if (const char* env = std::getenv("EASTNET_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return n;
    }
    return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out_override;
    uint64_t seed_override = 0;
    bool has_seed = false;
};

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg = args.config_path.empty() ? RunConfig{} : load_config(args.config_path);
    for (const std::string& kv : args.sets) apply_set_override(cfg, kv);
    if (!args.out_override.empty()) cfg.out_dir = args.out_override;
    if (args.has_seed) cfg.seed = args.seed_override;
    return cfg;
}

void require(bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
}

Dataset load_dataset(const RunConfig& cfg) {
    require(!cfg.dataset_path.empty(), "paths.dataset must be set");
    return read_dataset(cfg.dataset_path);
}

// model dimensions follow the dataset on disk, not the generator section
VariantSpec spec_for(const RunConfig& cfg, const Dataset& ds) {
    VariantSpec s = cfg.variant_spec(ds.covariates.v());
    s.N = ds.mobility.N();
    s.C = ds.mobility.C();
    return s;
}

json metrics_json(const MetricValues& v) {
    json j;
    j["rmse"] = v.rmse;
    j["mae"] = v.mae;
    if (v.mape_pct)
        j["mape_pct"] = *v.mape_pct;
    else
        j["mape_pct"] = nullptr;
    j["count"] = v.count;
    return j;
}

json report_json(const MetricReport& r) {
    json j;
    j["test"] = metrics_json(r.test);
    j["per_horizon"] = json::array();
    for (const MetricValues& h : r.per_horizon) j["per_horizon"].push_back(metrics_json(h));
    j["train_loss_curve"] = r.train_loss_curve;
    j["val_mae_curve"] = r.val_mae_curve;
    j["best_epoch"] = r.best_epoch;
    j["best_val_mae"] = r.best_val_mae;
    j["epochs_run"] = r.epochs_run;
    return j;
}

json config_echo(const RunConfig& cfg) {
    json j = json::object();
    for (const auto& [k, v] : cfg.raw) j[k] = v;
    j["_resolved"]["variant"] = variant_name(cfg.variant);
    j["_resolved"]["train.seed"] = cfg.seed;
    j["_resolved"]["data.seed"] = cfg.data_seed;
    return j;
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed for " + path);
}

void write_timings(const std::string& path, const std::vector<std::pair<std::string, double>>& rows) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open " + path + " for writing");
    for (const auto& [name, sec] : rows) os << name << " " << fmt_fixed(sec, 3) << "s\n";
}

// horizon-1 predictions stitched over the test range, summed over regions
std::vector<SeriesPanel> citywide_panels(Model& model, const ExperimentData& x) {
    const int C = model.spec.C, N = model.spec.N;
    std::vector<SeriesPanel> panels(static_cast<size_t>(C));
    for (int c = 0; c < C; ++c) panels[static_cast<size_t>(c)].title = "channel " + std::to_string(c);

    const std::vector<Window>& ws = x.test_windows;
    for (size_t off = 0; off < ws.size(); off += 64) {
        const size_t take = std::min<size_t>(64, ws.size() - off);
        const WindowBatch batch =
            assemble_batch(x.normalized, x.ds.covariates,
                           std::span<const Window>(ws.data() + off, take), model.spec.alpha,
                           model.spec.beta);
        const ForwardOutput out = model.forward_batch(batch);
        const Tensor& first = out.preds.front();
        for (size_t b = 0; b < take; ++b) {
            const Window& w = ws[off + b];
            for (int c = 0; c < C; ++c) {
                double pred_sum = 0.0, true_sum = 0.0;
                for (int n = 0; n < N; ++n) {
                    pred_sum += denormalize_value(
                        first[(static_cast<int64_t>(b) * N + n) * C + c], x.stats, c);
                    true_sum += x.ds.mobility.at(w.target_begin, n, c);
                }
                panels[static_cast<size_t>(c)].prediction.push_back(pred_sum);
                panels[static_cast<size_t>(c)].truth.push_back(true_sum);
            }
        }
    }
    return panels;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_generate(const RunConfig& cfg) {
    require(!cfg.dataset_path.empty(), "paths.dataset must be set");
    fs::create_directories(fs::path(cfg.dataset_path).parent_path().empty()
                               ? "."
                               : fs::path(cfg.dataset_path).parent_path().string());
    const Dataset ds = generate_synthetic(cfg.generator_config());
    write_dataset(cfg.dataset_path, ds);
    std::cout << "wrote " << cfg.dataset_path << " (T=" << ds.mobility.T()
              << ", N=" << ds.mobility.N() << ", C=" << ds.mobility.C()
              << ", v=" << ds.covariates.v() << ")\n";
    return kExitOk;
}

int cmd_train(const RunConfig& cfg) {
    const Dataset ds = load_dataset(cfg);
    fs::create_directories(cfg.out_dir);
    const ExperimentData x = ExperimentData::prepare(ds, cfg.alpha, cfg.beta);
    std::unique_ptr<Model> model = Model::build(spec_for(cfg, ds));
    std::cout << variant_name(cfg.variant) << ": " << model->param_count()
              << " parameters, training on " << x.train_windows.size() << " windows\n";
    const MetricReport rep = train(*model, x, cfg.train_config());

    const std::string ckpt = cfg.checkpoint_path.empty()
                                 ? (fs::path(cfg.out_dir) / "model.eanw").string()
                                 : cfg.checkpoint_path;
    write_checkpoint(ckpt, *model);
    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(),
                      {{variant_name(cfg.variant), rep.test}});
    json run;
    run["config"] = config_echo(cfg);
    run["results"][variant_name(cfg.variant)] = report_json(rep);
    write_json_file((fs::path(cfg.out_dir) / "run.json").string(), run);
    write_timings((fs::path(cfg.out_dir) / "timings.log").string(),
                  {{variant_name(cfg.variant), rep.wall_seconds}});
    std::cout << "test rmse=" << fmt_fixed(rep.test.rmse) << " mae=" << fmt_fixed(rep.test.mae)
              << " mape=" << (rep.test.mape_pct ? fmt_fixed(*rep.test.mape_pct) + "%" : "na")
              << " (best epoch " << rep.best_epoch << "/" << rep.epochs_run << ")\n";
    return kExitOk;
}

int cmd_eval(const RunConfig& cfg) {
    require(!cfg.checkpoint_path.empty(), "paths.checkpoint must be set");
    const Dataset ds = load_dataset(cfg);
    std::unique_ptr<Model> model = read_checkpoint(cfg.checkpoint_path);
    const ExperimentData x = ExperimentData::prepare(ds, model->spec.alpha, model->spec.beta);
    if (model->spec.N != ds.mobility.N() || model->spec.C != ds.mobility.C() ||
        model->spec.v != ds.covariates.v())
        throw ConfigError("checkpoint dimensions do not match the dataset");
    const EvalResult res = evaluate(*model, x, x.test_windows, cfg.batch, cfg.mape_eps);
    fs::create_directories(cfg.out_dir);
    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(),
                      {{variant_name(model->spec.kind), res.pooled}});
    std::cout << "test rmse=" << fmt_fixed(res.pooled.rmse) << " mae=" << fmt_fixed(res.pooled.mae)
              << " mape=" << (res.pooled.mape_pct ? fmt_fixed(*res.pooled.mape_pct) + "%" : "na")
              << "\n";
    return kExitOk;
}

int cmd_gradcheck(const RunConfig& cfg) {
    VariantSpec spec = cfg.variant_spec(0);  // v resolved by the probe harness
    const double err = variant_grad_check(spec);
    std::cout << variant_name(cfg.variant) << " gradcheck max rel err = " << err << "\n";
    if (!(err < 1e-4)) {
        std::cerr << "gradient check FAILED (threshold 1e-4)\n";
        return kExitNumeric;
    }
    return kExitOk;
}

int cmd_transfer(const RunConfig& cfg) {
    require(!cfg.source_checkpoint.empty(), "paths.source_checkpoint must be set");
    const Dataset ds = load_dataset(cfg);
    fs::create_directories(cfg.out_dir);
    std::unique_ptr<Model> source = read_checkpoint(cfg.source_checkpoint);
    if (!source->spec.uses_memory())
        throw ConfigError("source checkpoint variant has no memory bank to transfer");
    const std::string mem_path = (fs::path(cfg.out_dir) / "memory.eamb").string();
    export_memory(source->memory, mem_path);

    const ExperimentData x = ExperimentData::prepare(ds, cfg.alpha, cfg.beta);
    std::vector<MetricsRow> rows;
    json run;
    run["config"] = config_echo(cfg);
    std::vector<std::pair<std::string, double>> timings;
    for (const ImportMode mode : {ImportMode::Freeze, ImportMode::Retrain}) {
        std::unique_ptr<Model> model = Model::build(spec_for(cfg, ds));
        import_memory(model->memory, model->registry, mem_path, mode);
        const MetricReport rep = train(*model, x, cfg.train_config());
        const std::string name = mode == ImportMode::Freeze ? "freeze" : "retrain";
        rows.push_back({name, rep.test});
        run["results"][name] = report_json(rep);
        timings.emplace_back(name, rep.wall_seconds);
        write_checkpoint((fs::path(cfg.out_dir) / (name + ".eanw")).string(), *model);
    }
    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), rows);
    write_json_file((fs::path(cfg.out_dir) / "run.json").string(), run);
    write_timings((fs::path(cfg.out_dir) / "timings.log").string(), timings);
    return kExitOk;
}

int cmd_ablate(const RunConfig& cfg) {
    const Dataset ds = load_dataset(cfg);
    fs::create_directories(cfg.out_dir);
    const ExperimentData x = ExperimentData::prepare(ds, cfg.alpha, cfg.beta);

    const VariantKind ladder[] = {VariantKind::STNet, VariantKind::STNetTcov,
                                  VariantKind::STNetMem, VariantKind::HMINet,
                                  VariantKind::EASTNet};
    struct Slot {
        MetricReport report;
        std::string error;
    };
    std::vector<Slot> slots(5);

    std::vector<std::thread> pool;
    std::mutex mx;
    size_t next = 0;
    const int workers = std::min(worker_cap(), 5);
    auto run_one = [&](size_t i) {
        RunConfig c = cfg;
        c.variant = ladder[i];
        try {
            std::unique_ptr<Model> model = Model::build(spec_for(c, ds));
            slots[i].report = train(*model, x, c.train_config());
        } catch (const std::exception& e) {
            slots[i].error = e.what();
        }
    };
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&]() {
            for (;;) {
                size_t i;
                {
                    std::lock_guard<std::mutex> lock(mx);
                    if (next >= 5) return;
                    i = next++;
                }
                run_one(i);
            }
        });
    for (std::thread& t : pool) t.join();
    for (const Slot& s : slots)
        if (!s.error.empty()) throw NumericError("ablate: variant run failed: " + s.error);

    // merged deterministically in ladder order, then the two baselines
    std::vector<MetricsRow> rows;
    json run;
    run["config"] = config_echo(cfg);
    std::vector<std::pair<std::string, double>> timings;
    for (size_t i = 0; i < 5; ++i) {
        rows.push_back({variant_name(ladder[i]), slots[i].report.test});
        run["results"][variant_name(ladder[i])] = report_json(slots[i].report);
        timings.emplace_back(variant_name(ladder[i]), slots[i].report.wall_seconds);
    }

    const HistoricalAverage ha = HistoricalAverage::fit(x.ds.mobility, x.split.train);
    MetricAccum acc_ha, acc_nf;
    acc_ha.eps = acc_nf.eps = cfg.mape_eps;
    for (const Window& w : x.test_windows) {
        const Tensor ph = baseline_ha(ha, w, cfg.alpha, cfg.beta);
        const Tensor pn = baseline_nf(x.ds.mobility, w, cfg.alpha, cfg.beta);
        int64_t i = 0;
        for (int s = 0; s < cfg.beta; ++s)
            for (int n = 0; n < ds.mobility.N(); ++n)
                for (int c = 0; c < ds.mobility.C(); ++c, ++i) {
                    const double target = x.ds.mobility.at(w.target_begin + s, n, c);
                    acc_ha.add(ph[i], target);
                    acc_nf.add(pn[i], target);
                }
    }
    rows.push_back({"HA", acc_ha.finish()});
    rows.push_back({"NF", acc_nf.finish()});
    run["results"]["HA"]["test"] = metrics_json(acc_ha.finish());
    run["results"]["NF"]["test"] = metrics_json(acc_nf.finish());

    write_metrics_csv((fs::path(cfg.out_dir) / "metrics.csv").string(), rows);
    write_json_file((fs::path(cfg.out_dir) / "run.json").string(), run);
    write_timings((fs::path(cfg.out_dir) / "timings.log").string(), timings);
    for (const MetricsRow& r : rows)
        std::cout << r.name << ": rmse=" << fmt_fixed(r.values.rmse)
                  << " mae=" << fmt_fixed(r.values.mae) << "\n";
    return kExitOk;
}

int cmd_report(const RunConfig& cfg) {
    require(!cfg.checkpoint_path.empty(), "paths.checkpoint must be set");
    const Dataset ds = load_dataset(cfg);
    std::unique_ptr<Model> model = read_checkpoint(cfg.checkpoint_path);
    const ExperimentData x = ExperimentData::prepare(ds, model->spec.alpha, model->spec.beta);
    fs::create_directories(cfg.out_dir);

    write_timeseries_svg((fs::path(cfg.out_dir) / "timeseries.svg").string(),
                         citywide_panels(*model, x));
    if (model->spec.uses_memory()) {
        const EvalResult res =
            evaluate(*model, x, x.test_windows, cfg.batch, cfg.mape_eps, /*collect_phi=*/true);
        write_attention_svg((fs::path(cfg.out_dir) / "attention.svg").string(), res.phi);
    }
    std::cout << "wrote SVG report to " << cfg.out_dir << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"event-aware multimodal mobility nowcasting harness"};
    app.require_subcommand(1);

    CommonArgs args;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", args.config_path, "key=value config file");
        sub->add_option("--set", args.sets, "override config entries (repeatable)");
        sub->add_option("--out", args.out_override, "output directory");
        sub->add_option("--seed", args.seed_override, "training seed override")
            ->each([&](const std::string&) { args.has_seed = true; });
    };

    CLI::App* generate = app.add_subcommand("generate", "write a synthetic dataset file");
    CLI::App* train_cmd = app.add_subcommand("train", "train one variant");
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    CLI::App* gradcheck_cmd =
        app.add_subcommand("gradcheck", "finite-difference check of the variant gradient");
    CLI::App* transfer =
        app.add_subcommand("transfer", "freeze/retrain runs from a source checkpoint's memory");
    CLI::App* report = app.add_subcommand("report", "emit timeseries and attention SVGs");
    CLI::App* ablate = app.add_subcommand("ablate", "train the full variant ladder plus baselines");
    for (CLI::App* sub : {generate, train_cmd, eval_cmd, gradcheck_cmd, transfer, report, ablate})
        add_common(sub);

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig cfg = resolve_config(args);
        if (generate->parsed()) return cmd_generate(cfg);
        if (train_cmd->parsed()) return cmd_train(cfg);
        if (eval_cmd->parsed()) return cmd_eval(cfg);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(cfg);
        if (transfer->parsed()) return cmd_transfer(cfg);
        if (report->parsed()) return cmd_report(cfg);
        if (ablate->parsed()) return cmd_ablate(cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const FormatError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const ShapeError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return kExitNumeric;
    }
    return kExitOk;
}
