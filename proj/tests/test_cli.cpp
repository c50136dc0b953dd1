#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

const std::string kBin = EASTNET_BIN;

int run_cli(const std::string& args) {
    const std::string cmd = kBin + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

struct Workspace {
    fs::path dir;
    Workspace() {
        dir = fs::temp_directory_path() / "eastnet_cli_test";
        fs::remove_all(dir);
        fs::create_directories(dir);
    }
    ~Workspace() { fs::remove_all(dir); }
    std::string path(const char* name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("generate, train, eval round trip with a config file", "[cli]") {
    Workspace ws;
    const std::string cfg = ws.path("run.cfg");
    {
        std::ofstream os(cfg);
        os << "# compact experiment\n"
           << "data.T = 800\n"
           << "data.N = 3\n"
           << "data.C = 2\n"
           << "data.slot_minutes = 60\n"
           << "data.seed = 5\n"
           << "model.variant = STNetTcov\n"
           << "model.q = 6\n"
           << "model.K = 1\n"
           << "train.batch = 32\n"
           << "train.epochs = 2\n"
           << "train.patience = 2\n"
           << "train.seed = 9\n"
           << "paths.dataset = " << ws.path("data.mmt") << "\n";
    }
    REQUIRE(run_cli("generate --config " + cfg) == 0);
    REQUIRE(fs::exists(ws.path("data.mmt")));

    REQUIRE(run_cli("train --config " + cfg + " --out " + ws.path("out")) == 0);
    const std::string train_csv = slurp(ws.path("out") + std::string("/metrics.csv"));
    REQUIRE(train_csv.rfind("variant,rmse,mae,mape", 0) == 0);
    REQUIRE(fs::exists(ws.path("out") + std::string("/model.eanw")));
    REQUIRE(fs::exists(ws.path("out") + std::string("/run.json")));

    REQUIRE(run_cli("eval --config " + cfg + " --set paths.checkpoint=" + ws.path("out") +
                    "/model.eanw --out " + ws.path("out_eval")) == 0);
    const std::string eval_csv = slurp(ws.path("out_eval") + std::string("/metrics.csv"));

    // identical test metrics from the checkpoint round trip
    CHECK(train_csv.substr(train_csv.find('\n') + 1) ==
          eval_csv.substr(eval_csv.find('\n') + 1));
}

TEST_CASE("gradcheck subcommand exits cleanly for every variant", "[cli]") {
    for (const char* variant : {"STNet", "STNetTcov", "STNetMem", "HMINet", "EASTNet"}) {
        INFO(variant);
        REQUIRE(run_cli(std::string("gradcheck --set model.variant=") + variant +
                        " --set data.N=4 --set data.C=3 --set model.q=6 --set model.K=1"
                        " --set model.m=3 --set model.D=6 --set model.mu_sp=4") == 0);
    }
}

TEST_CASE("ablate emits the five-variant ladder plus both baselines", "[cli]") {
    Workspace ws;
    const std::string common =
        " --set data.T=600 --set data.N=3 --set data.C=2 --set data.slot_minutes=60"
        " --set model.q=6 --set model.K=1 --set model.m=3 --set model.D=6"
        " --set train.epochs=1 --set train.patience=1 --set paths.dataset=" + ws.path("d.mmt");
    REQUIRE(run_cli("generate" + common) == 0);
    REQUIRE(run_cli("ablate" + common + " --out " + ws.path("a1")) == 0);

    const std::string csv = slurp(ws.path("a1") + std::string("/metrics.csv"));
    std::istringstream is(csv);
    std::string line;
    std::vector<std::string> names;
    std::getline(is, line);
    CHECK(line == "variant,rmse,mae,mape");
    while (std::getline(is, line))
        if (!line.empty()) names.push_back(line.substr(0, line.find(',')));
    REQUIRE(names == std::vector<std::string>{"STNet", "STNetTcov", "STNetMem", "HMINet",
                                              "EASTNet", "HA", "NF"});

    SECTION("byte-for-byte reproducible under the same config and seed") {
        REQUIRE(run_cli("ablate" + common + " --out " + ws.path("a2")) == 0);
        CHECK(slurp(ws.path("a1") + std::string("/metrics.csv")) ==
              slurp(ws.path("a2") + std::string("/metrics.csv")));
        CHECK(slurp(ws.path("a1") + std::string("/run.json")) ==
              slurp(ws.path("a2") + std::string("/run.json")));
    }
}

TEST_CASE("transfer runs freeze and retrain from a source checkpoint", "[cli]") {
    Workspace ws;
    const std::string common =
        " --set data.T=600 --set data.N=3 --set data.C=2 --set data.slot_minutes=60"
        " --set model.variant=EASTNet --set model.q=6 --set model.K=1"
        " --set model.m=3 --set model.D=6 --set train.epochs=1 --set train.patience=1"
        " --set paths.dataset=" + ws.path("d.mmt");
    REQUIRE(run_cli("generate" + common) == 0);
    REQUIRE(run_cli("train" + common + " --out " + ws.path("src")) == 0);
    REQUIRE(run_cli("transfer" + common + " --set paths.source_checkpoint=" + ws.path("src") +
                    "/model.eanw --out " + ws.path("xfer")) == 0);
    const std::string csv = slurp(ws.path("xfer") + std::string("/metrics.csv"));
    CHECK(csv.find("\nfreeze,") != std::string::npos);
    CHECK(csv.find("\nretrain,") != std::string::npos);
    CHECK(fs::exists(ws.path("xfer") + std::string("/memory.eamb")));
}

TEST_CASE("report emits the SVG artifacts", "[cli]") {
    Workspace ws;
    const std::string common =
        " --set data.T=600 --set data.N=3 --set data.C=2 --set data.slot_minutes=60"
        " --set model.variant=EASTNet --set model.q=6 --set model.K=1"
        " --set model.m=3 --set model.D=6 --set train.epochs=1 --set train.patience=1"
        " --set paths.dataset=" + ws.path("d.mmt");
    REQUIRE(run_cli("generate" + common) == 0);
    REQUIRE(run_cli("train" + common + " --out " + ws.path("t")) == 0);
    REQUIRE(run_cli("report" + common + " --set paths.checkpoint=" + ws.path("t") +
                    "/model.eanw --out " + ws.path("rep")) == 0);
    CHECK(fs::exists(ws.path("rep") + std::string("/timeseries.svg")));
    CHECK(fs::exists(ws.path("rep") + std::string("/attention.svg")));
    const std::string svg = slurp(ws.path("rep") + std::string("/attention.svg"));
    CHECK(svg.rfind("<?xml", 0) == 0);
}

TEST_CASE("exit codes distinguish config, io, and numeric failures", "[cli]") {
    Workspace ws;
    SECTION("unknown config key") {
        CHECK(run_cli("generate --set nosuch.key=1") == 2);
    }
    SECTION("missing required path") {
        CHECK(run_cli("train --set model.variant=STNet") == 2);
    }
    SECTION("unreadable dataset") {
        CHECK(run_cli("train --set paths.dataset=" + ws.path("missing.mmt")) == 3);
    }
    SECTION("corrupt dataset file") {
        std::ofstream os(ws.path("bad.mmt"), std::ios::binary);
        os << "MMT1garbage";
        os.close();
        CHECK(run_cli("train --set paths.dataset=" + ws.path("bad.mmt")) == 3);
    }
}
