#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "numprobe/cli.hpp"

using namespace numprobe;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("numprobe_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::size_t count(const std::string& s, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

void write_table(const fs::path& p, const EmbeddingTable& t) { write_npad(p, t.vectors); }

// 63 planted frequencies, one per raw dimension, with distinct amplitudes.
EmbeddingTable planted63(std::uint64_t seed, double scale, double noise = 0.0) {
    std::vector<std::pair<int, double>> f;
    for (int j = 0; j < 63; ++j) {
        f.emplace_back(3 + 7 * j, scale * (1.0 + 0.01 * j));
    }
    return fixtures::planted_table(1000, 64, f, seed, noise);
}

}  // namespace

TEST(Report, HeatmapHasOneCellPerEntryAndAColorbar) {
    Matrix m(2, 2);
    m(0, 0) = 1;
    m(1, 1) = 1;
    const auto svg = heatmap_svg(m, {"t", "x", "y", {"a", "b"}, {"a", "b"}, 0, 1});
    EXPECT_EQ(count(svg, "class=\"cell\""), 4u);
    EXPECT_EQ(count(svg, "class=\"colorbar\""), 1u);
    EXPECT_THROW(heatmap_svg(Matrix(0, 0), {}), ReportError);
    EXPECT_THROW(heatmap_svg(m, {"t", "x", "y", {"a"}, {}, 0, 1}), ReportError);
}

TEST(Report, EmptySeriesRejected) {
    EXPECT_THROW(line_chart_svg({}, {}), ReportError);
    EXPECT_THROW(line_chart_svg({Series{"s", {}, {}}}, {}), ReportError);
    EXPECT_THROW(line_chart_svg({Series{"s", {1, 2}, {1}}}, {}), ReportError);
    const auto svg = line_chart_svg({Series{"s", {1, 2, 3}, {0.5, NAN, 0.7}}}, {"t", "x", "y", 0.0, 1.0});
    // The gap splits the line into two single-point polylines.
    EXPECT_EQ(count(svg, "<polyline"), 2u);
}

TEST(Report, CrossLayerAxisLabels) {
    const auto dir = scratch("report_cl");
    const nlohmann::json doc{{"kind", "cross-layer"},
                             {"results", {{"layers", {0, 1}}, {"accuracy", {{1.0, 0.5}, {0.25, 1.0}}}}}};
    write_text(dir / "results.json", doc.dump());
    const auto files = render_report(dir);
    ASSERT_EQ(files, std::vector<std::string>{"cross_layer.svg"});
    const auto svg = slurp(dir / "cross_layer.svg");
    EXPECT_NE(svg.find(">trained on layer<"), std::string::npos);
    EXPECT_NE(svg.find(">evaluated on layer<"), std::string::npos);
    EXPECT_EQ(count(svg, "class=\"cell\""), 4u);
}

TEST(Report, UnknownKindAndMissingResults) {
    const auto dir = scratch("report_bad");
    EXPECT_THROW(render_report(dir), ReportError);
    write_text(dir / "results.json", R"({"kind": "nope", "results": {}})");
    EXPECT_THROW(render_report(dir), ReportError);
    write_text(dir / "results.json", R"({"kind": "loo", "results": {"layers": []}})");
    EXPECT_THROW(render_report(dir), ReportError);
}

TEST(Report, CsvQuoting) {
    CsvTable t({"a", "b"});
    t.add({"x,y", "say \"hi\""});
    EXPECT_EQ(t.str(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
    EXPECT_THROW(t.add({"1"}), ReportError);
}

TEST(Config, PointerPathsAndDefaults) {
    nlohmann::json cfg{{"train", {{"max_epochs", -3}}}, {"n", "x"}};
    ConfigReader r(cfg);
    auto t = r.child("train");
    try {
        t.get<std::size_t>("max_epochs", 5);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(std::string(e.what()).rfind("/train/max_epochs", 0), 0u) << e.what();
    }
    EXPECT_EQ(t.get<double>("learning_rate", 0.5), 0.5);
    EXPECT_EQ(cfg["train"]["learning_rate"], 0.5);
    try {
        r.finish();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(std::string(e.what()), "/n: unknown key");
    }
    EXPECT_THROW(r.require<int>("missing"), ConfigError);
    nlohmann::json arr = nlohmann::json::array();
    EXPECT_THROW(ConfigReader{arr}, ConfigError);
}

TEST(Config, OverridesAndAssignments) {
    nlohmann::json cfg = nlohmann::json::object();
    apply_override(cfg, "train.max_epochs", 7);
    apply_override(cfg, "k", parse_assignment("k=63").second);
    apply_override(cfg, "kind", parse_assignment("kind=sin").second);
    EXPECT_EQ(cfg["train"]["max_epochs"], 7);
    EXPECT_EQ(cfg["k"], 63);
    EXPECT_EQ(cfg["kind"], "sin");
    EXPECT_THROW(parse_assignment("novalue"), ConfigError);
    EXPECT_THROW(apply_override(cfg, "a..b", 1), ConfigError);
    const auto dir = scratch("toml");
    write_text(dir / "c.toml", "k = 1\n");
    EXPECT_THROW(load_config(dir / "c.toml"), ConfigError);
}

TEST(Config, ExitCodes) {
    EXPECT_EQ(exit_code(ConfigError("x")), 2);
    EXPECT_EQ(exit_code(SplitError("x")), 2);
    EXPECT_EQ(exit_code(StoreError("x")), 3);
    EXPECT_EQ(exit_code(SchemaError("x")), 3);
    EXPECT_EQ(exit_code(DimensionError("x")), 4);
    EXPECT_EQ(exit_code(DivergenceError(1, "x")), 4);
}

TEST(Commands, RsaOnIdenticalTablesIsOne) {
    const auto dir = scratch("rsa");
    Rng rng(1);
    Matrix m(200, 16);
    for (auto& v : m.data()) {
        v = rng.normal();
    }
    write_npad(dir / "a.npad", m);
    write_npad(dir / "b.npad", m);
    const nlohmann::json cfg{{"tables", {(dir / "a.npad").string(), (dir / "b.npad").string()}},
                             {"permutation_rounds", 50},
                             {"out", (dir / "out").string()}};
    const auto doc = run_command("rsa", cfg);
    EXPECT_NEAR(doc["results"]["scores"][0][1].get<double>(), 1.0, 1e-12);
    EXPECT_TRUE(fs::exists(dir / "out" / "rsa.svg"));
    EXPECT_TRUE(fs::exists(dir / "out" / "rsa.csv"));
    EXPECT_EQ(nlohmann::json::parse(slurp(dir / "out" / "config.json"))["seed"], 0);
}

TEST(Commands, FftIouDefaultKOnPlantedFixtures) {
    const auto dir = scratch("fft");
    write_table(dir / "p1.npad", planted63(1, 1.0));
    write_table(dir / "p2.npad", planted63(2, 3.0));
    write_table(dir / "p3.npad", planted63(3, 0.5));
    const nlohmann::json cfg{
        {"tables", {(dir / "p1.npad").string(), (dir / "p2.npad").string(), (dir / "p3.npad").string()}},
        {"out", (dir / "out").string()}};
    const auto doc = run_command("fft-iou", cfg);
    EXPECT_EQ(doc["config"]["k"], 63);
    EXPECT_EQ(doc["results"]["k"], 63);
    for (const auto& row : doc["results"]["iou"]) {
        for (const auto& v : row) {
            EXPECT_EQ(v, 1.0);
        }
    }
    EXPECT_EQ(doc["results"]["optimal_k"], 63);
}

TEST(Commands, RerunIsByteIdentical) {
    const auto dir = scratch("rerun");
    // Row 0 of a noiseless planted table is all zeros, which cosine RSA rejects.
    write_table(dir / "p1.npad", planted63(1, 1.0, 0.1));
    write_table(dir / "p2.npad", fixtures::planted_table(1000, 64, {{5, 1.0}, {9, 0.5}}, 9, 0.1));
    const nlohmann::json cfg{{"tables", {(dir / "p1.npad").string(), (dir / "p2.npad").string()}},
                             {"permutation_rounds", 20},
                             {"seed", 4},
                             {"out", (dir / "out").string()}};
    run_command("rsa", cfg);
    const auto first = slurp(dir / "out" / "results.json");
    run_command("rsa", cfg, 3);
    EXPECT_EQ(slurp(dir / "out" / "results.json"), first);
}

TEST(Commands, SchemaAndInputErrors) {
    const auto dir = scratch("errors");
    EXPECT_THROW(run_command("rsa", {{"tables", {"/nonexistent/x.npad"}}, {"out", dir.string()}}), StoreError);
    EXPECT_THROW(run_command("rsa", {{"tables", "x"}, {"out", dir.string()}}), ConfigError);
    EXPECT_THROW(run_command("rsa", {{"tables", nlohmann::json::array()}}), ConfigError);
    EXPECT_THROW(run_command("nope", nlohmann::json::object()), ConfigError);
    EXPECT_THROW(run_command("rsa", {{"command", "fft-iou"}, {"out", dir.string()}}), ConfigError);
}

TEST(Commands, ToyPipelineSmoke) {
    const auto dir = scratch("toy");
    const nlohmann::json train{{"out", (dir / "train").string()},
                               {"model", {{"d_model", 16}, {"n_heads", 2}, {"d_ff", 32}}},
                               {"train", {{"steps", 20}, {"eval_size", 50}, {"log_every", 10}}}};
    const auto t = run_command("train-toy", train);
    EXPECT_EQ(t["results"]["steps"], 20);
    const auto model = (dir / "train" / "model").string();
    run_command("dump-toy", {{"model", model}, {"target", "operand1"}, {"n_prompts", 400}, {"out", (dir / "dump").string()}});
    EXPECT_TRUE(check_dump(dir / "dump").empty());
    const nlohmann::json probe{{"dump", (dir / "dump").string()},
                               {"kind", "linear"},
                               {"holdout_val", 20},
                               {"holdout_test", 20},
                               {"train", {{"max_epochs", 2}}},
                               {"out", (dir / "probe").string()}};
    const auto p = run_command("probe-train", probe);
    EXPECT_EQ(p["results"]["layers"].size(), 4u);
    auto cl = probe;
    cl["out"] = (dir / "cl").string();
    const auto c = run_command("probe-cross-layer", cl);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(c["results"]["accuracy"][i][i], p["results"]["layers"][i]["test_accuracy"]);
    }
    const auto a = run_command("ablate", {{"model", model}, {"n_prompts", 50}, {"out", (dir / "ab").string()}});
    EXPECT_EQ(a["results"]["ablations"].size(), 2u);
    // Dumping twice into the same directory replaces rather than appends.
    run_command("dump-toy", {{"model", model}, {"target", "operand1"}, {"n_prompts", 400}, {"out", (dir / "dump").string()}});
    EXPECT_EQ(load_manifest(dir / "dump").entries.size(), 4u);
}
