#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Cli : public ::testing::Test {
protected:
    fs::path dir;

    void SetUp() override {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        dir = fs::path(::testing::TempDir()) / (std::string("cbpo_cli_") + info->name());
        fs::remove_all(dir);
        fs::create_directories(dir);
    }

    fs::path write_config(const std::string& name, const json& j) const {
        const fs::path p = dir / name;
        std::ofstream(p) << j.dump(2);
        return p;
    }

    int cli(const std::string& args) const {
        const std::string cmd = std::string(CBPO_CLI_PATH) + " " + args + " > " + (dir / "stdout.txt").string() +
                                " 2> " + (dir / "stderr.txt").string();
        const int st = std::system(cmd.c_str());
        return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    }

    std::string path(const std::string& rel) const { return (dir / rel).string(); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::size_t line_count(const fs::path& p) {
    const std::string s = slurp(p);
    return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

json population(double lambda, int samples = 60) {
    return {{"n_users", 4}, {"vocab_size", 32}, {"overlap_lambda", lambda}, {"samples_per_user", samples}, {"seed", 3}};
}

json gen_config(double lambda, int samples = 60) { return {{"schema_version", 1}, {"population", population(lambda, samples)}}; }

json train_config(const std::string& corpus, const std::string& method, json alpha) {
    return {{"schema_version", 1},
            {"corpus", corpus},
            {"dataset", {{"target_user", "u000"}, {"ratio_x", 1.0}}},
            {"train", {{"method", method}, {"alpha", alpha}, {"epochs", 2}, {"batch_size_pos", 6}}}};
}

}  // namespace

TEST_F(Cli, GenerateWritesOneLinePerSample) {
    const auto cfg = write_config("gen.json", gen_config(0.5));
    ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + path("corpus")), 0) << slurp(dir / "stderr.txt");
    EXPECT_EQ(line_count(dir / "corpus" / "corpus.jsonl"), 4u * 60u);
    EXPECT_TRUE(fs::exists(dir / "corpus" / "population.json"));
}

TEST_F(Cli, ConfigOutUsedWhenFlagAbsent) {
    auto j = gen_config(0.5);
    j["out"] = path("from_config");
    const auto cfg = write_config("gen.json", j);
    ASSERT_EQ(cli("generate --config " + cfg.string()), 0) << slurp(dir / "stderr.txt");
    EXPECT_TRUE(fs::exists(dir / "from_config" / "corpus.jsonl"));
    ASSERT_EQ(cli("generate --config " + cfg.string() + " --out " + path("from_flag")), 0);
    EXPECT_TRUE(fs::exists(dir / "from_flag" / "corpus.jsonl"));
    EXPECT_EQ(slurp(dir / "from_flag" / "corpus.jsonl"), slurp(dir / "from_config" / "corpus.jsonl"));
}

TEST_F(Cli, ValidationErrorsExitTwo) {
    EXPECT_EQ(cli("generate --config " + write_config("a.json", gen_config(1.5)).string() + " --out " + path("o")), 2);
    auto unknown = gen_config(0.5);
    unknown["colour"] = "red";
    EXPECT_EQ(cli("generate --config " + write_config("b.json", unknown).string() + " --out " + path("o")), 2);
    auto nested = gen_config(0.5);
    nested["population"]["colour"] = "red";
    EXPECT_EQ(cli("generate --config " + write_config("c.json", nested).string() + " --out " + path("o")), 2);
    auto versionless = gen_config(0.5);
    versionless.erase("schema_version");
    EXPECT_EQ(cli("generate --config " + write_config("d.json", versionless).string() + " --out " + path("o")), 2);
    EXPECT_EQ(cli("generate --config " + path("missing.json") + " --out " + path("o")), 2);
    EXPECT_EQ(cli("generate --config " + write_config("e.json", gen_config(0.5)).string()), 2);
    EXPECT_EQ(cli("frobnicate"), 2);
    EXPECT_EQ(cli("generate"), 2);
    std::ofstream(dir / "broken.json") << "{ not json";
    EXPECT_EQ(cli("generate --config " + path("broken.json") + " --out " + path("o")), 2);
}

TEST_F(Cli, MissingCorpusAndUnwritableOutExitTwo) {
    const auto t = write_config("t.json", train_config(path("nowhere"), "cbpo", 0.2));
    EXPECT_EQ(cli("train --config " + t.string() + " --out " + path("run")), 2);
    std::ofstream(dir / "blocker") << "file";
    const auto g = write_config("g.json", gen_config(0.5));
    EXPECT_EQ(cli("generate --config " + g.string() + " --out " + path("blocker/sub")), 2);
}

TEST_F(Cli, TrainEvaluatePipelineIsReproducible) {
    const auto g = write_config("g.json", gen_config(0.5));
    ASSERT_EQ(cli("generate --config " + g.string() + " --out " + path("corpus")), 0);
    const auto t = write_config("t.json", train_config(path("corpus"), "cbpo", "estimate"));
    ASSERT_EQ(cli("train --config " + t.string() + " --out " + path("run1")), 0) << slurp(dir / "stderr.txt");
    ASSERT_EQ(cli("train --config " + t.string() + " --out " + path("run2")), 0);
    for (const char* f : {"checkpoint.json", "metrics.csv", "alpha.json"}) {
        ASSERT_TRUE(fs::exists(dir / "run1" / f)) << f;
        EXPECT_EQ(slurp(dir / "run1" / f), slurp(dir / "run2" / f)) << f;
    }
    // 30 target training samples in batches of 6 over 2 epochs.
    EXPECT_EQ(line_count(dir / "run1" / "metrics.csv"), 1u + 5u * 2u);

    const auto e1 = write_config("e1.json", json{{"schema_version", 1}, {"checkpoint", path("run1/checkpoint.json")}});
    const auto e2 = write_config("e2.json", json{{"schema_version", 1}, {"checkpoint", path("run2/checkpoint.json")}});
    ASSERT_EQ(cli("evaluate --config " + e1.string() + " --out " + path("eval1")), 0) << slurp(dir / "stderr.txt");
    ASSERT_EQ(cli("evaluate --config " + e2.string() + " --out " + path("eval2")), 0);
    EXPECT_EQ(slurp(dir / "eval1" / "eval.json"), slurp(dir / "eval2" / "eval.json"));
    const auto rep = json::parse(slurp(dir / "eval1" / "eval.json"));
    EXPECT_TRUE(rep.contains("heldout_nll"));
    EXPECT_TRUE(rep.contains("pref_acc"));
    EXPECT_TRUE(rep.contains("delta_logp_aux"));
}

TEST_F(Cli, FixedAlphaWritesNoEstimate) {
    const auto g = write_config("g.json", gen_config(0.5));
    ASSERT_EQ(cli("generate --config " + g.string() + " --out " + path("corpus")), 0);
    const auto t = write_config("t.json", train_config(path("corpus"), "cbpo", 0.3));
    ASSERT_EQ(cli("train --config " + t.string() + " --out " + path("run")), 0);
    EXPECT_FALSE(fs::exists(dir / "run" / "alpha.json"));
}

TEST_F(Cli, BcoAndZeroAlphaCbpoEvaluateIdentically) {
    const auto g = write_config("g.json", gen_config(0.5));
    ASSERT_EQ(cli("generate --config " + g.string() + " --out " + path("corpus")), 0);
    ASSERT_EQ(cli("train --config " + write_config("b.json", train_config(path("corpus"), "bco", 0.0)).string() +
                  " --out " + path("bco")),
              0);
    ASSERT_EQ(cli("train --config " + write_config("c.json", train_config(path("corpus"), "cbpo", 0.0)).string() +
                  " --out " + path("cbpo")),
              0);
    double nll[2];
    int i = 0;
    for (const char* run : {"bco", "cbpo"}) {
        const auto e = write_config(std::string("e_") + run + ".json",
                                    json{{"schema_version", 1}, {"checkpoint", path(std::string(run) + "/checkpoint.json")}});
        ASSERT_EQ(cli("evaluate --config " + e.string() + " --out " + path(std::string("eval_") + run)), 0);
        nll[i++] = json::parse(slurp(dir / (std::string("eval_") + run) / "eval.json")).at("heldout_nll").get<double>();
    }
    EXPECT_NEAR(nll[0], nll[1], 1e-9);
}

TEST_F(Cli, EvaluateRejectsVocabularyMismatch) {
    ASSERT_EQ(cli("generate --config " + write_config("g.json", gen_config(0.5)).string() + " --out " + path("corpus")), 0);
    ASSERT_EQ(cli("train --config " + write_config("t.json", train_config(path("corpus"), "sft", 0.0)).string() +
                  " --out " + path("run")),
              0);
    auto other = gen_config(0.5);
    other["population"]["vocab_size"] = 40;
    ASSERT_EQ(cli("generate --config " + write_config("g2.json", other).string() + " --out " + path("corpus40")), 0);
    const auto e = write_config(
        "e.json", json{{"schema_version", 1}, {"checkpoint", path("run/checkpoint.json")}, {"corpus", path("corpus40")}});
    EXPECT_EQ(cli("evaluate --config " + e.string() + " --out " + path("eval")), 2);
}

TEST_F(Cli, SymmetricPopulationGivesChancePreference) {
    // Identical user distributions: target and auxiliary held-out rewards are exchangeable.
    ASSERT_EQ(cli("generate --config " + write_config("g.json", gen_config(1.0, 400)).string() + " --out " +
                  path("corpus")),
              0);
    ASSERT_EQ(cli("train --config " + write_config("t.json", train_config(path("corpus"), "bco", 0.0)).string() +
                  " --out " + path("run")),
              0);
    const auto e = write_config("e.json", json{{"schema_version", 1}, {"checkpoint", path("run/checkpoint.json")}});
    ASSERT_EQ(cli("evaluate --config " + e.string() + " --out " + path("eval")), 0);
    const auto rep = json::parse(slurp(dir / "eval" / "eval.json"));
    ASSERT_GE(rep.at("n_tar_heldout").get<std::size_t>() * rep.at("n_aux_heldout").get<std::size_t>(), 2000u);
    EXPECT_NEAR(rep.at("pref_acc").get<double>(), 0.5, 0.05);
}

TEST_F(Cli, EstimateAlphaWritesReport) {
    const auto cfg = write_config("a.json", json{{"schema_version", 1},
                                                 {"population", population(0.5, 200)},
                                                 {"dataset", {{"ratio_x", 1.0}}},
                                                 {"seed", 1}});
    ASSERT_EQ(cli("estimate-alpha --config " + cfg.string() + " --out " + path("alpha")), 0) << slurp(dir / "stderr.txt");
    const auto est = json::parse(slurp(dir / "alpha" / "alpha.json"));
    EXPECT_GE(est.at("alpha_hat").get<double>(), 0.0);
    EXPECT_LE(est.at("alpha_hat").get<double>(), 0.99);
}

TEST_F(Cli, SweepWritesCsvAndSeedOverride) {
    const auto cfg = write_config("s.json", json{{"schema_version", 1},
                                                 {"axis", "alpha"},
                                                 {"values", {0.0, 0.5}},
                                                 {"seeds", {0, 1, 2}},
                                                 {"population", population(0.5, 40)},
                                                 {"train", {{"epochs", 1}, {"batch_size_pos", 5}}}});
    ASSERT_EQ(cli("sweep --config " + cfg.string() + " --out " + path("sweep") + " --workers 2"), 0)
        << slurp(dir / "stderr.txt");
    EXPECT_EQ(line_count(dir / "sweep" / "sweep.csv"), 1u + 6u);
    ASSERT_EQ(cli("sweep --config " + cfg.string() + " --out " + path("sweep1") + " --seed 2"), 0);
    EXPECT_EQ(line_count(dir / "sweep1" / "sweep.csv"), 1u + 2u);
    EXPECT_EQ(cli("sweep --config " + cfg.string() + " --out " + path("sweep2") + " --workers 0"), 2);
}

TEST_F(Cli, VerifyPasses) {
    const auto cfg = write_config("v.json", json{{"schema_version", 1},
                                                 {"gradient_configurations", 10},
                                                 {"pu_replications", 100},
                                                 {"pu_n", 2000},
                                                 {"slope_sizes", {100, 1000, 10000}}});
    EXPECT_EQ(cli("verify --config " + cfg.string() + " --out " + path("verify")), 0) << slurp(dir / "stderr.txt");
    const auto rep = json::parse(slurp(dir / "verify" / "verify.json"));
    EXPECT_TRUE(rep.at("passed").get<bool>());
    EXPECT_NE(slurp(dir / "stdout.txt").find("PASS gradient_cbpo"), std::string::npos);
}
