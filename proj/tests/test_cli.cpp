#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "moeroute_cli_test";

int run(const std::string& args, const std::string& env = "") {
    const std::string cmd = "cd " + kWork.string() + " && " + env + " " + MOEROUTE_CLI_PATH + " " + args +
                            " >stdout.txt 2>stderr.txt";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

class Cli : public ::testing::Test {
protected:
    void SetUp() override {
        fs::remove_all(kWork);
        fs::create_directories(kWork);
    }
};

}  // namespace

TEST_F(Cli, UsageErrorsExitTwo) {
    EXPECT_EQ(run("frobnicate"), 2);
    EXPECT_EQ(run("eval --no-such-flag"), 2);
    EXPECT_EQ(run("eval --granularity word"), 2);
    EXPECT_EQ(run(""), 2);
}

TEST_F(Cli, InvalidConfigExitsTwoWithRecord) {
    EXPECT_EQ(run("eval --lambda2 -1"), 2);
    const auto err = nlohmann::json::parse(slurp(kWork / "stderr.txt"));
    EXPECT_EQ(err["error"], "config");
    EXPECT_NE(err["message"].get<std::string>().find("lambda2"), std::string::npos);
    EXPECT_EQ(run("gen-data --jsonl x.jsonl --synthetic-n 50"), 2);
}

TEST_F(Cli, RuntimeFailureExitsOneWithRecord) {
    EXPECT_EQ(run("gen-data --jsonl missing.jsonl --out o"), 1);
    const auto err = nlohmann::json::parse(slurp(kWork / "stderr.txt"));
    EXPECT_EQ(err["error"], "runtime");
}

TEST_F(Cli, GenDataWritesConfigManifestAndSummary) {
    ASSERT_EQ(run("gen-data --synthetic-n 40 --long-frac 0.5 --out o", "MOEROUTE_SEED=5"), 0);
    const auto cfg = nlohmann::json::parse(slurp(kWork / "o" / "gen-data.config.json"));
    EXPECT_EQ(cfg["seed"], 5);
    const auto summary = nlohmann::json::parse(slurp(kWork / "o" / "gen-data.json"));
    EXPECT_EQ(summary["metrics"]["total"], 40);
    EXPECT_TRUE(fs::exists(kWork / "o" / "manifest.json"));
    EXPECT_NE(slurp(kWork / "stdout.txt").find("gen-data:"), std::string::npos);
    // an explicit flag beats the environment
    ASSERT_EQ(run("gen-data --synthetic-n 40 --seed 9 --out p", "MOEROUTE_SEED=5"), 0);
    EXPECT_EQ(nlohmann::json::parse(slurp(kWork / "p" / "gen-data.config.json"))["seed"], 9);
}

TEST_F(Cli, ConfigFileIsOverriddenByFlags) {
    {
        std::ofstream os(kWork / "c.json");
        os << R"({"synthetic_n": 30, "seed": 3, "lambda1": 0.25})";
    }
    ASSERT_EQ(run("gen-data --config c.json --seed 4 --out o"), 0);
    const auto cfg = nlohmann::json::parse(slurp(kWork / "o" / "gen-data.config.json"));
    EXPECT_EQ(cfg["seed"], 4);
    EXPECT_EQ(cfg["synthetic_n"], 30);
    EXPECT_DOUBLE_EQ(cfg["lambda1"].get<double>(), 0.25);
    {
        std::ofstream os(kWork / "bad.json");
        os << R"({"synthetic": 30})";
    }
    EXPECT_EQ(run("gen-data --config bad.json"), 2);
}
