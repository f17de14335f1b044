#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "test_support.hpp"

using namespace moda;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
	const fs::path p = fs::temp_directory_path() / ("moda-cli-" + name);
	fs::remove_all(p);
	fs::create_directories(p);
	return p;
}

std::string slurp(const fs::path& p) {
	std::ifstream in(p);
	std::stringstream ss;
	ss << in.rdbuf();
	return ss.str();
}

/// Runs the CLI with the given arguments and returns its exit status.
int run_cli(const std::string& args, const std::string& env = "") {
	const std::string cmd = env + (env.empty() ? "" : " ") + "\"" MODA_CLI "\" " + args + " >/dev/null 2>&1";
	const int status = std::system(cmd.c_str());
	return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kQuick = "--set train.epochs=5 --set data.per_class=60 ";

} // namespace

TEST(Config, DefaultsRoundTripThroughResolvedText) {
	ExperimentConfig a;
	a.tau = 0.75;
	a.layers = parse_layers("dense:16,dense:8");
	a.replace.plan.strong_classes = {0, 3};
	ExperimentConfig b;
	parse_config(b, resolved_config(a));
	EXPECT_EQ(resolved_config(a), resolved_config(b));
	EXPECT_EQ(get_config_value(b, "decompose.tau"), "0.75");
	EXPECT_EQ(get_config_value(b, "model.layers"), "dense:16,dense:8");
}

TEST(Config, CommentsBlankLinesAndLaterLinesWin) {
	ExperimentConfig c;
	parse_config(c, "# header\n\nloss.gamma = 0.1  # inline\nloss.gamma=0.2\n  train.epochs = 7\n");
	EXPECT_EQ(c.train.weights.gamma, 0.2);
	EXPECT_EQ(c.train.epochs, 7u);
}

TEST(Config, ErrorsNameTheLine) {
	ExperimentConfig c;
	try {
		parse_config(c, "train.epochs = 3\nno.such = 1\n");
		FAIL() << "expected ConfigError";
	} catch (const ConfigError& e) {
		EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
	}
	EXPECT_THROW(parse_config(c, "train.epochs = many\n"), ConfigError);
	EXPECT_THROW(parse_config(c, "train.epochs\n"), ConfigError);
	EXPECT_THROW(apply_override(c, "loss.alpha"), ConfigError);
}

TEST(Config, LayerListsParseAndRejectGarbage) {
	const LayerList l = parse_layers("conv3x3:8,maxpool2x2,flatten,dense:64");
	ASSERT_EQ(l.size(), 4u);
	EXPECT_EQ(l[0], (LayerSpec{LayerKind::Conv3x3, 8}));
	EXPECT_EQ(l[1], (LayerSpec{LayerKind::MaxPool2x2, 0}));
	EXPECT_EQ(format_layers(l), "conv3x3:8,maxpool2x2,flatten,dense:64");
	EXPECT_ANY_THROW(parse_layers("dense"));
	EXPECT_ANY_THROW(parse_layers("dense:x"));
	EXPECT_ANY_THROW(parse_layers("lstm:4"));
}

TEST(Config, SeedSetsEverySeedKey) {
	ExperimentConfig c;
	apply_seed(c, 42);
	for (const char* k : {"model.seed", "data.seed", "train.seed", "sweep.seed", "replace.plan_seed",
			     "replace.strong_seed", "replace.weak_seed", "replace.adapt_seed", "gradcheck.seed"})
		EXPECT_EQ(get_config_value(c, k), "42") << k;
	EXPECT_EQ(c.tau, 0.9);
}

TEST(Subtasks, FourClassesGiveSixPairsAndFourTriples) {
	const auto s = enumerate_subtasks(4, 2, 3, 100, 0);
	ASSERT_EQ(s.size(), 10u);
	EXPECT_EQ(s.front(), (IndexList{0, 1}));
	EXPECT_EQ(s[5], (IndexList{2, 3}));
	EXPECT_EQ(s[6], (IndexList{0, 1, 2}));
	EXPECT_EQ(s.back(), (IndexList{1, 2, 3}));
	EXPECT_EQ(binomial(10, 5), 252u);
}

TEST(Subtasks, CapDrawsDistinctSeededSubsets) {
	const auto a = enumerate_subtasks(10, 4, 5, 30, 7);
	EXPECT_EQ(a.size(), 60u);
	EXPECT_EQ(std::set<IndexList>(a.begin(), a.end()).size(), 60u);
	EXPECT_EQ(enumerate_subtasks(10, 4, 5, 30, 7), a);
	EXPECT_NE(enumerate_subtasks(10, 4, 5, 30, 8), a);
	EXPECT_THROW(enumerate_subtasks(4, 3, 2, 10, 0), std::invalid_argument);
	EXPECT_THROW(enumerate_subtasks(4, 2, 5, 10, 0), std::invalid_argument);
}

TEST(Subtasks, CsvMeanRowIsColumnMean) {
	const auto& f = moda::test::blobs_fixture();
	const auto rows = run_sweep(f.modules, f.model, f.data.test, enumerate_subtasks(4, 2, 3, 100, 0));
	std::ostringstream os;
	write_sweep_csv(os, rows);
	std::istringstream in(os.str());
	std::string line;
	std::getline(in, line);
	auto cells = [](const std::string& l) {
		std::vector<std::string> out;
		for (auto v : text::split(l, ','))
			out.emplace_back(v);
		return out;
	};
	const auto header = cells(line);
	std::vector<std::vector<std::string>> body;
	while (std::getline(in, line))
		body.push_back(cells(line));
	ASSERT_EQ(body.size(), 11u);
	const auto& mean = body.back();
	EXPECT_EQ(mean[0], "mean");
	for (std::size_t col = 0; col < header.size(); ++col) {
		if (mean[col].empty() || col == 0)
			continue;
		double s = 0.0;
		for (std::size_t r = 0; r + 1 < body.size(); ++r)
			s += std::stod(body[r][col]);
		EXPECT_NEAR(std::stod(mean[col]), s / 10.0, 1e-12) << header[col];
	}
}

TEST(Cli, UsageErrorsExitTwo) {
	const fs::path dir = temp_dir("usage");
	EXPECT_EQ(run_cli(""), 2);
	EXPECT_EQ(run_cli("frobnicate"), 2);
	EXPECT_EQ(run_cli("train -o " + dir.string() + " --set no.such=1"), 2);
	EXPECT_EQ(run_cli("train -o " + dir.string() + " --set data.source=idx"), 2);
	EXPECT_EQ(run_cli("train -o " + dir.string() +
			" --set data.source=idx --set data.train_images=/nonexistent --set data.train_labels=/x"
			" --set data.test_images=/x --set data.test_labels=/x"),
			2);
	EXPECT_EQ(run_cli("eval -o " + dir.string() + " --checkpoint /nonexistent.moda"), 2);
	EXPECT_EQ(run_cli("train -c /nonexistent.cfg -o " + dir.string()), 2);
	EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, OverridesReachResolvedConfig) {
	const fs::path dir = temp_dir("resolved");
	std::ofstream(dir / "exp.cfg") << "loss.gamma = 0.5\ntrain.epochs = 4\ndata.per_class = 60\n";
	ASSERT_EQ(run_cli("train -c " + (dir / "exp.cfg").string() + " --set loss.gamma=0 -o " + (dir / "out").string(),
			"MODA_SEED=5"),
			0);
	ExperimentConfig c;
	parse_config(c, slurp(dir / "out" / "resolved.cfg"));
	EXPECT_EQ(c.train.weights.gamma, 0.0);
	EXPECT_EQ(c.train.epochs, 4u);
	EXPECT_EQ(c.train.seed, 5u);
	EXPECT_EQ(c.data.blobs.seed, 5u);
	EXPECT_TRUE(fs::exists(dir / "out" / "model.moda"));
	EXPECT_TRUE(fs::exists(dir / "out" / "train_log.csv"));
}

TEST(Cli, RepeatedTrainingGivesIdenticalDigests) {
	const fs::path dir = temp_dir("repeat");
	for (const char* run : {"a", "b"})
		ASSERT_EQ(run_cli(std::string("train ") + kQuick + "-o " + (dir / run).string()), 0);
	const auto a = nlohmann::json::parse(slurp(dir / "a" / "train.json"));
	const auto b = nlohmann::json::parse(slurp(dir / "b" / "train.json"));
	EXPECT_EQ(a.at("digest"), b.at("digest"));
	EXPECT_EQ(slurp(dir / "a" / "model.moda"), slurp(dir / "b" / "model.moda"));
}

TEST(Cli, DecomposeComposeSweepPipeline) {
	const fs::path dir = temp_dir("pipeline");
	const std::string ck = (dir / "train" / "model.moda").string();
	ASSERT_EQ(run_cli(std::string("train ") + kQuick + "-o " + (dir / "train").string()), 0);
	ASSERT_EQ(run_cli(std::string("decompose ") + kQuick + "--checkpoint " + ck + " --tau-sweep 0.5,0.9 -o " +
			(dir / "dec").string()),
			0);
	for (int c = 0; c < 4; ++c)
		EXPECT_TRUE(fs::exists(dir / "dec" / ("module_" + std::to_string(c) + ".moda")));
	EXPECT_TRUE(fs::exists(dir / "dec" / "tau_sweep.csv"));
	EXPECT_EQ(run_cli(std::string("compose ") + kQuick + "--checkpoint " + ck + " --modules-dir " +
			(dir / "dec").string() + " --classes 0,2 -o " + (dir / "comp").string()),
			0);
	const auto j = nlohmann::json::parse(slurp(dir / "comp" / "compose.json"));
	EXPECT_EQ(j.at("reuse_accuracy"), j.at("oracle_accuracy"));
	EXPECT_EQ(run_cli(std::string("compose ") + kQuick + "--checkpoint " + ck + " --modules-dir " +
			(dir / "dec").string() + " --classes 1,1 -o " + (dir / "dup").string()),
			2);
	EXPECT_EQ(run_cli(std::string("sweep ") + kQuick + "--checkpoint " + ck + " --modules-dir " +
			(dir / "dec").string() + " -o " + (dir / "sweep").string()),
			0);
	EXPECT_TRUE(fs::exists(dir / "sweep" / "sweep.csv"));
}

TEST(Cli, GradcheckPassesAndDetectsPerturbation) {
	const fs::path dir = temp_dir("gradcheck");
	EXPECT_EQ(run_cli("gradcheck --instances 3 -o " + (dir / "ok").string()), 0);
	EXPECT_NE(slurp(dir / "ok" / "gradcheck.txt").find("all ops PASS"), std::string::npos);
	EXPECT_EQ(run_cli("gradcheck --instances 3 --perturb matmul -o " + (dir / "bad").string()), 1);
	EXPECT_EQ(run_cli("gradcheck --perturb nosuchop -o " + (dir / "bad2").string()), 2);
}
