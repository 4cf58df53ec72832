#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "capslab/config.hpp"

using namespace capslab;
using nlohmann::json;

namespace {

json minimal() {
    return json{{"name", "t"}};
}

json with_model(json extra_arch = json::object()) {
    json j = minimal();
    j["model"] = {{"family", "capsnet"}};
    if (!extra_arch.empty()) j["model"]["arch"] = extra_arch;
    return j;
}

}  // namespace

TEST_CASE("config defaults survive a minimal document") {
    const ExperimentConfig c = parse_experiment_config(minimal());
    REQUIRE(c.name == "t");
    REQUIRE(c.seed == 1);
    REQUIRE(c.out_dir == "runs");
    REQUIRE_FALSE(c.has_data);
    REQUIRE_FALSE(c.has_model);
    REQUIRE_FALSE(c.sweep.has_value());
    REQUIRE_FALSE(c.transfer.has_value());
    REQUIRE(c.train.batch_size == 32);
    REQUIRE(c.analysis.perplexity == 10.0);
    REQUIRE(c.analysis.iters == 1000);
    REQUIRE(c.analysis.restarts == 3);
}

TEST_CASE("unknown keys are rejected at every level") {
    auto expect_rejects = [](json j, const std::string& key_name) {
        try {
            parse_experiment_config(j);
            FAIL("expected ConfigError for key " << key_name);
        } catch (const ConfigError& e) {
            REQUIRE_THAT(e.what(), Catch::Matchers::ContainsSubstring(key_name));
        }
    };

    json root = minimal();
    root["trian"] = json::object();
    expect_rejects(root, "trian");

    json data = minimal();
    data["data"] = {{"train", "a"}, {"test", "b"}, {"val", "c"}};
    expect_rejects(data, "val");

    json model = with_model();
    model["model"]["familly"] = "capsnet";
    expect_rejects(model, "familly");

    expect_rejects(with_model({{"cap1_dims", 12}}), "cap1_dims");
    expect_rejects(with_model({{"r1", {{"nem", 4}}}}), "nem");

    json train = minimal();
    train["train"] = {{"bacth_size", 8}};
    expect_rejects(train, "bacth_size");

    json adam = minimal();
    adam["train"] = {{"adam", {{"learning_rate", 0.01}}}};
    expect_rejects(adam, "learning_rate");

    json sweep = minimal();
    sweep["sweep"] = {{"n_em", {1}}, {"eta", {0.5}}, {"repeats", 3}};
    expect_rejects(sweep, "repeats");

    json transfer = minimal();
    transfer["transfer"] = {{"scheme", "B"}, {"pretrain", "x"}};
    expect_rejects(transfer, "pretrain");

    json analysis = minimal();
    analysis["analysis"] = {{"perplexity", 5}, {"seed", 1}};
    expect_rejects(analysis, "seed");
}

TEST_CASE("config name is required and token-shaped") {
    REQUIRE_THROWS_AS(parse_experiment_config(json::object()), ConfigError);
    REQUIRE_THROWS_AS(parse_experiment_config(json{{"name", ""}}), ConfigError);
    REQUIRE_THROWS_AS(parse_experiment_config(json{{"name", "has space"}}), ConfigError);
    REQUIRE_THROWS_AS(parse_experiment_config(json{{"name", "dot.dot"}}), ConfigError);
    REQUIRE_NOTHROW(parse_experiment_config(json{{"name", "ok-42_x"}}));
}

TEST_CASE("data section needs both directories") {
    json j = minimal();
    j["data"] = {{"train", "a"}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["data"] = {{"train", "a"}, {"test", "b"}};
    const ExperimentConfig c = parse_experiment_config(j);
    REQUIRE(c.has_data);
    REQUIRE(c.train_dir == "a");
    REQUIRE(c.test_dir == "b");
}

TEST_CASE("model family is validated") {
    json j = minimal();
    j["model"] = {{"family", "resnet"}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["model"]["family"] = "cnn";
    REQUIRE(parse_experiment_config(j).family == ModelFamily::cnn);
}

TEST_CASE("arch overrides are partial and nested") {
    const ExperimentConfig c =
        parse_experiment_config(with_model({{"r1", {{"n_em", 9}, {"eta", 0.1}}},
                                            {"conv", {{"out_channels", 16}}},
                                            {"cap1_dim", 8}}));
    REQUIRE(c.arch.r1.n_em == 9);
    REQUIRE(c.arch.r1.eta == 0.1);
    REQUIRE(c.arch.r2.n_em == 3);   // untouched sites keep their defaults
    REQUIRE(c.arch.r2.eta == 1.0);
    REQUIRE(c.arch.conv.out_channels == 16);
    REQUIRE(c.arch.conv.kernel == 9);
    REQUIRE(c.arch.cap1_dim == 8);
    REQUIRE(c.arch.cap1_count == 16);
    REQUIRE(c.arch.input_edge == 36);
}

TEST_CASE("arch overrides still have to form a valid task model") {
    // 10-way duplex classification is the task; a 3-class head cannot serve it
    REQUIRE_THROWS_AS(parse_experiment_config(with_model({{"class_count", 3}})), ConfigError);
    // structurally broken: primary channels not divisible by the capsule dim
    REQUIRE_THROWS_AS(parse_experiment_config(with_model({{"primary_dim", 7}})), ConfigError);
}

TEST_CASE("train section overrides map onto TrainConfig and mirror the seed") {
    json j = minimal();
    j["seed"] = 77;
    j["train"] = {{"batch_size", 4},
                  {"total_steps", 50},
                  {"eval_every", 10},
                  {"eval_subset", 20},
                  {"adam", {{"lr", 0.01}, {"beta1", 0.8}}}};
    const ExperimentConfig c = parse_experiment_config(j);
    REQUIRE(c.seed == 77);
    REQUIRE(c.train.seed == 77);
    REQUIRE(c.train.batch_size == 4);
    REQUIRE(c.train.total_steps == 50);
    REQUIRE(c.train.eval_every == 10);
    REQUIRE(c.train.eval_subset == 20);
    REQUIRE(c.train.adam.lr == 0.01);
    REQUIRE(c.train.adam.beta1 == 0.8);
    REQUIRE(c.train.adam.beta2 == 0.999);

    j["train"]["total_steps"] = 0;
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
}

TEST_CASE("sweep grid validation") {
    json j = minimal();
    j["sweep"] = {{"n_em", json::array()}, {"eta", {0.5}}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["sweep"] = {{"n_em", {1, 2}}, {"eta", {0.0}}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["sweep"] = {{"n_em", {1, 2}}, {"eta", {1.5}}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["sweep"] = {{"n_em", {1, 2}}, {"eta", {0.5}}, {"trials", 0}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["sweep"] = {{"n_em", {1, 2}}, {"eta", {0.1, 1.0}}};
    const ExperimentConfig c = parse_experiment_config(j);
    REQUIRE(c.sweep.has_value());
    REQUIRE(c.sweep->n_em == std::vector<std::size_t>{1, 2});
    REQUIRE(c.sweep->trials == 3);
}

TEST_CASE("transfer scheme tags are checked") {
    json j = minimal();
    j["transfer"] = {{"scheme", "C3B"}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["transfer"] = {{"scheme", "A1B"}};
    REQUIRE(parse_experiment_config(j).transfer->scheme == "A1B");
}

TEST_CASE("analysis settings must be positive") {
    json j = minimal();
    j["analysis"] = {{"perplexity", 0.0}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["analysis"] = {{"iters", 0}};
    REQUIRE_THROWS_AS(parse_experiment_config(j), ConfigError);
    j["analysis"] = {{"perplexity", 25}, {"iters", 300}, {"restarts", 5}};
    const ExperimentConfig c = parse_experiment_config(j);
    REQUIRE(c.analysis.perplexity == 25.0);
    REQUIRE(c.analysis.iters == 300);
    REQUIRE(c.analysis.restarts == 5);
}

TEST_CASE("config file loading wraps IO and parse failures") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "capslab_cfg_test";
    fs::create_directories(dir);

    REQUIRE_THROWS_AS(load_experiment_config(dir / "absent.json"), ConfigError);

    const fs::path broken = dir / "broken.json";
    std::ofstream(broken) << "{ not json";
    REQUIRE_THROWS_AS(load_experiment_config(broken), ConfigError);

    const fs::path good = dir / "good.json";
    std::ofstream(good) << R"({"name": "file-load", "seed": 9})";
    const ExperimentConfig c = load_experiment_config(good);
    REQUIRE(c.name == "file-load");
    REQUIRE(c.seed == 9);
    fs::remove_all(dir);
}
