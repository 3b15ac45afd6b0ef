#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include "doctest.h"
#include "pyrafeat/config.hpp"

using namespace pyrafeat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
    std::string err;
};

fs::path workdir(const std::string& name) {
    const fs::path dir = fs::current_path() / "scratch" / "cli" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

// Runs the CLI inside `dir`, so that stray writes would show up there.
Outcome cli(const fs::path& dir, const std::string& args) {
    const fs::path o = dir.parent_path() / (dir.filename().string() + ".stdout");
    const fs::path e = dir.parent_path() / (dir.filename().string() + ".stderr");
    const std::string cmd = "cd '" + dir.string() + "' && '" PYRAFEAT_CLI "' " + args + " >'" + o.string() +
                            "' 2>'" + e.string() + "'";
    const int status = std::system(cmd.c_str());
    Outcome r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text(o);
    r.err = read_text(e);
    return r;
}

std::set<std::string> entries(const fs::path& dir) {
    std::set<std::string> s;
    for (const auto& e : fs::directory_iterator(dir)) s.insert(e.path().filename().string());
    return s;
}

// A small but complete run: 4 images of 56 px, 6 channels, two levels.
nlohmann::json small_config() {
    return {{"data", {{"images", 4}, {"size", 56}, {"classes", 3}}},
            {"backbone", {{"patch", 14}, {"channels", 6}}},
            {"pyramid", {{"levels", 2}, {"window", 5}, {"proj_dim", 8}}},
            {"train", {{"steps", 3}, {"batch", 2}, {"lr", 0.01}, {"supervision", {1, 2}}}},
            {"eval", {{"train_images", 6}, {"test_images", 3}, {"seeds", {4}}, {"probe_steps", 40}, {"head_steps", 40}}}};
}

fs::path write_config(const fs::path& dir, const nlohmann::json& j) {
    const fs::path p = dir / "run_config.json";
    write_json(p, j);
    return p;
}

bool same_params(const Model<float>& a, const Model<float>& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t k = 0; k < pa.size(); ++k)
        if (!(pa[k]->value == pb[k]->value)) return false;
    return true;
}

// Trained checkpoint shared by the upsample, eval and viz cases.
fs::path trained_checkpoint() {
    static const fs::path ck = [] {
        const fs::path dir = workdir("shared");
        write_config(dir, small_config());
        const auto r = cli(dir, "train --config run_config.json --out ck");
        REQUIRE(r.code == 0);
        return dir / "ck";
    }();
    return ck;
}

}  // namespace

TEST_CASE("missing config file exits 2 and names the path") {
    const fs::path dir = workdir("missing");
    const auto r = cli(dir, "train --config does_not_exist.json --out ck");
    CHECK(r.code == 2);
    CHECK(r.err.find("does_not_exist.json") != std::string::npos);
    CHECK(entries(dir).empty());
}

TEST_CASE("config errors exit 2") {
    const fs::path dir = workdir("badconfig");
    auto j = small_config();
    j["train"]["learning_rate"] = 0.1;
    write_config(dir, j);
    auto r = cli(dir, "train --config run_config.json --out ck");
    CHECK(r.code == 2);
    CHECK(r.err.find("train.learning_rate") != std::string::npos);

    write_text(dir / "run_config.json", "{ \"train\": ");
    r = cli(dir, "train --config run_config.json --out ck");
    CHECK(r.code == 2);

    CHECK(cli(dir, "train --out ck --precision f16").code == 2);
    CHECK(cli(dir, "train --out ck --steps 0").code == 2);
    CHECK(cli(dir, "train").code == 2);
    CHECK(cli(dir, "frobnicate").code == 2);
    CHECK(cli(dir, "--help").code == 0);
}

TEST_CASE("one step at lr 0 writes the initial parameters") {
    const fs::path dir = workdir("lr0");
    write_config(dir, small_config());
    const auto r = cli(dir, "train --config run_config.json --out ck --steps 1 --lr 0");
    REQUIRE(r.code == 0);
    const auto cfg = load_run_config(dir / "run_config.json");
    const auto ck = load_checkpoint<float>(dir / "ck");
    CHECK(ck.step == 1);
    CHECK(same_params(ck.model, Model<float>::init(cfg.train.pyramid, cfg.backbone.channels, cfg.train.seed)));
}

TEST_CASE("toy training run writes a checkpoint with its resolved config") {
    const fs::path ck = trained_checkpoint();
    const fs::path dir = ck.parent_path();
    CHECK(fs::exists(ck / "loss.csv"));
    CHECK(fs::exists(ck / "state.json"));
    CHECK(entries(dir) == std::set<std::string>{"ck", "run_config.json"});

    const auto run = read_json(ck / "run.json");
    CHECK(run["command"] == "train");
    const auto replayed = RunConfig::from_json(run["config"]);
    CHECK(replayed.hash() == run["config_hash"].get<std::string>());
    CHECK(replayed.hash() == load_run_config(dir / "run_config.json").hash());

    std::istringstream csv(read_text(ck / "loss.csv"));
    std::string line;
    std::size_t lines = 0;
    while (std::getline(csv, line)) ++lines;
    CHECK(lines == 1 + 3);
}

TEST_CASE("flag overrides are recorded and replay the same run") {
    const fs::path dir = workdir("replay");
    write_config(dir, small_config());
    REQUIRE(cli(dir, "train --config run_config.json --out a --steps 2 --seed 9 --lr 0.02").code == 0);
    const auto run = read_json(dir / "a" / "run.json");
    CHECK(run["config"]["train"]["steps"] == 2);
    CHECK(run["config"]["train"]["seed"] == 9);
    write_json(dir / "replay.json", run["config"]);
    REQUIRE(cli(dir, "train --config replay.json --out b").code == 0);
    CHECK(read_text(dir / "a" / "loss.csv") == read_text(dir / "b" / "loss.csv"));
}

TEST_CASE("upsample shapes, level 0 copy and constant input") {
    const fs::path ck = trained_checkpoint();
    const fs::path dir = workdir("upsample");
    Tensor<float> feat({8, 8, 6});
    for (std::size_t i = 0; i < feat.size(); ++i) feat[i] = std::sin(0.37f * float(i));
    save_npy(feat, dir / "f.npy");
    Tensor<float> flat({8, 8, 6});
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] = 0.25f * float(i % 6) - 0.4f;
    save_npy(flat, dir / "c.npy");
    const auto image = gen_shapes(3, 1, 3, 112).images[0];
    save_image(image, dir / "im.ppm");
    const std::string common = " --image im.ppm --ckpt '" + ck.string() + "'";

    REQUIRE(cli(dir, "upsample --features f.npy --level 2 --out o2.npy" + common).code == 0);
    CHECK(load_npy<float>(dir / "o2.npy").shape() == Shape{32, 32, 6});
    REQUIRE(cli(dir, "upsample --features f.npy --level 1 --out o1.npy" + common).code == 0);
    CHECK(load_npy<float>(dir / "o1.npy").shape() == Shape{16, 16, 6});

    REQUIRE(cli(dir, "upsample --features f.npy --level 0 --out o0.npy" + common).code == 0);
    CHECK(read_text(dir / "o0.npy") == read_text(dir / "f.npy"));

    REQUIRE(cli(dir, "upsample --features c.npy --level 2 --out oc.npy" + common).code == 0);
    const auto oc = load_npy<float>(dir / "oc.npy");
    for (std::size_t i = 0; i < oc.size(); ++i) {
        REQUIRE(std::abs(oc[i] - flat[i % 6]) <= 1e-5f);
    }

    CHECK(cli(dir, "upsample --features f.npy --level 3 --out o3.npy" + common).code == 2);
    Tensor<float> wrong({8, 8, 5});
    save_npy(wrong, dir / "w.npy");
    CHECK(cli(dir, "upsample --features w.npy --level 1 --out ow.npy" + common).code == 2);
    CHECK(!fs::exists(dir / "o3.npy"));
}

TEST_CASE("gradcheck reports every group and follows the exit contract") {
    const fs::path dir = workdir("gradcheck");
    const auto r = cli(dir, "gradcheck");
    CHECK(r.code == 0);
    for (const char* g : {"sigma_dist", "sigma_sim", "theta", "omega", "psi"}) {
        CHECK(r.out.find(std::string(g) + " max_rel_error") != std::string::npos);
    }
    CHECK(r.out.find("PASS") != std::string::npos);
    CHECK(entries(dir).empty());

    const auto strict = cli(dir, "gradcheck --seeds 2 --tolerance 0 --out gc");
    CHECK(strict.code == 3);
    CHECK(read_json(dir / "gc" / "gradcheck.json")["passed"] == false);
    CHECK(cli(dir, "gradcheck --grid 5").code == 2);
}

TEST_CASE("eval with both methods records one row per method and the same seed") {
    const fs::path ck = trained_checkpoint();
    const fs::path dir = workdir("eval");
    const auto r = cli(dir, "eval --mode probe --method bilinear,jbu --seed 4 --ckpt '" + ck.string() + "' --out ev");
    REQUIRE(r.code == 0);
    const auto rows = read_json(dir / "ev" / "results.json");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0]["method"] == "bilinear");
    CHECK(rows[1]["method"] == "jbu");
    CHECK(rows[0]["seed"] == 4);
    CHECK(rows[1]["seed"] == 4);
    for (const auto& row : rows) {
        const double acc = row["pixel_accuracy"];
        CHECK(acc >= 0.0);
        CHECK(acc <= 1.0);
        CHECK(row["config_hash"] == read_json(dir / "ev" / "run.json")["config_hash"]);
    }
    CHECK(entries(dir) == std::set<std::string>{"ev"});

    const auto c = cli(dir, "eval --mode classify --method bilinear --out cl");
    REQUIRE(c.code == 0);
    CHECK(read_json(dir / "cl" / "results.json").size() == RunConfig{}.eval.seeds.size());

    CHECK(cli(dir, "eval --method jbu --out x").code == 2);
    CHECK(cli(dir, "eval --method nearest --out x").code == 2);
    CHECK(cli(dir, "eval --mode segment --out x").code == 2);
}

TEST_CASE("viz writes one image per pyramid level") {
    const fs::path ck = trained_checkpoint();
    const fs::path dir = workdir("viz");
    REQUIRE(cli(dir, "viz --pca --ckpt '" + ck.string() + "' --out v").code == 0);
    for (int l = 0; l <= 2; ++l) {
        const auto img = load_image(dir / "v" / ("pca_level" + std::to_string(l) + ".png"));
        CHECK(img.dim(0) == 4u << l);
        for (std::size_t i = 0; i < img.size(); ++i) REQUIRE((img[i] >= 0.0f && img[i] <= 1.0f));
    }
    CHECK(!fs::exists(dir / "v" / "pca_level3.png"));
    const auto pca = read_json(dir / "v" / "pca.json");
    CHECK(pca["rank"] == 3);
    REQUIRE(cli(dir, "viz --pca --ckpt '" + ck.string() + "' --out p --format ppm").code == 0);
    CHECK(fs::exists(dir / "p" / "pca_level2.ppm"));
    CHECK(entries(dir) == std::set<std::string>{"p", "v"});
    CHECK(cli(dir, "viz --ckpt '" + ck.string() + "' --out q").code == 2);
}

TEST_CASE("ablate writes the report and timings") {
    const fs::path dir = workdir("ablate");
    auto j = small_config();
    j["eval"]["test_images"] = 2;
    write_config(dir, j);
    const auto r = cli(dir, "ablate --config run_config.json --levels 1,2 --hs on,off --seeds 0 --steps 2 --out ab");
    REQUIRE(r.code == 0);
    const std::string csv = read_text(dir / "ab" / "ablation.csv");
    std::istringstream in(csv);
    std::string line;
    std::getline(in, line);
    CHECK(line == "levels,hs,seed,supervision,level,supervised,recon_mse,probe_accuracy,final_loss,tape_mib");
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 1 + 1 + 2 + 2);
    CHECK(fs::exists(dir / "ab" / "timing.csv"));
    CHECK(cli(dir, "ablate --levels 4 --out bad").code == 2);
    CHECK(cli(dir, "ablate --hs maybe --out bad").code == 2);
}
