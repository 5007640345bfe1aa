#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"

#include "cli/commands.hpp"
#include "cli/png_export.hpp"
#include "dudotrans/tomo/ctar.hpp"
#include "dudotrans/tomo/operators.hpp"
#include "support/tempdir.hpp"

using namespace dudotrans;
using namespace dudotrans::cli;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  Outcome o;
  o.code = run_cli(args, out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream(p, std::ios::binary) << text;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

nlohmann::json tiny_run_config(const std::string& manifest, std::size_t epochs = 2) {
  const nlohmann::json stm = {{"embed_dim", 8}, {"num_heads", 2}, {"window_size", 4}};
  return {{"schema_version", 1},
          {"method", "dudotrans"},
          {"srt", {{"depth", 1}, {"width", 1}, {"patch", 1}, {"stm", stm}}},
          {"rirm", {{"depth", 1}, {"width", 1}, {"patch", 2}, {"stm", stm}}},
          {"train", {{"manifest", manifest}, {"epochs", epochs}, {"seed", 3}, {"checkpoint_interval", 1}}}};
}

/// Five 32x32 phantoms simulated at 24 views: four train items, one test item.
struct Workspace {
  testing::TempDir dir{"cli"};
  Workspace() {
    REQUIRE(run({"phantom", "--count", "5", "--size", "32", "--seed", "2", "--out", (dir / "ph").string()}).code == 0);
    REQUIRE(run({"simulate", "--views", "24", "--seed", "1", "--in", (dir / "ph").string(), "--out",
                 (dir / "data").string()})
                .code == 0);
  }
  fs::path config(const nlohmann::json& j, const std::string& name = "cfg.json") const {
    spit(dir / name, j.dump(2));
    return dir / name;
  }
};

}  // namespace

TEST_SUITE("cli phantom and simulate") {
  TEST_CASE("count one writes exactly the canonical phantom") {
    testing::TempDir dir("ph1");
    REQUIRE(run({"phantom", "--count", "1", "--size", "64", "--out", dir.path().string()}).code == 0);
    std::size_t files = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path())) ++files;
    CHECK(files == 1);
    const auto img = tomo::load_image(dir / "phantom_0000.ctar");
    const auto ref = tomo::rasterize_phantom(tomo::shepp_logan(), tomo::ScanGeometry::desk(64));
    CHECK(img.pixels == tomo::quantize_float32(ref.pixels));
    CHECK(img.geometry == ref.geometry);
  }

  TEST_CASE("same seed gives byte-identical files") {
    testing::TempDir a("pha"), b("phb");
    for (const auto* d : {&a, &b}) {
      REQUIRE(run({"phantom", "--count", "10", "--size", "128", "--seed", "9", "--out", d->path().string()}).code == 0);
    }
    for (std::size_t k = 0; k < 10; ++k) {
      char name[32];
      std::snprintf(name, sizeof name, "phantom_%04zu.ctar", k);
      CHECK(slurp(a / name) == slurp(b / name));
      const auto img = tomo::load_image(a / name);
      CHECK(img.pixels.rows == 128);
      CHECK(img.pixels.cols == 128);
    }
    CHECK(slurp(a / "phantom_0001.ctar") != slurp(a / "phantom_0002.ctar"));
  }

  TEST_CASE("default protocol files") {
    Workspace w;
    const auto m = sim::DatasetManifest::load(w.dir / "data/manifest.json");
    REQUIRE(m.entries.size() == 5);
    CHECK(m.select(sim::Split::test).size() == 1);
    for (const auto& e : m.entries) {
      CHECK(e.alpha_max == 24);
      CHECK(e.noise.photons_i0 == 5e6);
      CHECK(e.noise.gauss_fraction == 0.05);
      CHECK(tomo::load_sinogram(e.noisy_sino).bins.rows == 24);
    }
  }

  TEST_CASE("high dose without gaussian noise is nearly clean") {
    testing::TempDir dir("hd");
    REQUIRE(run({"phantom", "--count", "2", "--size", "32", "--out", (dir / "ph").string()}).code == 0);
    REQUIRE(run({"simulate", "--views", "24", "--photons", "1e12", "--gauss", "0", "--in", (dir / "ph").string(),
                 "--out", (dir / "d").string()})
                .code == 0);
    const auto m = sim::DatasetManifest::load(dir / "d/manifest.json");
    for (const auto& e : m.entries) {
      const auto clean = tomo::load_sinogram(e.clean_sino), noisy = tomo::load_sinogram(e.noisy_sino);
      double worst = 0.0;
      for (std::size_t i = 0; i < clean.bins.size(); ++i) {
        worst = std::max(worst, std::abs(clean.bins.data[i] - noisy.bins.data[i]));
      }
      CHECK(worst < 1e-3);
    }
  }

  TEST_CASE("one view is a schema error with no output") {
    testing::TempDir dir("v1");
    REQUIRE(run({"phantom", "--count", "1", "--size", "32", "--out", (dir / "ph").string()}).code == 0);
    const Outcome o = run({"simulate", "--views", "1", "--in", (dir / "ph").string(), "--out", (dir / "d").string()});
    CHECK(o.code == 2);
    CHECK(o.err.find("schema error") != std::string::npos);
    CHECK_FALSE(fs::exists(dir / "d"));
  }

  TEST_CASE("usage errors exit with 2") {
    CHECK(run({}).code == 2);
    CHECK(run({"phantom", "--count", "1"}).code == 2);
    CHECK(run({"frobnicate"}).code == 2);
    CHECK(run({"--help"}).code == 0);
  }
}

TEST_SUITE("cli train") {
  TEST_CASE("two-epoch run writes a checkpoint that loads back bitwise") {
    Workspace w;
    const auto cfg = w.config(tiny_run_config("data/manifest.json"));
    const Outcome o = run({"train", "--config", cfg.string(), "--out", (w.dir / "run").string()});
    REQUIRE(o.code == 0);
    for (const char* f : {"loss_log.csv", "ckpt_epoch1.ddtc", "ckpt_epoch2.ddtc", "final.ddtc", "run_config.json"}) {
      CHECK(fs::exists(w.dir / "run" / f));
    }
    CHECK(read_csv(w.dir / "run/loss_log.csv").size() == 1 + 2 * 4);
    const std::string bytes = slurp(w.dir / "run/final.ddtc");
    const auto ck = model::load_checkpoint(w.dir / "run/final.ddtc");
    REQUIRE(ck.adam.has_value());
    const auto again = model::encode_checkpoint(ck.model, &*ck.adam);
    CHECK(std::string(again.begin(), again.end()) == bytes);
    CHECK(slurp(w.dir / "run/ckpt_epoch2.ddtc") == bytes);

    // Same weights as training in-process.
    const auto rc = load_run_config(cfg);
    const auto manifest = sim::DatasetManifest::load(rc.train.manifest);
    const auto g = dataset_geometry(manifest, rc);
    const auto m = train_variant(rc, model::Method::dudotrans, g, training_items(manifest, g), {});
    const auto direct = model::encode_checkpoint(m, nullptr);
    const auto stored = model::encode_checkpoint(ck.model, nullptr);
    CHECK(direct == stored);
  }

  TEST_CASE("strict mode twice gives identical logs") {
    Workspace w;
    const auto cfg = w.config(tiny_run_config("data/manifest.json"));
    for (const char* d : {"a", "b"}) {
      REQUIRE(run({"train", "--strict-deterministic", "--config", cfg.string(), "--out", (w.dir / d).string()}).code ==
              0);
    }
    CHECK(slurp(w.dir / "a/loss_log.csv") == slurp(w.dir / "b/loss_log.csv"));
    CHECK(slurp(w.dir / "a/final.ddtc") == slurp(w.dir / "b/final.ddtc"));
  }

  TEST_CASE("missing manifest exits with 2 before writing") {
    Workspace w;
    const auto cfg = w.config(tiny_run_config("nowhere/manifest.json"));
    const Outcome o = run({"train", "--config", cfg.string(), "--out", (w.dir / "run").string()});
    CHECK(o.code == 2);
    CHECK(o.err.find("manifest") != std::string::npos);
    CHECK_FALSE(fs::exists(w.dir / "run"));
  }

  TEST_CASE("invalid configs exit with 2 before writing") {
    Workspace w;
    auto extra = tiny_run_config("data/manifest.json");
    extra["train"]["momentum"] = 0.9;
    auto version = tiny_run_config("data/manifest.json");
    version["schema_version"] = 2;
    auto unversioned = tiny_run_config("data/manifest.json");
    unversioned.erase("schema_version");
    auto wrong_geometry = tiny_run_config("data/manifest.json");
    wrong_geometry["geometry"] = tomo::ScanGeometry::desk(64);
    auto wrong_noise = tiny_run_config("data/manifest.json");
    wrong_noise["noise"] = {{"photons_i0", 1e5}};
    auto fbp = tiny_run_config("data/manifest.json");
    fbp["method"] = "fbp";
    for (const auto& j : {extra, version, unversioned, wrong_geometry, wrong_noise, fbp}) {
      const auto cfg = w.config(j);
      const Outcome o = run({"train", "--config", cfg.string(), "--out", (w.dir / "run").string()});
      CHECK(o.code == 2);
      CHECK_FALSE(fs::exists(w.dir / "run"));
    }
    spit(w.dir / "broken.json", "{ not json");
    CHECK(run({"train", "--config", (w.dir / "broken.json").string(), "--out", (w.dir / "run").string()}).code == 2);
  }

  TEST_CASE("matching geometry and noise sections are accepted") {
    Workspace w;
    auto j = tiny_run_config("data/manifest.json", 1);
    j["geometry"] = tomo::ScanGeometry::desk(32);
    j["noise"] = sim::NoiseConfig{5e6, 0.05, 1};
    const auto cfg = w.config(j);
    CHECK(run({"train", "--config", cfg.string(), "--out", (w.dir / "run").string()}).code == 0);
  }

  TEST_CASE("divergence exits with 3") {
    Workspace w;
    auto j = tiny_run_config("data/manifest.json", 3);
    j["train"]["lr"] = 1e30;
    const auto cfg = w.config(j);
    const Outcome o = run({"train", "--config", cfg.string(), "--out", (w.dir / "run").string()});
    CHECK(o.code == 3);
  }
}

TEST_SUITE("cli reconstruct") {
  TEST_CASE("fbp needs no checkpoint and matches the operator") {
    Workspace w;
    const auto sino_path = w.dir / "data/noisy_0004.ctar";
    const Outcome o = run({"reconstruct", "--method", "fbp", "--sino", sino_path.string(), "--out",
                           (w.dir / "r.ctar").string(), "--png", (w.dir / "r.png").string()});
    REQUIRE(o.code == 0);
    const auto img = tomo::load_image(w.dir / "r.ctar");
    CHECK(img.pixels == tomo::quantize_float32(tomo::fbp(tomo::load_sinogram(sino_path)).pixels));
    const std::string png = slurp(w.dir / "r.png");
    REQUIRE(png.size() > 8);
    CHECK(png.substr(1, 3) == "PNG");
  }

  TEST_CASE("identity-init checkpoint reproduces fbp") {
    Workspace w;
    const auto sino_path = w.dir / "data/noisy_0004.ctar";
    const auto rc = load_run_config(w.config(tiny_run_config("data/manifest.json")));
    const auto geometry = tomo::load_sinogram(sino_path).geometry;
    for (auto method : {model::Method::dudotrans, model::Method::imgtrans}) {
      const auto m = model::DuDoTransModel::create(model_config(rc, method, geometry));
      model::save_checkpoint(w.dir / "init.ddtc", m, nullptr);
      const std::string name = model::to_string(method);
      REQUIRE(run({"reconstruct", "--method", name, "--ckpt", (w.dir / "init.ddtc").string(), "--sino",
                   sino_path.string(), "--out", (w.dir / (name + ".ctar")).string()})
                  .code == 0);
    }
    REQUIRE(run({"reconstruct", "--method", "fbp", "--sino", sino_path.string(), "--out", (w.dir / "fbp.ctar").string()})
                .code == 0);
    CHECK(slurp(w.dir / "dudotrans.ctar") == slurp(w.dir / "fbp.ctar"));
    CHECK(slurp(w.dir / "imgtrans.ctar") == slurp(w.dir / "fbp.ctar"));
  }

  TEST_CASE("bad checkpoints exit with 2 naming the file") {
    Workspace w;
    const auto sino = (w.dir / "data/noisy_0004.ctar").string();
    spit(w.dir / "corrupt.ddtc", "XXXX0000000000000000");
    Outcome o = run({"reconstruct", "--method", "dudotrans", "--ckpt", (w.dir / "corrupt.ddtc").string(), "--sino",
                     sino, "--out", (w.dir / "x.ctar").string()});
    CHECK(o.code == 2);
    CHECK(o.err.find("corrupt.ddtc") != std::string::npos);
    CHECK_FALSE(fs::exists(w.dir / "x.ctar"));

    o = run({"reconstruct", "--method", "dudotrans", "--sino", sino, "--out", (w.dir / "x.ctar").string()});
    CHECK(o.code == 2);

    const auto rc = load_run_config(w.config(tiny_run_config("data/manifest.json")));
    const auto m = model::DuDoTransModel::create(
        model_config(rc, model::Method::imgtrans, tomo::load_sinogram(sino).geometry));
    model::save_checkpoint(w.dir / "img.ddtc", m, nullptr);
    o = run({"reconstruct", "--method", "dudotrans", "--ckpt", (w.dir / "img.ddtc").string(), "--sino", sino, "--out",
             (w.dir / "x.ctar").string()});
    CHECK(o.code == 2);
    CHECK(o.err.find("img.ddtc") != std::string::npos);

    o = run({"reconstruct", "--method", "magic", "--sino", sino, "--out", (w.dir / "x.ctar").string()});
    CHECK(o.code == 2);
  }

  TEST_CASE("display window") {
    CHECK(window_gray(0.0) == 0);
    CHECK(window_gray(-0.3) == 0);
    CHECK(window_gray(0.9) == 255);
    CHECK(window_gray(1.0) == 255);
    CHECK(window_gray(0.45) == 128);
  }
}

TEST_SUITE("cli eval and ablate") {
  TEST_CASE("identical directories score perfectly") {
    Workspace w;
    const auto ph = (w.dir / "ph").string();
    REQUIRE(run({"eval", "--pred", ph, "--gt", ph, "--out", (w.dir / "rep.csv").string()}).code == 0);
    const auto rows = read_csv(w.dir / "rep.csv");
    REQUIRE(rows.size() == 1 + 5 + 1);
    CHECK(rows[0] == std::vector<std::string>{"file", "psnr", "ms_ssim", "ssim_levels_used", "rmse"});
    for (std::size_t r = 1; r < rows.size(); ++r) {
      CHECK(std::stod(rows[r][1]) == 99.0);
      CHECK(std::stod(rows[r][2]) == 1.0);
    }
    CHECK(rows.back()[0] == "mean");
  }

  TEST_CASE("mean row is the arithmetic mean") {
    Workspace w;
    fs::create_directories(w.dir / "rec");
    for (std::size_t k = 0; k < 5; ++k) {
      char name[32];
      std::snprintf(name, sizeof name, "%04zu.ctar", k);
      REQUIRE(run({"reconstruct", "--method", "fbp", "--sino", (w.dir / ("data/noisy_" + std::string(name))).string(),
                   "--out", (w.dir / ("rec/phantom_" + std::string(name))).string()})
                  .code == 0);
    }
    REQUIRE(run({"eval", "--pred", (w.dir / "rec").string(), "--gt", (w.dir / "ph").string(), "--out",
                 (w.dir / "rep.csv").string()})
                .code == 0);
    const auto rows = read_csv(w.dir / "rep.csv");
    REQUIRE(rows.size() == 7);
    for (std::size_t col : {1u, 2u, 4u}) {
      double sum = 0.0;
      for (std::size_t r = 1; r <= 5; ++r) sum += std::stod(rows[r][col]);
      CHECK(std::abs(std::stod(rows[6][col]) - sum / 5) < 1e-9);
    }
  }

  TEST_CASE("mismatched sets exit with 2 listing the missing names") {
    Workspace w;
    fs::create_directories(w.dir / "pred");
    fs::copy_file(w.dir / "ph/phantom_0000.ctar", w.dir / "pred/phantom_0000.ctar");
    fs::copy_file(w.dir / "ph/phantom_0000.ctar", w.dir / "pred/extra.ctar");
    const Outcome o = run({"eval", "--pred", (w.dir / "pred").string(), "--gt", (w.dir / "ph").string(), "--out",
                           (w.dir / "rep.csv").string()});
    CHECK(o.code == 2);
    for (const char* n : {"phantom_0001.ctar", "phantom_0004.ctar", "extra.ctar"}) {
      CHECK(o.err.find(n) != std::string::npos);
    }
    CHECK_FALSE(fs::exists(w.dir / "rep.csv"));
  }

  TEST_CASE("fbp-only ablation does not train") {
    testing::TempDir dir("abl");
    REQUIRE(run({"phantom", "--count", "2", "--size", "32", "--out", (dir / "ph").string()}).code == 0);
    // Every item in the test split: any training attempt would fail.
    REQUIRE(run({"simulate", "--views", "24", "--test-fraction", "1", "--in", (dir / "ph").string(), "--out",
                 (dir / "d").string()})
                .code == 0);
    spit(dir / "cfg.json", tiny_run_config("d/manifest.json").dump());
    const auto cfg = (dir / "cfg.json").string();
    REQUIRE(run({"ablate", "--config", cfg, "--variants", "fbp", "--out", (dir / "t.csv").string()}).code == 0);
    const auto rows = read_csv(dir / "t.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == std::vector<std::string>{"variant", "psnr", "ms_ssim", "rmse", "param_count"});
    CHECK(rows[1][0] == "fbp");
    CHECK(rows[1][4] == "0");
    CHECK(run({"ablate", "--config", cfg, "--variants", "fbp,dudotrans", "--out", (dir / "u.csv").string()}).code == 2);
  }

  TEST_CASE("one row per variant and the sinogram branch adds parameters") {
    Workspace w;
    const auto cfg = w.config(tiny_run_config("data/manifest.json", 1));
    REQUIRE(run({"ablate", "--config", cfg.string(), "--variants", "fbp,imgtrans,dudotrans", "--out",
                 (w.dir / "t.csv").string()})
                .code == 0);
    const auto rows = read_csv(w.dir / "t.csv");
    REQUIRE(rows.size() == 4);
    CHECK(rows[1][0] == "fbp");
    CHECK(rows[2][0] == "imgtrans");
    CHECK(rows[3][0] == "dudotrans");
    CHECK(std::stoul(rows[3][4]) > std::stoul(rows[2][4]));
    CHECK(run({"ablate", "--config", cfg.string(), "--variants", "fbp,fbp", "--out", (w.dir / "v.csv").string()})
              .code == 2);
    CHECK(run({"ablate", "--config", cfg.string(), "--variants", "cnn", "--out", (w.dir / "v.csv").string()}).code ==
          2);
  }
}

TEST_SUITE("run config schema") {
  nlohmann::json schema() {
    std::ifstream in(fs::path(DUDOTRANS_SOURCE_DIR) / "config/run_config.schema.json");
    return nlohmann::json::parse(in);
  }

  std::set<std::string> keys_of(const nlohmann::json& j) {
    std::set<std::string> out;
    for (const auto& item : j.items()) out.insert(item.key());
    return out;
  }

  TEST_CASE("schema lists exactly the keys the loader knows") {
    const auto s = schema();
    RunConfig full;
    full.geometry = tomo::ScanGeometry{};
    full.noise = sim::NoiseConfig{};
    const nlohmann::json j = full;
    CHECK(keys_of(s["properties"]) == keys_of(j));
    CHECK(keys_of(s["$defs"]["geometry"]["properties"]) == keys_of(j["geometry"]));
    CHECK(keys_of(s["$defs"]["noise"]["properties"]) == keys_of(j["noise"]));
    CHECK(keys_of(s["$defs"]["branch"]["properties"]) == keys_of(j["srt"]));
    CHECK(keys_of(s["$defs"]["branch"]["properties"]) == keys_of(j["rirm"]));
    CHECK(keys_of(s["$defs"]["stm"]["properties"]) == keys_of(j["srt"]["stm"]));
    CHECK(keys_of(s["$defs"]["train"]["properties"]) == keys_of(j["train"]));
    CHECK(keys_of(s["$defs"]["metrics"]["properties"]) == keys_of(j["metrics"]));
    CHECK(s["properties"]["schema_version"]["const"] == kSchemaVersion);
  }

  TEST_CASE("shipped desk config loads") {
    const auto c = load_run_config(fs::path(DUDOTRANS_SOURCE_DIR) / "config/desk.json");
    CHECK(c.train.epochs == 30);
    CHECK(c.srt.stm.embed_dim == 16);
    CHECK(c.rirm.depth == 2);
    CHECK(fs::path(c.train.manifest).is_absolute());
  }

  TEST_CASE("shipped desk config matches the documented data commands") {
    testing::TempDir dir("deskdata");
    REQUIRE(run({"phantom", "--count", "2", "--size", "128", "--detectors", "256", "--out", (dir / "ph").string()})
                .code == 0);
    REQUIRE(run({"simulate", "--views", "96", "--in", (dir / "ph").string(), "--out", (dir / "data").string()}).code ==
            0);
    auto c = load_run_config(fs::path(DUDOTRANS_SOURCE_DIR) / "config/desk.json");
    const auto manifest = sim::DatasetManifest::load(dir / "data/manifest.json");
    const auto g = dataset_geometry(manifest, c);
    CHECK(g.num_detectors == 256);
    CHECK(g.image_rows == 128);
    CHECK(g.num_views == 96);
  }
}
