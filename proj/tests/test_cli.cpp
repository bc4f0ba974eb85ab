#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>

#include "doctest.h"
#include "json.hpp"
#include "ovseg/corpus.hpp"
#include "ovseg/error.hpp"
#include "ovseg/plot.hpp"
#include "ovseg/synthetic.hpp"
#include "test_util.hpp"

using namespace ovseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Every regular file under dir, keyed by relative path.
std::map<std::string, std::string> tree(const fs::path& dir, const std::string& skip = "") {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (!skip.empty() && rel == skip) continue;
    out[rel] = slurp(e.path());
  }
  return out;
}

int cli(const std::string& args) {
  const std::string cmd = std::string("\"") + OVSEG_CLI + "\" " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

const char* kTinyModel =
    "--set visual.image_size=32 --set visual.patch_size=8 --set visual.embed_dim=16 --set visual.num_groups=4 "
    "--set visual.layers_stage1=1 --set visual.layers_stage2=1 --set visual.heads=2 --set text.embed_dim=16 "
    "--set text.layers=1 --set text.heads=2 --set text.max_len=16 --set loss.joint_dim=8 "
    "--set loss.decoder_heads=2 --set train.epochs=2 --set train.batch_size=4 --set train.lr=0.001";

}  // namespace

TEST_CASE("synthetic generator") {
  SyntheticOptions opts;
  opts.n_train = 10;
  opts.n_eval = 3;
  opts.image_size = 48;
  opts.shapes = {"circle", "square"};
  opts.colors = {"red", "blue"};
  opts.seed = 4;
  const auto dir = scratch_dir("synth");
  const SyntheticSummary s = make_synthetic(opts, dir);
  CHECK(s.train_images == 10);
  CHECK(s.eval_images == 3);

  SUBCASE("captions name exactly the rendered shapes") {
    const auto corpus = load_corpus(s.train_dir / "corpus.jsonl");
    REQUIRE(corpus.pairs.size() == 10);
    std::mt19937_64 rng(4);
    for (const auto& p : corpus.pairs) {
      CHECK(fs::exists(s.train_dir / p.image_path));
      REQUIRE(p.mask_path.has_value());
      const GrayImage label = read_png_gray(s.train_dir / *p.mask_path);
      std::map<int, int> present;
      for (auto v : label.data) ++present[v];
      for (const std::string shape : {"circle", "square"}) {
        const int cls = shape == "circle" ? 1 : 2;
        const bool said = p.caption.find(shape) != std::string::npos;
        CHECK(said == (present.count(cls) > 0));
      }
      CHECK(p.caption.find("triangle") == std::string::npos);
    }
    const auto classes = nlohmann::json::parse(slurp(s.train_dir / "classes.json"));
    CHECK(classes == nlohmann::json{{"0", "circle"}, {"1", "square"}});
  }
  SUBCASE("identical seeds give identical files") {
    const auto again = scratch_dir("synth_again");
    make_synthetic(opts, again);
    CHECK(tree(dir) == tree(again));
    opts.seed = 5;
    const auto other = scratch_dir("synth_other");
    make_synthetic(opts, other);
    CHECK(tree(dir) != tree(other));
  }
  SUBCASE("shape areas") {
    std::mt19937_64 rng(9);
    SyntheticOptions one = opts;
    one.max_shapes = 1;
    for (int t = 0; t < 40; ++t) {
      const SyntheticSample sample = render_sample(one, rng);
      REQUIRE(sample.shapes.size() == 1);
      const ShapeInstance& sh = sample.shapes[0];
      long area = 0;
      for (auto v : sample.label.data) area += v != 0;
      if (sh.kind == ShapeKind::kSquare) {
        CHECK(area == static_cast<long>(sh.size) * sh.size);
      } else {
        const double r = sh.size / 2.0;
        CHECK(std::abs(area - 3.14159265358979 * r * r) <= 2 * 3.14159265358979 * r);
      }
      // Every labelled pixel lies inside the box.
      for (int y = 0; y < sample.label.height; ++y)
        for (int x = 0; x < sample.label.width; ++x)
          if (sample.label.at(y, x)) CHECK((x >= sh.x && x < sh.x + sh.size && y >= sh.y && y < sh.y + sh.size));
    }
  }
  SUBCASE("caption order follows the canvas left to right") {
    std::mt19937_64 rng(1);
    std::vector<ShapeInstance> shapes{{ShapeKind::kSquare, "red", 30, 0, 10}, {ShapeKind::kCircle, "blue", 2, 20, 10}};
    const std::string c = describe(shapes, rng);
    CHECK(c.find("a blue circle and a red square") != std::string::npos);
  }
  SUBCASE("invalid requests") {
    SyntheticOptions bad = opts;
    bad.image_size = 10;
    CHECK_THROWS_AS(make_synthetic(bad, scratch_dir("synth_bad")), DataError);
    bad = opts;
    bad.max_shapes = 6;
    bad.min_size = bad.max_size = 24;
    CHECK_THROWS_AS(bad.validate(), DataError);
    bad = opts;
    bad.shapes = {};
    CHECK_THROWS_AS(bad.validate(), UsageError);
    bad = opts;
    bad.colors = {"teal"};
    CHECK_THROWS_AS(bad.validate(), UsageError);
  }
}

TEST_CASE("plots") {
  const auto dir = scratch_dir("plots");
  std::ofstream(dir / "m.jsonl") << R"({"step":1,"L_contrast":2.0,"L_entity":2.5,"L_mask":0.0,"L_total":4.5})" "\n"
                                 << R"({"step":2,"L_contrast":1.5,"L_entity":2.1,"L_mask":0.3,"L_total":3.9})" "\n";
  const auto series = read_loss_series(dir / "m.jsonl");
  REQUIRE(series.size() == 4);
  CHECK(series[0].x == std::vector<double>{1, 2});
  const std::string svg = line_chart_svg(series, "losses", "step");
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("polyline") != std::string::npos);
  const std::string bars = bar_chart_svg({"a", "b"}, {0.25, 1.0}, "iou");
  CHECK(std::regex_search(bars, std::regex("<rect")));
  CHECK(bars.find(">a<") != std::string::npos);
}

TEST_CASE("command line") {
  CHECK(cli("") == 2);
  CHECK(cli("--help") == 0);
  CHECK(cli("frobnicate") == 2);
  CHECK(cli("make-synthetic --bogus-flag") == 2);
  CHECK(cli("build-entity-set") == 2);

  const auto root = scratch_dir("cli");
  CHECK(cli("build-entity-set --corpus " + q(root / "absent.jsonl") + " --out-dir " + q(root)) == 3);
  CHECK(cli("evaluate --ckpt " + q(root / "absent.bin") + " --dataset " + q(root) + " --out-dir " + q(root)) == 3);

  const auto syn = root / "syn";
  REQUIRE(cli("make-synthetic --n-train 12 --n-eval 3 --size 32 --min-size 8 --max-size 12 --seed 2 --out-dir " +
              q(syn)) == 0);
  CHECK(cli("make-synthetic --size 8 --out-dir " + q(root / "tiny")) == 3);
  CHECK(cli("make-synthetic --shapes hexagon --out-dir " + q(root / "hex")) == 2);

  REQUIRE(cli("build-entity-set --corpus " + q(syn / "train" / "corpus.jsonl") + " --out-dir " + q(root / "ent")) == 0);
  const auto omega = load_entity_set(root / "ent" / "omega.txt");
  CHECK(omega.contains("circle"));
  CHECK_FALSE(omega.contains("red"));

  REQUIRE(cli("filter-corpus --corpus " + q(syn / "train" / "corpus.jsonl") + " --entities " +
              q(root / "ent" / "omega.txt") + " --out-dir " + q(root / "flt")) == 0);
  const auto triplets = root / "flt" / "triplets.jsonl";
  CHECK(fs::exists(triplets));

  const std::string train = "train --triplets " + q(triplets) + " --quiet --seed 1 " + kTinyModel;
  REQUIRE(cli(train + " --out-dir " + q(root / "run_a")) == 0);
  REQUIRE(cli(train + " --out-dir " + q(root / "run_b")) == 0);
  CHECK(fs::exists(root / "run_a" / "checkpoint.bin"));
  CHECK(fs::exists(root / "run_a" / "metrics.jsonl"));
  CHECK(fs::exists(root / "run_a" / "run.log"));
  CHECK(tree(root / "run_a", "run.log") == tree(root / "run_b", "run.log"));
  CHECK(nlohmann::json::parse(slurp(root / "run_a" / "config.json"))["train"]["seed"] == 1);
  CHECK(cli(train + " --set train.nonsense=3 --out-dir " + q(root / "run_c")) == 2);
  CHECK(cli("train --triplets " + q(triplets) + " --quiet " + kTinyModel + " --set train.lr=1e300 --out-dir " +
            q(root / "run_nan")) == 4);
  CHECK(fs::exists(root / "run_nan" / "nonfinite_batch.json"));

  const auto ckpt = q(root / "run_a" / "checkpoint.bin");
  for (const char* out : {"ev_a", "ev_b"}) {
    REQUIRE(cli("evaluate --ckpt " + ckpt + " --dataset " + q(syn / "eval") + " --overlays --out-dir " +
                q(root / out)) == 0);
  }
  CHECK(tree(root / "ev_a") == tree(root / "ev_b"));
  const auto report = nlohmann::json::parse(slurp(root / "ev_a" / "eval_report.json"));
  CHECK(report["classes"].size() == 5);
  CHECK(report["classes"][0]["name"] == "background");
  CHECK(report["miou"].get<double>() >= 0.0);
  CHECK(report.contains("constant_baseline_miou"));
  CHECK(fs::exists(root / "ev_a" / "overlays" / "eval_00000.png"));

  const auto img = q(syn / "eval" / "images" / "eval_00000.png");
  REQUIRE(cli("segment --ckpt " + ckpt + " --image " + img + " --classes circle,square --threshold 0 --out-dir " +
              q(root / "seg")) == 0);
  for (const char* f : {"eval_00000_labels.png", "eval_00000_overlay.png", "eval_00000_groups.png", "eval_00000_segment.json"}) {
    CHECK(fs::exists(root / "seg" / f));
  }
  const GrayImage labels = read_png_gray(root / "seg" / "eval_00000_labels.png");
  CHECK(std::none_of(labels.data.begin(), labels.data.end(), [](std::uint8_t v) { return v == 0; }));
  CHECK(cli("segment --ckpt " + ckpt + " --image " + img + " --out-dir " + q(root / "seg2")) == 2);

  REQUIRE(cli("probe --ckpt " + ckpt + " --dataset " + q(syn / "eval") + " --out-dir " + q(root / "prb")) == 0);
  const auto probe = nlohmann::json::parse(slurp(root / "prb" / "probe_report.json"));
  CHECK(probe.contains("mean_jaccard"));

  REQUIRE(cli("plot --metrics " + q(root / "run_a" / "metrics.jsonl") + " --report " +
              q(root / "ev_a" / "eval_report.json") + " --out-dir " + q(root / "plt")) == 0);
  CHECK(fs::exists(root / "plt" / "loss_curves.svg"));
  CHECK(fs::exists(root / "plt" / "per_class_iou.svg"));
  CHECK(cli("plot --out-dir " + q(root / "plt2")) == 2);
}
