#include "ovseg/synthetic.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "json.hpp"
#include "ovseg/corpus.hpp"
#include "ovseg/error.hpp"

namespace ovseg {

namespace {

constexpr int kMargin = 2;

const std::map<std::string, std::array<float, 3>>& color_table() {
  static const std::map<std::string, std::array<float, 3>> table = {
      {"red", {0.90f, 0.15f, 0.12f}},    {"green", {0.15f, 0.80f, 0.20f}},  {"blue", {0.15f, 0.30f, 0.95f}},
      {"yellow", {0.92f, 0.85f, 0.15f}}, {"white", {0.92f, 0.92f, 0.92f}}, {"orange", {0.95f, 0.55f, 0.10f}},
      {"purple", {0.60f, 0.20f, 0.80f}},
  };
  return table;
}

const std::vector<std::string> kCaptionForms = {"{}", "an image of {}", "{} on a dark background",
                                                "there is {}"};

bool boxes_overlap(const ShapeInstance& a, const ShapeInstance& b) {
  return a.x < b.x + b.size + kMargin && b.x < a.x + a.size + kMargin && a.y < b.y + b.size + kMargin &&
         b.y < a.y + a.size + kMargin;
}

}  // namespace

ShapeKind parse_shape(const std::string& name) {
  if (name == "circle") return ShapeKind::kCircle;
  if (name == "square") return ShapeKind::kSquare;
  if (name == "triangle") return ShapeKind::kTriangle;
  if (name == "cross") return ShapeKind::kCross;
  throw UsageError("unknown shape: " + name);
}

std::string shape_name(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
  }
  return "";
}

void SyntheticOptions::validate() const {
  if (n_train < 0 || n_eval < 0) throw UsageError("image counts must be non-negative");
  if (shapes.empty()) throw UsageError("no shapes given");
  if (colors.empty()) throw UsageError("no colors given");
  for (const auto& s : shapes) parse_shape(s);
  for (const auto& c : colors) {
    if (!color_table().count(c)) throw UsageError("unknown color: " + c);
  }
  if (min_shapes < 1 || max_shapes < min_shapes) throw UsageError("bad shape count range");
  if (min_size < 3 || max_size < min_size) throw UsageError("bad shape size range");
  if (image_size < max_size) throw DataError("canvas too small for requested shapes");
  // Worst case: max_shapes boxes of max_size side by side must fit along one axis.
  if (max_shapes * (max_size + kMargin) > 2 * image_size) {
    throw DataError("canvas too small for requested shapes");
  }
}

bool shape_contains(ShapeKind kind, int size, int dx, int dy) {
  const double s = size;
  const double px = dx + 0.5;
  const double py = dy + 0.5;
  switch (kind) {
    case ShapeKind::kSquare:
      return dx >= 0 && dy >= 0 && dx < size && dy < size;
    case ShapeKind::kCircle: {
      const double r = s / 2.0;
      const double cx = px - r, cy = py - r;
      return cx * cx + cy * cy <= r * r;
    }
    case ShapeKind::kTriangle: {
      // Apex at top centre, base along the bottom edge.
      if (py < 0 || py > s) return false;
      const double half = 0.5 * s * (py / s);
      return std::abs(px - s / 2.0) <= half;
    }
    case ShapeKind::kCross: {
      const double t = s / 3.0;
      const bool in_box = px >= 0 && py >= 0 && px <= s && py <= s;
      const bool vertical = px >= t && px <= 2 * t;
      const bool horizontal = py >= t && py <= 2 * t;
      return in_box && (vertical || horizontal);
    }
  }
  return false;
}

std::string describe(const std::vector<ShapeInstance>& shapes, std::mt19937_64& rng) {
  std::vector<const ShapeInstance*> order;
  for (const auto& s : shapes) order.push_back(&s);
  std::stable_sort(order.begin(), order.end(),
                   [](const ShapeInstance* a, const ShapeInstance* b) { return 2 * a->x + a->size < 2 * b->x + b->size; });
  std::string list;
  for (size_t i = 0; i < order.size(); ++i) {
    if (i > 0) list += " and ";
    list += "a " + order[i]->color + " " + shape_name(order[i]->kind);
  }
  std::uniform_int_distribution<size_t> pick(0, kCaptionForms.size() - 1);
  return fill_template(kCaptionForms[pick(rng)], list);
}

SyntheticSample render_sample(const SyntheticOptions& opts, std::mt19937_64& rng) {
  const int n = opts.image_size;
  std::uniform_int_distribution<int> count_dist(opts.min_shapes, opts.max_shapes);
  std::uniform_int_distribution<int> size_dist(opts.min_size, opts.max_size);
  std::uniform_int_distribution<size_t> shape_dist(0, opts.shapes.size() - 1);
  std::uniform_int_distribution<size_t> color_dist(0, opts.colors.size() - 1);
  std::uniform_real_distribution<float> noise(-0.05f, 0.05f);
  std::uniform_real_distribution<float> jitter(-0.06f, 0.06f);

  SyntheticSample out;
  const int count = count_dist(rng);
  int attempts = 0;
  while (static_cast<int>(out.shapes.size()) < count) {
    if (++attempts > 5000) throw DataError("canvas too small for requested shapes");
    // Start over when the placed shapes leave no room.
    if (attempts % 250 == 0) out.shapes.clear();
    ShapeInstance s;
    s.kind = parse_shape(opts.shapes[shape_dist(rng)]);
    s.color = opts.colors[color_dist(rng)];
    s.size = size_dist(rng);
    std::uniform_int_distribution<int> pos(0, n - s.size);
    s.x = pos(rng);
    s.y = pos(rng);
    bool clash = false;
    for (const auto& other : out.shapes) clash = clash || boxes_overlap(s, other);
    if (!clash) out.shapes.push_back(s);
  }

  out.image = Image(n, n);
  out.label = GrayImage(n, n, 0);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const float base = 0.10f + noise(rng);
      out.image.at(y, x, 0) = base;
      out.image.at(y, x, 1) = base;
      out.image.at(y, x, 2) = base + 0.02f;
    }
  }
  for (const auto& s : out.shapes) {
    auto rgb = color_table().at(s.color);
    for (auto& c : rgb) c = std::clamp(c + jitter(rng), 0.0f, 1.0f);
    const auto cls = std::find(opts.shapes.begin(), opts.shapes.end(), shape_name(s.kind)) - opts.shapes.begin();
    for (int dy = 0; dy < s.size; ++dy) {
      for (int dx = 0; dx < s.size; ++dx) {
        if (!shape_contains(s.kind, s.size, dx, dy)) continue;
        for (int c = 0; c < 3; ++c) out.image.at(s.y + dy, s.x + dx, c) = rgb[static_cast<size_t>(c)];
        out.label.at(s.y + dy, s.x + dx) = static_cast<std::uint8_t>(cls + 1);
      }
    }
  }
  out.caption = describe(out.shapes, rng);
  return out;
}

namespace {

void write_split(const SyntheticOptions& opts, const std::filesystem::path& dir, const std::string& prefix, int n,
                 std::mt19937_64& rng) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "labels");
  std::ofstream corpus(dir / "corpus.jsonl", std::ios::trunc);
  if (!corpus) throw DataError("cannot write " + (dir / "corpus.jsonl").string());
  for (int i = 0; i < n; ++i) {
    SyntheticSample s = render_sample(opts, rng);
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%s%05d", prefix.c_str(), i);
    const std::string image_rel = std::string("images/") + stem + ".png";
    const std::string label_rel = std::string("labels/") + stem + ".png";
    write_png_rgb(dir / image_rel, s.image);
    write_png_gray(dir / label_rel, s.label);
    write_corpus_line(RawPair{stem, image_rel, s.caption, label_rel}, corpus);
  }
  nlohmann::json classes = nlohmann::json::object();
  for (size_t c = 0; c < opts.shapes.size(); ++c) classes[std::to_string(c)] = opts.shapes[c];
  std::ofstream(dir / "classes.json") << classes.dump(2) << "\n";
}

}  // namespace

SyntheticSummary make_synthetic(const SyntheticOptions& opts, const std::filesystem::path& out_dir) {
  opts.validate();
  std::mt19937_64 rng(opts.seed);
  SyntheticSummary summary{out_dir / "train", out_dir / "eval", opts.n_train, opts.n_eval};
  write_split(opts, summary.train_dir, "train_", opts.n_train, rng);
  write_split(opts, summary.eval_dir, "eval_", opts.n_eval, rng);
  return summary;
}

}  // namespace ovseg
