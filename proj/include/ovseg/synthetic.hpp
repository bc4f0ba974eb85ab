#pragma once

// Desk-scale stand-in for a captioned web corpus plus a labelled benchmark:
// coloured shapes on a noisy dark canvas with pixel-exact label maps.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ovseg/image.hpp"

namespace ovseg {

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross };

ShapeKind parse_shape(const std::string& name);
std::string shape_name(ShapeKind kind);

struct ShapeInstance {
  ShapeKind kind;
  std::string color;
  int x = 0;  // top-left of the bounding box
  int y = 0;
  int size = 0;
};

struct SyntheticOptions {
  int n_train = 400;
  int n_eval = 50;
  int image_size = 64;
  std::vector<std::string> shapes = {"circle", "square", "triangle", "cross"};
  std::vector<std::string> colors = {"red", "green", "blue"};
  int min_shapes = 1;
  int max_shapes = 3;
  int min_size = 14;
  int max_size = 24;
  std::uint64_t seed = 0;

  void validate() const;
};

// Pixel-centre inside test for a shape whose bounding box is size x size.
bool shape_contains(ShapeKind kind, int size, int dx, int dy);

struct SyntheticSample {
  Image image;
  GrayImage label;  // 0 background, class + 1 per shape kind
  std::vector<ShapeInstance> shapes;
  std::string caption;
};

// Shapes listed left to right, e.g. "a red circle and a blue square".
std::string describe(const std::vector<ShapeInstance>& shapes, std::mt19937_64& rng);
SyntheticSample render_sample(const SyntheticOptions& opts, std::mt19937_64& rng);

struct SyntheticSummary {
  std::filesystem::path train_dir;
  std::filesystem::path eval_dir;
  int train_images = 0;
  int eval_images = 0;
};

// Writes <out>/train and <out>/eval, each with images/, labels/,
// classes.json and corpus.jsonl.
SyntheticSummary make_synthetic(const SyntheticOptions& opts, const std::filesystem::path& out_dir);

}  // namespace ovseg
