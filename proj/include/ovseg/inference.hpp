#pragma once

// Zero-shot segmentation from group affinities and class-prompt embeddings,
// mIoU accounting and class-agnostic mask probing.

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ovseg/image.hpp"
#include "ovseg/model.hpp"

namespace ovseg {

inline constexpr int kBackgroundLabel = -1;
inline constexpr int kIgnoreLabel = 255;

struct ClassEmbeddings {
  std::vector<std::string> names;
  Matrix embeddings;  // C x joint, unit rows
  std::vector<std::string> templates;
};

ClassEmbeddings embed_classes(const std::vector<std::string>& names, const std::vector<std::string>& templates,
                              const OvSegModel& model, const Tokenizer& tokenizer);

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<int> labels;  // row-major; kBackgroundLabel, class index, or kIgnoreLabel
  int at(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
};

struct SegmentationResult {
  LabelMap map;
  std::vector<int> patch_labels;  // raster order over the patch grid
  Matrix patch_scores;            // L x C, rows sum to one
};

// Patch scores = affinity * softmax_C(cosine / temperature); patches whose
// best score is below the threshold become background. The patch grid is
// upsampled to pixels by nearest neighbour.
SegmentationResult segment_from_scores(const Matrix& affinity, const Matrix& group_class_cosine,
                                       double temperature, double bkg_threshold, int grid, int patch_size);
SegmentationResult segment(const Image& image, const OvSegModel& model, const ClassEmbeddings& classes,
                           double bkg_threshold);

// Label PNG: 0 background, c + 1 class c, 255 ignore.
LabelMap read_label_png(const std::filesystem::path& path, int num_classes);
GrayImage to_label_png(const LabelMap& map);

struct EvalReport {
  int num_classes = 0;
  std::vector<std::string> names;       // background first
  std::vector<std::int64_t> intersection;  // C + 1 entries, background first
  std::vector<std::int64_t> union_count;
  std::vector<std::int64_t> gt_pixels;
  std::vector<double> iou;
  std::vector<bool> evaluated;  // false when absent from both prediction and ground truth
  double miou = 0.0;
  std::int64_t pixels = 0;
};

// Accumulates per-class counts; merge order does not change the report.
class IoUAccumulator {
 public:
  explicit IoUAccumulator(int num_classes);
  void add(const LabelMap& pred, const LabelMap& gt);
  void merge(const IoUAccumulator& other);
  EvalReport report(std::vector<std::string> class_names = {}) const;

 private:
  int num_classes_;
  std::vector<std::int64_t> inter_, pred_, gt_;
  std::int64_t pixels_ = 0;
};

EvalReport compute_miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes);
// Best mIoU reachable by predicting one constant label (background included)
// everywhere on the given ground truth.
double constant_prediction_miou(std::span<const LabelMap> gts, int num_classes);

// Best Jaccard over affinity columns, each binarized by keeping its top
// round(keep_fraction * L) entries (ties by lower patch index).
double mask_probe(const Matrix& affinity, std::span<const std::uint8_t> gt_mask, double keep_fraction);
// Patch-level foreground (majority of the patch's non-ignored pixels).
std::vector<std::uint8_t> patch_foreground(const LabelMap& gt, int patch_size);

// Colour overlay of labels on the image, and a map colouring each patch by
// its arg-max group.
Image overlay_labels(const Image& image, const LabelMap& labels, double alpha = 0.5);
Image group_assignment_image(const Matrix& affinity, int grid, int patch_size);

// Labelled benchmark: images/, labels/ with matching stems, classes.json
// mapping "0".."C-1" to names.
struct EvalDataset {
  std::vector<std::string> class_names;
  std::vector<std::string> ids;
  std::vector<Image> images;
  std::vector<LabelMap> labels;
};

std::vector<std::string> read_class_names(const std::filesystem::path& classes_json);
EvalDataset load_eval_dataset(const std::filesystem::path& dir);

struct DatasetEvaluation {
  EvalReport report;
  std::vector<LabelMap> predictions;
};

DatasetEvaluation evaluate_dataset(const OvSegModel& model, const EvalDataset& data, const Tokenizer& tokenizer,
                                   const std::vector<std::string>& templates, double bkg_threshold);

struct ProbeSummary {
  std::vector<double> jaccard;   // per image
  std::vector<double> shuffled;  // same images, affinity rows permuted
  double mean = 0.0;
  double shuffled_mean = 0.0;
};

// Mask probing over a dataset with a paired shuffled-affinity baseline.
ProbeSummary probe_dataset(const OvSegModel& model, const EvalDataset& data, double keep_fraction,
                           std::mt19937_64& rng);

}  // namespace ovseg
