#include "ovseg/inference.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

#include "ovseg/error.hpp"

namespace ovseg {

using ag::Index;

ClassEmbeddings embed_classes(const std::vector<std::string>& names, const std::vector<std::string>& templates,
                              const OvSegModel& model, const Tokenizer& tokenizer) {
  if (names.empty()) throw UsageError("no class names");
  if (templates.empty()) throw UsageError("empty template list");
  ag::NoGradGuard guard;
  const int max_len = model.text().config().max_len;
  ClassEmbeddings out{names, Matrix(static_cast<Index>(names.size()), model.config().loss.joint_dim), templates};
  for (size_t c = 0; c < names.size(); ++c) {
    Matrix acc = Matrix::Zero(1, out.embeddings.cols());
    for (const auto& t : templates) {
      TokenizedText tokens = tokenizer.encode(fill_template(t, names[c]), max_len);
      acc += model.heads().project_text(model.text().encode_prefix(tokens).eot_vector).value();
    }
    const double norm = acc.norm();
    if (!(norm > 1e-12)) throw NumericError("degenerate embedding for class " + names[c]);
    out.embeddings.row(static_cast<Index>(c)) = acc / norm;
  }
  return out;
}

SegmentationResult segment_from_scores(const Matrix& affinity, const Matrix& group_class_cosine,
                                       double temperature, double bkg_threshold, int grid, int patch_size) {
  const Index c = group_class_cosine.cols();
  if (c < 1) throw UsageError("class count must be positive");
  if (!(temperature > 0)) throw UsageError("temperature must be positive");
  if (affinity.cols() != group_class_cosine.rows()) throw UsageError("affinity and group scores disagree on K");
  if (affinity.rows() != static_cast<Index>(grid) * grid) throw UsageError("affinity rows do not match the patch grid");

  Matrix probs = group_class_cosine / temperature;
  for (Index k = 0; k < probs.rows(); ++k) {
    auto r = probs.row(k);
    r.array() -= r.maxCoeff();
    r = r.array().exp().matrix();
    r /= r.sum();
  }
  SegmentationResult out;
  out.patch_scores = affinity * probs;
  out.patch_labels.resize(static_cast<size_t>(affinity.rows()));
  for (Index j = 0; j < affinity.rows(); ++j) {
    Index best = 0;
    const double top = out.patch_scores.row(j).maxCoeff(&best);
    out.patch_labels[static_cast<size_t>(j)] = top < bkg_threshold ? kBackgroundLabel : static_cast<int>(best);
  }
  const int side = grid * patch_size;
  out.map = LabelMap{side, side, std::vector<int>(static_cast<size_t>(side) * side)};
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      out.map.labels[static_cast<size_t>(y) * side + x] =
          out.patch_labels[static_cast<size_t>((y / patch_size) * grid + x / patch_size)];
    }
  }
  return out;
}

SegmentationResult segment(const Image& image, const OvSegModel& model, const ClassEmbeddings& classes,
                           double bkg_threshold) {
  if (classes.embeddings.rows() < 1) throw UsageError("class count must be positive");
  ag::NoGradGuard guard;
  GroupState st = model.visual().forward(image);
  Matrix groups = model.heads().project_groups(st.groups).value();
  const auto& vc = model.visual().config();
  return segment_from_scores(st.affinity.value(), groups * classes.embeddings.transpose(),
                             model.heads().temperature(), bkg_threshold, vc.grid(), vc.patch_size);
}

LabelMap read_label_png(const std::filesystem::path& path, int num_classes) {
  GrayImage g = read_png_gray(path);
  LabelMap m{g.height, g.width, std::vector<int>(g.data.size())};
  for (size_t i = 0; i < g.data.size(); ++i) {
    const int v = g.data[i];
    if (v == kIgnoreLabel) {
      m.labels[i] = kIgnoreLabel;
    } else if (v == 0) {
      m.labels[i] = kBackgroundLabel;
    } else if (v <= num_classes) {
      m.labels[i] = v - 1;
    } else {
      throw DataError("label " + std::to_string(v) + " out of range in " + path.string());
    }
  }
  return m;
}

GrayImage to_label_png(const LabelMap& map) {
  GrayImage g(map.height, map.width);
  for (size_t i = 0; i < map.labels.size(); ++i) {
    const int v = map.labels[i];
    g.data[i] = static_cast<std::uint8_t>(v == kIgnoreLabel ? 255 : v + 1);
  }
  return g;
}

IoUAccumulator::IoUAccumulator(int num_classes)
    : num_classes_(num_classes),
      inter_(static_cast<size_t>(num_classes) + 1, 0),
      pred_(static_cast<size_t>(num_classes) + 1, 0),
      gt_(static_cast<size_t>(num_classes) + 1, 0) {
  if (num_classes < 1) throw UsageError("class count must be positive");
}

void IoUAccumulator::add(const LabelMap& pred, const LabelMap& gt) {
  if (pred.height != gt.height || pred.width != gt.width || pred.labels.size() != gt.labels.size()) {
    throw UsageError("prediction and ground truth shapes differ");
  }
  auto slot = [&](int label) -> size_t {
    if (label == kBackgroundLabel) return 0;
    if (label < 0 || label >= num_classes_) throw UsageError("label out of range: " + std::to_string(label));
    return static_cast<size_t>(label) + 1;
  };
  for (size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] == kIgnoreLabel) continue;
    const size_t g = slot(gt.labels[i]);
    const size_t p = slot(pred.labels[i]);
    ++gt_[g];
    ++pred_[p];
    if (g == p) ++inter_[g];
    ++pixels_;
  }
}

void IoUAccumulator::merge(const IoUAccumulator& other) {
  if (other.num_classes_ != num_classes_) throw UsageError("cannot merge reports with different class counts");
  for (size_t i = 0; i < inter_.size(); ++i) {
    inter_[i] += other.inter_[i];
    pred_[i] += other.pred_[i];
    gt_[i] += other.gt_[i];
  }
  pixels_ += other.pixels_;
}

EvalReport IoUAccumulator::report(std::vector<std::string> class_names) const {
  EvalReport r;
  r.num_classes = num_classes_;
  r.names.push_back("background");
  for (int c = 0; c < num_classes_; ++c) {
    r.names.push_back(static_cast<size_t>(c) < class_names.size() ? class_names[static_cast<size_t>(c)]
                                                                 : "class" + std::to_string(c));
  }
  r.intersection = inter_;
  r.gt_pixels = gt_;
  r.pixels = pixels_;
  double sum = 0.0;
  int n = 0;
  for (size_t i = 0; i < inter_.size(); ++i) {
    const std::int64_t u = pred_[i] + gt_[i] - inter_[i];
    r.union_count.push_back(u);
    r.evaluated.push_back(u > 0);
    r.iou.push_back(u > 0 ? static_cast<double>(inter_[i]) / static_cast<double>(u) : 0.0);
    if (u > 0) {
      sum += r.iou.back();
      ++n;
    }
  }
  r.miou = n > 0 ? sum / n : 0.0;
  return r;
}

EvalReport compute_miou(std::span<const LabelMap> preds, std::span<const LabelMap> gts, int num_classes) {
  if (preds.size() != gts.size()) throw UsageError("prediction and ground-truth counts differ");
  IoUAccumulator acc(num_classes);
  for (size_t i = 0; i < preds.size(); ++i) acc.add(preds[i], gts[i]);
  return acc.report();
}

double constant_prediction_miou(std::span<const LabelMap> gts, int num_classes) {
  double best = 0.0;
  for (int label = kBackgroundLabel; label < num_classes; ++label) {
    IoUAccumulator acc(num_classes);
    for (const auto& gt : gts) {
      LabelMap pred{gt.height, gt.width, std::vector<int>(gt.labels.size(), label)};
      acc.add(pred, gt);
    }
    best = std::max(best, acc.report().miou);
  }
  return best;
}

double mask_probe(const Matrix& affinity, std::span<const std::uint8_t> gt_mask, double keep_fraction) {
  const Index l = affinity.rows();
  if (affinity.cols() < 1) throw UsageError("mask probe needs at least one group");
  if (static_cast<Index>(gt_mask.size()) != l) throw UsageError("mask probe: gt length differs from patch count");
  if (!(keep_fraction >= 0 && keep_fraction <= 1)) throw UsageError("keep fraction must be in [0, 1]");
  const auto keep = static_cast<size_t>(std::lround(keep_fraction * static_cast<double>(l)));
  double best = 0.0;
  std::vector<int> order(static_cast<size_t>(l));
  for (Index k = 0; k < affinity.cols(); ++k) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return affinity(a, k) > affinity(b, k); });
    std::vector<char> fg(static_cast<size_t>(l), 0);
    for (size_t i = 0; i < keep; ++i) fg[static_cast<size_t>(order[i])] = 1;
    std::int64_t inter = 0, uni = 0;
    for (Index j = 0; j < l; ++j) {
      const bool a = fg[static_cast<size_t>(j)] != 0;
      const bool b = gt_mask[static_cast<size_t>(j)] != 0;
      inter += a && b;
      uni += a || b;
    }
    if (uni > 0) best = std::max(best, static_cast<double>(inter) / static_cast<double>(uni));
  }
  return best;
}

std::vector<std::uint8_t> patch_foreground(const LabelMap& gt, int patch_size) {
  if (patch_size < 1 || gt.height % patch_size != 0 || gt.width % patch_size != 0) {
    throw UsageError("label map is not a whole number of patches");
  }
  const int gh = gt.height / patch_size;
  const int gw = gt.width / patch_size;
  std::vector<std::uint8_t> out(static_cast<size_t>(gh) * gw, 0);
  for (int py = 0; py < gh; ++py) {
    for (int px = 0; px < gw; ++px) {
      int fg = 0, valid = 0;
      for (int y = py * patch_size; y < (py + 1) * patch_size; ++y) {
        for (int x = px * patch_size; x < (px + 1) * patch_size; ++x) {
          const int v = gt.at(y, x);
          if (v == kIgnoreLabel) continue;
          ++valid;
          fg += v != kBackgroundLabel;
        }
      }
      out[static_cast<size_t>(py) * gw + px] = 2 * fg > valid ? 1 : 0;
    }
  }
  return out;
}

namespace {

constexpr std::array<std::array<float, 3>, 12> kPalette = {{{0.90f, 0.10f, 0.10f},
                                                            {0.10f, 0.70f, 0.20f},
                                                            {0.15f, 0.35f, 0.95f},
                                                            {0.95f, 0.80f, 0.10f},
                                                            {0.70f, 0.20f, 0.80f},
                                                            {0.10f, 0.80f, 0.80f},
                                                            {0.95f, 0.50f, 0.10f},
                                                            {0.55f, 0.35f, 0.15f},
                                                            {0.95f, 0.55f, 0.75f},
                                                            {0.50f, 0.50f, 0.50f},
                                                            {0.60f, 0.85f, 0.30f},
                                                            {0.20f, 0.20f, 0.55f}}};

}  // namespace

Image overlay_labels(const Image& image, const LabelMap& labels, double alpha) {
  if (image.height != labels.height || image.width != labels.width) throw UsageError("overlay: size mismatch");
  Image out = image;
  const auto a = static_cast<float>(alpha);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int v = labels.at(y, x);
      if (v < 0 || v == kIgnoreLabel) continue;
      const auto& col = kPalette[static_cast<size_t>(v) % kPalette.size()];
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = (1 - a) * image.at(y, x, c) + a * col[static_cast<size_t>(c)];
    }
  }
  return out;
}

Image group_assignment_image(const Matrix& affinity, int grid, int patch_size) {
  if (affinity.rows() != static_cast<Index>(grid) * grid) throw UsageError("affinity rows do not match the patch grid");
  const int side = grid * patch_size;
  Image out(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      Index k = 0;
      affinity.row((y / patch_size) * grid + x / patch_size).maxCoeff(&k);
      const auto& col = kPalette[static_cast<size_t>(k) % kPalette.size()];
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = col[static_cast<size_t>(c)];
    }
  }
  return out;
}

std::vector<std::string> read_class_names(const std::filesystem::path& classes_json) {
  std::ifstream in(classes_json);
  if (!in) throw DataError("cannot open " + classes_json.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(classes_json.string() + ": " + e.what());
  }
  if (!j.is_object() || j.empty()) throw DataError(classes_json.string() + ": expected a non-empty object");
  std::vector<std::string> names(j.size());
  for (size_t c = 0; c < names.size(); ++c) {
    auto it = j.find(std::to_string(c));
    if (it == j.end() || !it->is_string()) throw DataError(classes_json.string() + ": missing class " + std::to_string(c));
    names[c] = it->get<std::string>();
  }
  return names;
}

EvalDataset load_eval_dataset(const std::filesystem::path& dir) {
  EvalDataset data;
  data.class_names = read_class_names(dir / "classes.json");
  const auto image_dir = dir / "images";
  const auto label_dir = std::filesystem::exists(dir / "labels") ? dir / "labels" : dir / "masks";
  if (!std::filesystem::is_directory(image_dir)) throw DataError("no images directory in " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(image_dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  const int c = static_cast<int>(data.class_names.size());
  for (const auto& f : files) {
    const auto label_path = label_dir / f.filename();
    if (!std::filesystem::exists(label_path)) throw DataError("missing label map for " + f.filename().string());
    Image img = read_png_rgb(f);
    LabelMap lab = read_label_png(label_path, c);
    if (lab.height != img.height || lab.width != img.width) throw DataError("label size differs for " + f.string());
    data.ids.push_back(f.stem().string());
    data.images.push_back(std::move(img));
    data.labels.push_back(std::move(lab));
  }
  if (data.images.empty()) throw DataError("no images in " + image_dir.string());
  return data;
}

DatasetEvaluation evaluate_dataset(const OvSegModel& model, const EvalDataset& data, const Tokenizer& tokenizer,
                                   const std::vector<std::string>& templates, double bkg_threshold) {
  ClassEmbeddings classes = embed_classes(data.class_names, templates, model, tokenizer);
  DatasetEvaluation out;
  IoUAccumulator acc(static_cast<int>(data.class_names.size()));
  for (size_t i = 0; i < data.images.size(); ++i) {
    SegmentationResult r = segment(data.images[i], model, classes, bkg_threshold);
    acc.add(r.map, data.labels[i]);
    out.predictions.push_back(std::move(r.map));
  }
  out.report = acc.report(data.class_names);
  return out;
}

ProbeSummary probe_dataset(const OvSegModel& model, const EvalDataset& data, double keep_fraction,
                           std::mt19937_64& rng) {
  ag::NoGradGuard guard;
  const int patch = model.visual().config().patch_size;
  ProbeSummary out;
  for (size_t i = 0; i < data.images.size(); ++i) {
    const Matrix affinity = model.visual().forward(data.images[i]).affinity.value();
    const std::vector<std::uint8_t> gt = patch_foreground(data.labels[i], patch);
    out.jaccard.push_back(mask_probe(affinity, gt, keep_fraction));
    std::vector<int> perm(static_cast<size_t>(affinity.rows()));
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Matrix shuffled(affinity.rows(), affinity.cols());
    for (Index j = 0; j < affinity.rows(); ++j) shuffled.row(j) = affinity.row(perm[static_cast<size_t>(j)]);
    out.shuffled.push_back(mask_probe(shuffled, gt, keep_fraction));
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  out.mean = mean(out.jaccard);
  out.shuffled_mean = mean(out.shuffled);
  return out;
}

}  // namespace ovseg
