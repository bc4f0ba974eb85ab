// Command-line entry point for the segmentation pipeline.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ovseg/config.hpp"
#include "ovseg/corpus.hpp"
#include "ovseg/error.hpp"
#include "ovseg/inference.hpp"
#include "ovseg/plot.hpp"
#include "ovseg/synthetic.hpp"
#include "ovseg/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace ovseg;

namespace {

struct Common {
  std::uint64_t seed = 0;
  bool seed_given = false;
  fs::path out_dir = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--out-dir", c.out_dir, "Output directory");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return s.str();
}

std::vector<std::string> load_templates(const std::string& path) {
  return path.empty() ? builtin_templates() : read_word_list(path);
}

json report_json(const EvalReport& r) {
  json classes = json::array();
  for (size_t i = 0; i < r.iou.size(); ++i) {
    classes.push_back({{"name", r.names[i]},
                       {"iou", r.evaluated[i] ? json(r.iou[i]) : json(nullptr)},
                       {"intersection", r.intersection[i]},
                       {"union", r.union_count[i]},
                       {"gt_pixels", r.gt_pixels[i]}});
  }
  return {{"miou", r.miou}, {"num_classes", r.num_classes}, {"pixels", r.pixels}, {"classes", classes}};
}

// --- commands ---------------------------------------------------------------

struct BuildEntitySetArgs {
  Common common;
  fs::path corpus;
  int size = 100;
  std::string stoplist;
  std::string candidates;
  std::string out = "omega.txt";
  bool no_plural = false;
};

int run_build_entity_set(const BuildEntitySetArgs& a) {
  CorpusReadResult read = load_corpus(a.corpus);
  std::vector<std::string> captions;
  for (const auto& p : read.pairs) captions.push_back(p.caption);
  const auto stop = a.stoplist.empty() ? builtin_stoplist() : read_word_list(a.stoplist);
  const auto cands = a.candidates.empty() ? builtin_candidate_nouns() : read_word_list(a.candidates);
  EntitySet omega = build_entity_set(captions, a.size, stop, cands, MatchOptions{!a.no_plural});
  const fs::path out = a.common.out_dir / a.out;
  std::ostringstream text;
  write_entity_set(omega, text);
  write_text(out, text.str());
  std::cout << "entities: " << omega.entities.size() << " (" << read.skipped << " malformed lines skipped) -> "
            << out.string() << "\n";
  return 0;
}

struct FilterArgs {
  Common common;
  fs::path corpus;
  fs::path entities;
  std::string out = "triplets.jsonl";
  int max_len = 32;
  bool no_plural = false;
  bool no_image_check = false;
};

int run_filter(const FilterArgs& a) {
  EntitySet omega = load_entity_set(a.entities);
  std::ifstream in(a.corpus);
  if (!in) throw DataError("cannot open corpus: " + a.corpus.string());
  FilterOptions opts;
  opts.max_len = a.max_len;
  opts.match.plural_folding = !a.no_plural;
  opts.check_images = !a.no_image_check;
  opts.base_dir = a.corpus.parent_path();
  FilterResult r = filter_corpus(in, omega, Tokenizer::builtin(), opts);
  const fs::path out = a.common.out_dir / a.out;
  fs::create_directories(out.parent_path().empty() ? fs::path(".") : out.parent_path());
  const fs::path out_dir = fs::absolute(out).parent_path();
  // Paths in the output resolve against the output file's directory.
  auto rebase = [&](const std::string& p) {
    fs::path full = fs::path(p).is_absolute() ? fs::path(p) : fs::absolute(opts.base_dir / p);
    return fs::proximate(full, out_dir).generic_string();
  };
  for (auto& t : r.triplets) {
    t.pair.image_path = rebase(t.pair.image_path);
    if (t.pair.mask_path) t.pair.mask_path = rebase(*t.pair.mask_path);
  }
  std::ostringstream text;
  write_triplets(r.triplets, text);
  write_text(out, text.str());
  std::cout << "read " << r.summary.read << ", kept " << r.summary.kept << ", no entity " << r.summary.no_entity
            << ", skipped " << r.summary.skipped << " -> " << out.string() << "\n";
  return 0;
}

struct SyntheticArgs {
  Common common;
  int n_train = 400;
  int n_eval = 50;
  int size = 64;
  std::vector<std::string> shapes = {"circle", "square", "triangle", "cross"};
  std::vector<std::string> colors = {"red", "green", "blue"};
  int min_shapes = 1;
  int max_shapes = 3;
  int min_size = 14;
  int max_size = 24;
};

int run_synthetic(const SyntheticArgs& a) {
  SyntheticOptions o;
  o.n_train = a.n_train;
  o.n_eval = a.n_eval;
  o.image_size = a.size;
  o.shapes = a.shapes;
  o.colors = a.colors;
  o.min_shapes = a.min_shapes;
  o.max_shapes = a.max_shapes;
  o.min_size = a.min_size;
  o.max_size = a.max_size;
  o.seed = a.common.seed;
  SyntheticSummary s = make_synthetic(o, a.common.out_dir);
  std::cout << "wrote " << s.train_images << " train images to " << s.train_dir.string() << " and " << s.eval_images
            << " eval images to " << s.eval_dir.string() << "\n";
  return 0;
}

struct TrainArgs {
  Common common;
  std::string config;
  std::vector<std::string> overrides;
  fs::path triplets;
  std::string image_root;
  std::string templates;
  std::string resume;
  bool quiet = false;
};

int run_train(TrainArgs a) {
  const Tokenizer& tok = Tokenizer::builtin();
  if (a.common.seed_given) a.overrides.push_back("train.seed=" + std::to_string(a.common.seed));
  RunConfig cfg = load_run_config(a.config, a.overrides, tok.size());
  std::vector<Triplet> triplets = load_triplets(a.triplets, tok, cfg.model.text.max_len);
  const fs::path root = a.image_root.empty() ? a.triplets.parent_path() : fs::path(a.image_root);
  TrainingSet data = TrainingSet::load(std::move(triplets), root, cfg.model.visual.image_size);
  fs::create_directories(a.common.out_dir);
  write_text(a.common.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  std::ofstream log(a.common.out_dir / "run.log", std::ios::app);
  log << timestamp() << " train start: " << data.size() << " triplets\n";

  FitOptions opts;
  opts.out_dir = a.common.out_dir;
  if (!a.resume.empty()) opts.resume = a.resume;
  if (!a.quiet) {
    opts.on_step = [](const LossBundle& b, std::int64_t step, int epoch) {
      std::cout << "epoch " << epoch << " step " << step << " total " << std::setprecision(5) << b.total
                << " contrast " << b.contrast << " entity " << b.entity << " mask " << b.mask << "\n";
    };
  }
  const fs::path ckpt = fit(cfg, data, tok, load_templates(a.templates), opts);
  log << timestamp() << " train done: " << ckpt.string() << "\n";
  std::cout << "checkpoint: " << ckpt.string() << "\n";
  return 0;
}

struct EvaluateArgs {
  Common common;
  fs::path ckpt;
  fs::path dataset;
  double threshold = 0.5;
  std::string templates;
  bool overlays = false;
};

int run_evaluate(const EvaluateArgs& a) {
  const Tokenizer& tok = Tokenizer::builtin();
  auto model = load_model(a.ckpt, tok.size());
  EvalDataset data = load_eval_dataset(a.dataset);
  DatasetEvaluation ev = evaluate_dataset(*model, data, tok, load_templates(a.templates), a.threshold);
  json j = report_json(ev.report);
  j["threshold"] = a.threshold;
  j["images"] = data.images.size();
  j["constant_baseline_miou"] = constant_prediction_miou(data.labels, static_cast<int>(data.class_names.size()));
  write_text(a.common.out_dir / "eval_report.json", j.dump(2) + "\n");
  if (a.overlays) {
    fs::create_directories(a.common.out_dir / "overlays");
    for (size_t i = 0; i < data.images.size(); ++i) {
      write_png_rgb(a.common.out_dir / "overlays" / (data.ids[i] + ".png"),
                    overlay_labels(data.images[i], ev.predictions[i]));
    }
  }
  std::cout << "mIoU " << ev.report.miou << " over " << data.images.size() << " images -> "
            << (a.common.out_dir / "eval_report.json").string() << "\n";
  return 0;
}

struct SegmentArgs {
  Common common;
  fs::path ckpt;
  fs::path image;
  std::vector<std::string> classes;
  std::string classes_json;
  double threshold = 0.5;
  std::string templates;
};

int run_segment(const SegmentArgs& a) {
  const Tokenizer& tok = Tokenizer::builtin();
  auto model = load_model(a.ckpt, tok.size());
  fs::create_directories(a.common.out_dir);
  std::vector<std::string> names = a.classes;
  if (!a.classes_json.empty()) names = read_class_names(a.classes_json);
  if (names.empty()) throw UsageError("give --classes or --classes-json");
  ClassEmbeddings classes = embed_classes(names, load_templates(a.templates), *model, tok);
  Image img = read_png_rgb(a.image);
  SegmentationResult r = segment(img, *model, classes, a.threshold);
  Matrix affinity;
  {
    ag::NoGradGuard guard;
    affinity = model->visual().forward(img).affinity.value();
  }
  const std::string stem = a.image.stem().string();
  const auto& vc = model->visual().config();
  write_png_gray(a.common.out_dir / (stem + "_labels.png"), to_label_png(r.map));
  write_png_rgb(a.common.out_dir / (stem + "_overlay.png"), overlay_labels(img, r.map));
  write_png_rgb(a.common.out_dir / (stem + "_groups.png"), group_assignment_image(affinity, vc.grid(), vc.patch_size));
  json counts = json::object();
  counts["background"] = 0;
  for (const auto& n : names) counts[n] = 0;
  for (int v : r.map.labels) counts[v < 0 ? std::string("background") : names[static_cast<size_t>(v)]] =
      counts[v < 0 ? std::string("background") : names[static_cast<size_t>(v)]].get<int>() + 1;
  write_text(a.common.out_dir / (stem + "_segment.json"),
             json{{"image", a.image.string()}, {"threshold", a.threshold}, {"pixel_counts", counts},
                  {"patch_labels", r.patch_labels}}
                     .dump(2) +
                 "\n");
  std::cout << "wrote " << (a.common.out_dir / (stem + "_labels.png")).string() << "\n";
  return 0;
}

struct ProbeArgs {
  Common common;
  fs::path ckpt;
  fs::path dataset;
  double keep = 0.6;
};

int run_probe(const ProbeArgs& a) {
  const Tokenizer& tok = Tokenizer::builtin();
  auto model = load_model(a.ckpt, tok.size());
  EvalDataset data = load_eval_dataset(a.dataset);
  std::mt19937_64 rng(a.common.seed);
  ProbeSummary s = probe_dataset(*model, data, a.keep, rng);
  json per = json::array();
  for (size_t i = 0; i < data.ids.size(); ++i) {
    per.push_back({{"id", data.ids[i]}, {"jaccard", s.jaccard[i]}, {"shuffled", s.shuffled[i]}});
  }
  write_text(a.common.out_dir / "probe_report.json",
             json{{"keep_fraction", a.keep}, {"mean_jaccard", s.mean}, {"shuffled_mean_jaccard", s.shuffled_mean},
                  {"images", per}}
                     .dump(2) +
                 "\n");
  std::cout << "mean Jaccard " << s.mean << " (shuffled affinity " << s.shuffled_mean << ")\n";
  return 0;
}

struct PlotArgs {
  Common common;
  std::string metrics;
  std::string report;
};

int run_plot(const PlotArgs& a) {
  if (a.metrics.empty() && a.report.empty()) throw UsageError("give --metrics and/or --report");
  if (!a.metrics.empty()) {
    write_text(a.common.out_dir / "loss_curves.svg", line_chart_svg(read_loss_series(a.metrics), "Training losses", "step"));
  }
  if (!a.report.empty()) {
    std::ifstream in(a.report);
    if (!in) throw DataError("cannot open report: " + a.report);
    json r;
    try {
      r = json::parse(in);
    } catch (const json::exception& e) {
      throw DataError(a.report + ": " + e.what());
    }
    std::vector<std::string> labels;
    std::vector<double> values;
    for (const auto& c : r.at("classes")) {
      if (c.at("iou").is_null()) continue;
      labels.push_back(c.at("name").get<std::string>());
      values.push_back(c.at("iou").get<double>());
    }
    write_text(a.common.out_dir / "per_class_iou.svg", bar_chart_svg(labels, values, "Per-class IoU"));
  }
  std::cout << "plots written to " << a.common.out_dir.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary segmentation from image-caption pairs"};
  app.require_subcommand(1);

  BuildEntitySetArgs bes;
  auto* c_bes = app.add_subcommand("build-entity-set", "Build the frequent-entity vocabulary from a corpus");
  add_common(c_bes, bes.common);
  c_bes->add_option("--corpus", bes.corpus, "Corpus JSONL")->required();
  c_bes->add_option("--size", bes.size, "Maximum number of entities");
  c_bes->add_option("--stoplist", bes.stoplist, "Excluded nouns, one per line");
  c_bes->add_option("--candidates", bes.candidates, "Candidate nouns, one per line");
  c_bes->add_option("--out", bes.out, "Output file (under --out-dir)");
  c_bes->add_flag("--no-plural-folding", bes.no_plural, "Match surface forms exactly");

  FilterArgs flt;
  auto* c_flt = app.add_subcommand("filter-corpus", "Keep pairs mentioning a vocabulary entity");
  add_common(c_flt, flt.common);
  c_flt->add_option("--corpus", flt.corpus, "Corpus JSONL")->required();
  c_flt->add_option("--entities", flt.entities, "Entity set file")->required();
  c_flt->add_option("--out", flt.out, "Output triplets JSONL (under --out-dir)");
  c_flt->add_option("--max-len", flt.max_len, "Token sequence length");
  c_flt->add_flag("--no-plural-folding", flt.no_plural, "Match surface forms exactly");
  c_flt->add_flag("--no-image-check", flt.no_image_check, "Do not require image files to exist");

  SyntheticArgs syn;
  auto* c_syn = app.add_subcommand("make-synthetic", "Render a captioned shapes corpus with label maps");
  add_common(c_syn, syn.common);
  c_syn->add_option("--n-train", syn.n_train, "Training images");
  c_syn->add_option("--n-eval", syn.n_eval, "Evaluation images");
  c_syn->add_option("--size", syn.size, "Image side in pixels");
  c_syn->add_option("--shapes", syn.shapes, "Shape classes")->delimiter(',');
  c_syn->add_option("--colors", syn.colors, "Colours")->delimiter(',');
  c_syn->add_option("--min-shapes", syn.min_shapes, "Fewest shapes per image");
  c_syn->add_option("--max-shapes", syn.max_shapes, "Most shapes per image");
  c_syn->add_option("--min-size", syn.min_size, "Smallest shape side in pixels");
  c_syn->add_option("--max-size", syn.max_size, "Largest shape side in pixels");

  TrainArgs trn;
  auto* c_trn = app.add_subcommand("train", "Train on filtered triplets");
  add_common(c_trn, trn.common);
  c_trn->add_option("--config", trn.config, "JSON config file");
  c_trn->add_option("--set", trn.overrides, "Override, e.g. loss.lambda=0");
  c_trn->add_option("--triplets", trn.triplets, "Triplets JSONL from filter-corpus")->required();
  c_trn->add_option("--image-root", trn.image_root, "Base for relative image paths (default: triplets dir)");
  c_trn->add_option("--templates", trn.templates, "Entity prompt templates, one per line");
  c_trn->add_option("--resume", trn.resume, "Checkpoint to resume from");
  c_trn->add_flag("--quiet", trn.quiet, "No per-step output");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Zero-shot mIoU on a labelled dataset");
  add_common(c_ev, ev.common);
  c_ev->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_ev->add_option("--dataset", ev.dataset, "Dataset directory")->required();
  c_ev->add_option("--threshold", ev.threshold, "Background threshold");
  c_ev->add_option("--templates", ev.templates, "Class prompt templates, one per line");
  c_ev->add_flag("--overlays", ev.overlays, "Write colour overlays");

  SegmentArgs seg;
  auto* c_seg = app.add_subcommand("segment", "Segment one image against class names");
  add_common(c_seg, seg.common);
  c_seg->add_option("--ckpt", seg.ckpt, "Checkpoint")->required();
  c_seg->add_option("--image", seg.image, "PNG image")->required();
  c_seg->add_option("--classes", seg.classes, "Class names")->delimiter(',');
  c_seg->add_option("--classes-json", seg.classes_json, "classes.json mapping index to name");
  c_seg->add_option("--threshold", seg.threshold, "Background threshold");
  c_seg->add_option("--templates", seg.templates, "Class prompt templates, one per line");

  ProbeArgs prb;
  auto* c_prb = app.add_subcommand("probe", "Mask probing of group affinities");
  add_common(c_prb, prb.common);
  c_prb->add_option("--ckpt", prb.ckpt, "Checkpoint")->required();
  c_prb->add_option("--dataset", prb.dataset, "Dataset directory")->required();
  c_prb->add_option("--keep", prb.keep, "Fraction of patches kept as foreground");

  PlotArgs plt;
  auto* c_plt = app.add_subcommand("plot", "Loss curves and per-class IoU as SVG");
  add_common(c_plt, plt.common);
  c_plt->add_option("--metrics", plt.metrics, "metrics.jsonl from train");
  c_plt->add_option("--report", plt.report, "eval_report.json from evaluate");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    for (auto* cmd : app.get_subcommands()) {
      const bool seeded = cmd->count("--seed") > 0;
      if (cmd == c_bes) return run_build_entity_set(bes);
      if (cmd == c_flt) return run_filter(flt);
      if (cmd == c_syn) return run_synthetic(syn);
      if (cmd == c_trn) {
        trn.common.seed_given = seeded;
        return run_train(trn);
      }
      if (cmd == c_ev) return run_evaluate(ev);
      if (cmd == c_seg) return run_segment(seg);
      if (cmd == c_prb) return run_probe(prb);
      if (cmd == c_plt) return run_plot(plt);
    }
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
