#pragma once

// Command-line front end: generate | train | eval | score | gradcheck.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cbln/config.hpp"
#include "cbln/data.hpp"
#include "cbln/diagnostics.hpp"
#include "cbln/evaluation.hpp"
#include "cbln/model.hpp"
#include "cbln/training.hpp"

namespace cbln::cli {

namespace fs = std::filesystem;

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;
  std::string out_dir;
  std::string data;
  std::string checkpoint;
  std::vector<std::size_t> n;
  std::vector<double> iou;
  std::optional<double> nms_iou;
  std::string dump_map;
  std::size_t index = 0;
  bool strict = false;
};

// Base config: --config file, else the config stored in --checkpoint, else
// defaults. Then --set overrides, then --seed.
inline RunConfig resolve_config(const Options& o) {
  RunConfig cfg;
  if (!o.config_path.empty()) {
    cfg = RunConfig::load(o.config_path);
  } else if (!o.checkpoint.empty()) {
    const nlohmann::json header = load_checkpoint_header(o.checkpoint);
    if (header.contains("config")) cfg = RunConfig::from_json(header.at("config"));
  }
  for (const std::string& s : o.overrides) cfg.apply_override(s);
  if (o.seed) cfg.seed = *o.seed;
  if (!o.n.empty()) cfg.eval.n = o.n;
  if (!o.iou.empty()) cfg.eval.iou = o.iou;
  if (o.nms_iou) cfg.eval.nms_iou = *o.nms_iou;
  if (o.strict) cfg.eval.strict = true;
  cfg.validate();
  return cfg;
}

// --data may name a directory holding <split>.json, a dataset manifest, or a
// real-feature manifest (an object with "samples"). Without --data the split
// is generated from the config.
inline std::vector<GroundingExample> load_split(const Options& o, const RunConfig& cfg, Split split) {
  if (o.data.empty()) {
    return generate_dataset(cfg.data_spec(), split == Split::Train ? cfg.train_count : cfg.test_count, split);
  }
  fs::path path = o.data;
  if (fs::is_directory(path)) path /= split == Split::Train ? "train.json" : "test.json";
  const nlohmann::json head = detail::parse_json(detail::read_file(path), path.string());
  if (head.is_object() && head.contains("samples")) return ingest_real_features(path, cfg.model.encoder.max_T);
  return load_dataset(path);
}

inline CblnModel make_model(const Options& o, const RunConfig& cfg, std::ostream& out) {
  CblnModel model(cfg.model, cfg.seed);
  if (!o.checkpoint.empty()) {
    load_checkpoint(o.checkpoint, model.params());
  } else {
    out << "no checkpoint given; using the untrained model (seed " << cfg.seed << ")\n";
  }
  return model;
}

inline void write_config(const fs::path& dir, const RunConfig& cfg) {
  detail::write_file(dir / "config.json", cfg.to_json().dump(2) + "\n");
}

inline fs::path out_dir(const Options& o, const char* fallback) {
  fs::path dir = o.out_dir.empty() ? fs::path(fallback) : fs::path(o.out_dir);
  fs::create_directories(dir);
  return dir;
}

inline int cmd_generate(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = out_dir(o, "data");
  const SyntheticSpec spec = cfg.data_spec();
  save_dataset(generate_dataset(spec, cfg.train_count, Split::Train), dir / "train.json");
  save_dataset(generate_dataset(spec, cfg.test_count, Split::Test), dir / "test.json");
  write_config(dir, cfg);
  out << "wrote " << cfg.train_count << " train / " << cfg.test_count << " test examples to " << dir.string() << "\n";
  return 0;
}

inline int cmd_train(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const fs::path dir = out_dir(o, "run");
  const auto data = load_split(o, cfg, Split::Train);
  CblnModel model(cfg.model, cfg.seed);
  out << "training on " << data.size() << " examples, " << model.params().scalar_count() << " parameters\n";
  const TrainResult result = train(model, data, cfg.train_config(), [&](std::size_t epoch, double loss) {
    out << "epoch " << epoch + 1 << "/" << cfg.train.epochs << " loss " << std::setprecision(6) << loss << "\n"
        << std::flush;
  });
  nlohmann::json header;
  header["config"] = cfg.to_json();
  save_checkpoint(dir / "checkpoint.bin", model.params(), header);
  write_loss_trace(dir / "loss.csv", result.step_losses);
  write_config(dir, cfg);
  out << "wrote " << (dir / "checkpoint.bin").string() << " and " << (dir / "loss.csv").string() << "\n";
  return 0;
}

inline int cmd_eval(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const auto data = load_split(o, cfg, Split::Test);
  const CblnModel model = make_model(o, cfg, out);
  const auto values = evaluate_model(model, data, cfg.eval);
  const std::string text = format_report(values);
  out << text;
  if (!o.out_dir.empty()) {
    const fs::path dir = out_dir(o, "");
    detail::write_file(dir / "metrics.txt", text);
    detail::write_file(dir / "metrics.json", report_json(values).dump(2) + "\n");
  }
  return 0;
}

inline int cmd_score(const Options& o, std::ostream& out) {
  const RunConfig cfg = resolve_config(o);
  const auto data = load_split(o, cfg, Split::Test);
  if (o.index >= data.size()) {
    throw DataError("--index " + std::to_string(o.index) + " out of range for " + std::to_string(data.size()) +
                    " examples");
  }
  const GroundingExample& ex = data[o.index];
  const CblnModel model = make_model(o, cfg, out);
  const Matrix map = model.score(ex.features, ex.tokens);
  const ScoredSegment best = top_n_segments(map, 1, cfg.eval.nms_iou).front();
  const std::size_t T = ex.features.rows;
  const auto [t0, t1] = segment_to_timestamps(best.segment, T, ex.duration_s);
  char buf[256];
  std::snprintf(buf, sizeof(buf), "segment: %zu %zu\ntimestamps: %.3f %.3f\nscore: %.6f\n", best.segment.start,
                best.segment.end, t0, t1, best.score);
  out << buf;
  std::snprintf(buf, sizeof(buf), "ground truth: %zu %zu (IoU %.3f)\n", ex.gt.start, ex.gt.end,
                compute_iou(best.segment, ex.gt));
  out << buf;
  if (!o.dump_map.empty()) {
    std::string csv;
    for (std::size_t s = 0; s < T; ++s) {
      for (std::size_t e = 0; e < T; ++e) {
        std::snprintf(buf, sizeof(buf), e == 0 ? "%.17g" : ",%.17g", map(s, e));
        csv += buf;
      }
      csv += "\n";
    }
    detail::write_file(o.dump_map, csv);
  }
  return 0;
}

inline int cmd_gradcheck(std::ostream& out) {
  const GradCheckOptions opt;
  const DiagnosticSuite suite = run_gradient_diagnostics(opt);
  char buf[256];
  for (const char* group : {"tensor", "encoders", "mmsa", "mcbl", "loss"}) {
    const double w = suite.worst(group);
    std::snprintf(buf, sizeof(buf), "%-9s max rel err %.3e %s %.0e\n", group, w, w < opt.tol ? "<" : ">=", opt.tol);
    out << buf;
  }
  for (const auto& r : suite.results) {
    if (r.report.passed) continue;
    out << "FAILED " << r.group << "/" << r.name << ": " << r.report.worst_input << "[" << r.report.worst_index
        << "] analytic " << r.report.analytic << " numeric " << r.report.numeric << "\n";
  }
  std::snprintf(buf, sizeof(buf), "%zu checks in %.1fs\n", suite.results.size(), suite.seconds);
  out << buf;
  return suite.passed() ? 0 : 1;
}

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Temporal sentence grounding with multi-context biaffine localization"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* c) {
    c->add_option("--config", o.config_path, "Flat JSON config with dotted keys")->check(CLI::ExistingFile);
    c->add_option("--seed", o.seed, "Run seed");
    c->add_option("--set", o.overrides, "Override a config key (key=value, repeatable)")->allow_extra_args(false);
  };
  auto needs_data = [&](CLI::App* c) {
    c->add_option("--data", o.data, "Dataset directory or manifest (default: generate from config)");
  };
  auto needs_checkpoint = [&](CLI::App* c) {
    c->add_option("--checkpoint", o.checkpoint, "Checkpoint written by train")->check(CLI::ExistingFile);
    c->add_option("--nms-iou", o.nms_iou, "NMS IoU threshold for top-n selection");
  };

  CLI::App* gen = app.add_subcommand("generate", "Write synthetic train/test datasets");
  common(gen);
  gen->add_option("--out", o.out_dir, "Output directory (default: data)");

  CLI::App* tr = app.add_subcommand("train", "Train and write checkpoint.bin + loss.csv");
  common(tr);
  needs_data(tr);
  tr->add_option("--out", o.out_dir, "Output directory (default: run)");

  CLI::App* ev = app.add_subcommand("eval", "Report R@n,IoU=m on the test split");
  common(ev);
  needs_data(ev);
  needs_checkpoint(ev);
  ev->add_option("--n", o.n, "Top-n values")->delimiter(',');
  ev->add_option("--iou", o.iou, "IoU thresholds")->delimiter(',');
  ev->add_flag("--strict", o.strict, "Count only IoU > m as a hit");
  ev->add_option("--out", o.out_dir, "Write metrics.json and metrics.txt here");

  CLI::App* sc = app.add_subcommand("score", "Best segment for one test example");
  common(sc);
  needs_data(sc);
  needs_checkpoint(sc);
  sc->add_option("--index", o.index, "Example index in the test split");
  sc->add_option("--dump-map", o.dump_map, "Write the T x T score map as CSV");

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of every module");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (*gen) return cmd_generate(o, out);
    if (*tr) return cmd_train(o, out);
    if (*ev) return cmd_eval(o, out);
    if (*sc) return cmd_score(o, out);
    if (*gc) return cmd_gradcheck(out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cbln::cli
