#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "clove/ablation.hpp"
#include "clove/config.hpp"
#include "clove/error.hpp"
#include "clove/plot.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace clove;

namespace {

enum Exit { kOk = 0, kRuntime = 1, kUsage = 2, kData = 3 };

struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw MissingInput(what + " not found: " + path);
}

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "key = value config file");
    cmd->add_option("--set", sets, "override, key=value (repeatable)");
  }

  RunConfig load() const {
    RunConfig cfg;
    if (!config.empty()) {
      require_file(config, "config file");
      apply_config_file(cfg, config);
    }
    for (const auto& s : sets) apply_override(cfg, s);
    cfg.validate();
    return cfg;
  }
};

void write_text(const std::string& path, const std::string& text) {
  if (const auto dir = fs::path(path).parent_path(); !dir.empty()) fs::create_directories(dir);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path);
}

nlohmann::json report_json(const CorrespondenceReport& r) {
  nlohmann::json j{{"top1", r.top1},         {"mean_error", r.mean_error}, {"baseline", r.baseline},
                   {"queries", r.queries},   {"images", r.images},         {"degenerate", r.degenerate},
                   {"ratio_to_baseline", r.baseline > 0 ? r.top1 / r.baseline : 0.0}};
  for (const auto& b : r.by_tpos) j["by_tpos"].push_back({{"t_pos", b.t_pos}, {"top1", b.top1}, {"queries", b.queries}});
  return j;
}

int cmd_pretrain(const ConfigArgs& args, const std::string& out_dir, const std::string& resume) {
  RunConfig cfg = args.load();
  const std::string effective = dump_config(cfg);
  if (cfg.train.metrics_path.empty()) cfg.train.metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  if (cfg.train.checkpoint_path.empty()) cfg.train.checkpoint_path = (fs::path(out_dir) / "final.ckpt").string();
  fs::create_directories(out_dir);

  TrainState state = init_state(cfg.train);
  if (!resume.empty()) {
    require_file(resume, "checkpoint");
    load_checkpoint(state, resume);
    std::cerr << "resumed at step " << state.step << " from " << resume << "\n";
  }
  write_text((fs::path(out_dir) / "config.cfg").string(), effective);

  const auto corpus = generate_corpus(cfg.corpus_train, cfg.corpus_seed, cfg.corpus);
  const auto images = corpus_images(corpus);
  train(state, cfg.train, images, &std::cerr);
  std::cerr << "finished at step " << state.step << "; metrics " << cfg.train.metrics_path << ", checkpoint "
            << cfg.train.checkpoint_path << "\n";
  return kOk;
}

int cmd_eval(const ConfigArgs& args, const std::string& checkpoint, const std::string& report_path,
             const std::string& attention_path, std::size_t attention_images) {
  const RunConfig cfg = args.load();
  TrainState state = init_state(cfg.train);
  if (!checkpoint.empty()) {
    require_file(checkpoint, "checkpoint");
    load_checkpoint(state, checkpoint);
  }
  const RunOutcome r = evaluate_state(state, cfg);
  nlohmann::json j = report_json(r.report);
  j["probe_accuracy"] = r.probe_accuracy;
  j["step"] = state.step;
  j["features"] = cfg.eval_teacher ? "teacher" : "student";
  const std::string text = j.dump(2) + "\n";
  if (report_path.empty()) {
    std::cout << text;
  } else {
    write_text(report_path, text);
  }

  if (!attention_path.empty()) {
    const auto corpus = generate_corpus(attention_images, cfg.corpus_seed + 1, cfg.corpus, 1u << 30);
    std::ostringstream csv;
    csv << "image,head,query,key,weight\n";
    for (const auto& img : corpus) {
      Rng rng = Rng::stream(cfg.eval.seed, {img.id});
      const ViewRecord view = sample_view(img.image, rng, cfg.eval.views);
      const ViewRecord* ptr = &view;
      Tape<float> tape(false);
      state.student.set_training(false);
      const auto seq = to_sequence(tape, state.student.forward(tape, make_batch<float>({&ptr, 1})).map);
      const auto w = state.predictor.attention(tape, seq).weights;
      const std::size_t heads = w.dim(1), len = w.dim(2);
      for (std::size_t h = 0; h < heads; ++h) {
        for (std::size_t q = 0; q < len; ++q) {
          for (std::size_t k = 0; k < len; ++k) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", static_cast<double>(w[(h * len + q) * len + k]));
            csv << img.id << ',' << h << ',' << q << ',' << k << ',' << buf << '\n';
          }
        }
      }
    }
    write_text(attention_path, csv.str());
  }
  return kOk;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream in(s);
  std::string tok;
  while (std::getline(in, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + tok + "' is not a seed");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

int cmd_ablate(const ConfigArgs& args, const std::string& grid_path, const std::string& seeds,
               const std::string& out_csv, const std::string& summary_csv) {
  const RunConfig base = args.load();
  std::vector<AblationCell> cells;
  if (grid_path.empty()) {
    std::istringstream empty;
    cells = parse_grid(empty, "<empty>");
  } else {
    require_file(grid_path, "grid file");
    std::ifstream in(grid_path);
    cells = parse_grid(in, grid_path);
  }
  const auto rows = run_ablation(cells, base, parse_seeds(seeds), &std::cerr);
  std::ostringstream table, summary;
  write_ablation_csv(table, rows);
  write_summary_csv(summary, summarize(rows));
  write_text(out_csv, table.str());
  if (!summary_csv.empty()) write_text(summary_csv, summary.str());
  std::cout << summary.str();
  std::size_t failed = 0;
  for (const auto& r : rows) failed += !r.error.empty();
  if (failed) std::cerr << failed << " run(s) failed; see the error column\n";
  return failed ? kRuntime : kOk;
}

int cmd_match_debug(const ConfigArgs& args, std::uint64_t image_id, std::optional<std::uint64_t> seed_opt,
                    bool identity, const std::string& out_csv) {
  const RunConfig cfg = args.load();
  const std::uint64_t seed = seed_opt.value_or(cfg.train.seed);
  const auto corpus = generate_corpus(1, cfg.corpus_seed, cfg.corpus, image_id);
  const AugmentProfile prof =
      identity ? AugmentProfile::identity(cfg.train.augment.out_h, cfg.train.augment.out_w) : cfg.train.augment;
  Rng rng = Rng::stream(seed, {image_id});
  const ViewRecord v1 = sample_view(corpus[0].image, rng, prof);
  const ViewRecord v2 = sample_view(corpus[0].image, rng, prof);
  const std::size_t stride = cfg.train.encoder.total_stride();
  const GridPoints g1 = build_grid(v1.geometry, prof.out_h / stride, prof.out_w / stride);
  const GridPoints g2 = build_grid(v2.geometry, prof.out_h / stride, prof.out_w / stride);
  const MatchSet m = match_pairs(g1, g2, cfg.train.t_pos, cfg.train.distance);
  const double scale = distance_scale(g1, g2, cfg.train.distance);

  std::ostringstream csv;
  csv << "kind,view,a,b,x,y,valid_or_distance\n";
  char buf[160];
  for (const auto* g : {&g1, &g2}) {
    const int view = g == &g1 ? 1 : 2;
    for (std::size_t i = 0; i < g->size(); ++i) {
      const auto& p = g->points[i];
      std::snprintf(buf, sizeof buf, "point,%d,%zu,,%.6f,%.6f,%d\n", view, i, p.x, p.y, p.valid ? 1 : 0);
      csv << buf;
    }
  }
  std::size_t diagonal = 0;
  for (const auto& [i, j] : m.pairs) {
    diagonal += i == j;
    std::snprintf(buf, sizeof buf, "pair,,%u,%u,,,%.6f\n", i, j, point_distance(g1.points[i], g2.points[j]) * scale);
    csv << buf;
  }
  write_text(out_csv, csv.str());
  std::cout << m.size() << " pairs, " << diagonal << " on the diagonal, t_pos " << cfg.train.t_pos << "\n";
  return kOk;
}

int cmd_plot(const std::string& metrics, const std::string& out_dir) {
  require_file(metrics, "metrics CSV");
  std::ifstream in(metrics);
  const NumericTable t = read_numeric_csv(in, metrics);
  if (t.columns.size() < 2) throw DataError(metrics + ": need an x column and at least one metric");
  fs::create_directories(out_dir);
  const auto x = t.column(0);
  for (std::size_t c = 1; c < t.columns.size(); ++c) {
    const std::string path = (fs::path(out_dir) / (t.columns[c] + ".svg")).string();
    write_text(path, svg_line_chart(x, t.column(c), t.columns[0], t.columns[c]));
  }
  std::cout << t.columns.size() - 1 << " chart(s) in " << out_dir << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"clove: contextualized local visual embeddings at desk scale"};
  app.require_subcommand(1);

  ConfigArgs pre_args, eval_args, abl_args, dbg_args;
  std::string out_dir = "run", resume;
  auto* pre = app.add_subcommand("pretrain", "train student/teacher on the synthetic corpus");
  pre_args.attach(pre);
  pre->add_option("--out", out_dir, "directory for metrics, checkpoint and effective config");
  pre->add_option("--resume", resume, "checkpoint to continue from");

  std::string checkpoint, report, attention;
  std::size_t attention_images = 4;
  auto* ev = app.add_subcommand("eval", "correspondence report and linear probe for a checkpoint");
  eval_args.attach(ev);
  ev->add_option("--checkpoint", checkpoint, "checkpoint to evaluate (default: fresh init)");
  ev->add_option("--report", report, "JSON report path (default: stdout)");
  ev->add_option("--attention", attention, "CSV dump of predictor attention weights");
  ev->add_option("--attention-images", attention_images, "images in the attention dump");

  std::string grid, seeds = "0,1,2", table = "ablation.csv", summary;
  auto* abl = app.add_subcommand("ablate", "train and evaluate every grid cell for every seed");
  abl_args.attach(abl);
  abl->add_option("--grid", grid, "grid file, lines of 'cell_id: key=value ...'");
  abl->add_option("--seeds", seeds, "comma-separated seeds");
  abl->add_option("--out", table, "per-run CSV");
  abl->add_option("--summary", summary, "per-cell mean/std CSV");

  std::uint64_t image_id = 0;
  std::optional<std::uint64_t> dbg_seed;
  bool identity = false;
  std::string dbg_out = "match.csv";
  auto* dbg = app.add_subcommand("match-debug", "dump grid points and matched pairs for two views of one image");
  dbg_args.attach(dbg);
  dbg->add_option("--image", image_id, "corpus image id");
  dbg->add_option("--seed", dbg_seed, "view seed (default: the config seed)");
  dbg->add_flag("--identity", identity, "use identity views");
  dbg->add_option("--out", dbg_out, "output CSV");

  std::string metrics, plot_dir = "plots";
  auto* plot = app.add_subcommand("plot", "SVG line chart per metrics column");
  plot->add_option("metrics", metrics, "metrics CSV")->required();
  plot->add_option("--out", plot_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*pre) return cmd_pretrain(pre_args, out_dir, resume);
    if (*ev) return cmd_eval(eval_args, checkpoint, report, attention, attention_images);
    if (*abl) return cmd_ablate(abl_args, grid, seeds, table, summary);
    if (*dbg) return cmd_match_debug(dbg_args, image_id, dbg_seed, identity, dbg_out);
    if (*plot) return cmd_plot(metrics, plot_dir);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
