#include "clove/ablation.hpp"

#include <cmath>
#include <limits>
#include <sstream>

namespace clove {

std::string AblationCell::override_keys() const {
  std::string out;
  for (std::size_t i = 0; i < overrides.size(); ++i) {
    out += (i ? ";" : "") + overrides[i].first + "=" + overrides[i].second;
  }
  return out;
}

std::vector<AblationCell> parse_grid(std::istream& in, const std::string& source) {
  std::vector<AblationCell> cells;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto colon = line.find(':');
    const std::string where = source + ":" + std::to_string(lineno);
    if (colon == std::string::npos) throw ConfigError(where + ": expected 'cell_id: key=value ...'");
    std::istringstream head(line.substr(0, colon));
    AblationCell cell;
    if (!(head >> cell.id)) throw ConfigError(where + ": missing cell id");
    for (const auto& c : cells)
      if (c.id == cell.id) throw ConfigError(where + ": repeated cell id '" + cell.id + "'");
    std::istringstream body(line.substr(colon + 1));
    std::string tok;
    RunConfig probe;
    while (body >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError(where + ": '" + tok + "' is not key=value");
      cell.overrides.push_back({tok.substr(0, eq), tok.substr(eq + 1)});
      try {
        apply_setting(probe, cell.overrides.back().first, cell.overrides.back().second);
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
      }
    }
    cells.push_back(std::move(cell));
  }
  if (cells.empty()) cells.push_back({"base", {}});
  return cells;
}

RunOutcome evaluate_state(TrainState& state, const RunConfig& cfg) {
  const auto eval = generate_corpus(cfg.corpus_eval, cfg.corpus_seed + 1, cfg.corpus, 1u << 30);
  Encoder<float>& enc = cfg.eval_teacher ? state.teacher : state.student;
  RunOutcome out;
  out.report = correspondence_eval(enc, eval, cfg.eval);
  const auto probe_set = generate_corpus(cfg.probe_train, cfg.corpus_seed, cfg.corpus);
  out.probe_accuracy = linear_probe(pooled_features(enc, probe_set), corpus_labels(probe_set),
                                    pooled_features(enc, eval), corpus_labels(eval), kShapeClasses, cfg.probe)
                           .test_accuracy;
  return out;
}

RunOutcome run_experiment(const RunConfig& cfg, std::ostream* log) {
  cfg.validate();
  const auto corpus = generate_corpus(cfg.corpus_train, cfg.corpus_seed, cfg.corpus);
  const auto images = corpus_images(corpus);
  TrainState state = init_state(cfg.train);
  const auto history = train(state, cfg.train, images, log);
  RunOutcome out = evaluate_state(state, cfg);
  double sum = 0;
  std::size_t n = 0;
  for (auto it = history.rbegin(); it != history.rend() && n < 10; ++it) {
    if (it->skipped) continue;
    sum += it->loss;
    ++n;
  }
  out.final_loss = n ? sum / static_cast<double>(n) : std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::vector<AblationRow> run_ablation(const std::vector<AblationCell>& cells, const RunConfig& base,
                                      const std::vector<std::uint64_t>& seeds, std::ostream* log) {
  std::vector<AblationRow> rows;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const auto& cell : cells) {
    for (std::uint64_t seed : seeds) {
      AblationRow row{cell.id, cell.override_keys(), seed, nan, nan, nan, nan, {}};
      try {
        RunConfig cfg = base;
        for (const auto& [k, v] : cell.overrides) apply_setting(cfg, k, v);
        cfg.train.seed = seed;
        cfg.train.metrics_path.clear();
        cfg.train.checkpoint_path.clear();
        cfg.train.stop_at = 0;
        const RunOutcome r = run_experiment(cfg);
        row.corr_top1 = r.report.top1;
        row.corr_err = r.report.mean_error;
        row.probe_acc = r.probe_accuracy;
        row.final_loss = r.final_loss;
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      if (log) {
        *log << "cell " << row.cell_id << " seed " << seed;
        if (row.error.empty()) {
          *log << " top1 " << row.corr_top1 << " err " << row.corr_err << " probe " << row.probe_acc << " loss "
               << row.final_loss << std::endl;
        } else {
          *log << " FAILED: " << row.error << std::endl;
        }
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// Override lists contain ';' and '=' but never ',' or quotes.
std::string field(const std::string& s) { return s.find(',') == std::string::npos ? s : "\"" + s + "\""; }

}  // namespace

void write_ablation_csv(std::ostream& out, const std::vector<AblationRow>& rows) {
  out << kAblationHeader << '\n';
  for (const auto& r : rows) {
    out << field(r.cell_id) << ',' << field(r.override_keys) << ',' << r.seed << ',' << num(r.corr_top1) << ','
        << num(r.corr_err) << ',' << num(r.probe_acc) << ',' << num(r.final_loss) << '\n';
  }
}

std::vector<CellSummary> summarize(const std::vector<AblationRow>& rows) {
  std::vector<CellSummary> out;
  std::vector<std::vector<const AblationRow*>> groups;
  for (const auto& r : rows) {
    std::size_t g = 0;
    while (g < out.size() && out[g].cell_id != r.cell_id) ++g;
    if (g == out.size()) {
      out.push_back({r.cell_id, r.override_keys});
      groups.emplace_back();
    }
    if (r.error.empty()) groups[g].push_back(&r);
  }
  auto stats = [](const std::vector<const AblationRow*>& g, double AblationRow::*f, double& mean, double& sd) {
    const double nan = std::numeric_limits<double>::quiet_NaN();
    if (g.empty()) {
      mean = sd = nan;
      return;
    }
    double s = 0;
    for (const auto* r : g) s += r->*f;
    mean = s / static_cast<double>(g.size());
    double v = 0;
    for (const auto* r : g) v += (r->*f - mean) * (r->*f - mean);
    sd = g.size() > 1 ? std::sqrt(v / static_cast<double>(g.size() - 1)) : 0.0;
  };
  for (std::size_t g = 0; g < out.size(); ++g) {
    out[g].runs = groups[g].size();
    stats(groups[g], &AblationRow::corr_top1, out[g].top1_mean, out[g].top1_std);
    stats(groups[g], &AblationRow::corr_err, out[g].err_mean, out[g].err_std);
    stats(groups[g], &AblationRow::probe_acc, out[g].probe_mean, out[g].probe_std);
    stats(groups[g], &AblationRow::final_loss, out[g].loss_mean, out[g].loss_std);
  }
  return out;
}

void write_summary_csv(std::ostream& out, const std::vector<CellSummary>& cells) {
  out << "cell_id,override_keys,runs,corr_top1_mean,corr_top1_std,corr_err_mean,corr_err_std,probe_acc_mean,"
         "probe_acc_std,final_loss_mean,final_loss_std\n";
  for (const auto& c : cells) {
    out << field(c.cell_id) << ',' << field(c.override_keys) << ',' << c.runs << ',' << num(c.top1_mean) << ','
        << num(c.top1_std) << ',' << num(c.err_mean) << ',' << num(c.err_std) << ',' << num(c.probe_mean) << ','
        << num(c.probe_std) << ',' << num(c.loss_mean) << ',' << num(c.loss_std) << '\n';
  }
}

}  // namespace clove
