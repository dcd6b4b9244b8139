#include "clove/trainer.hpp"

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace clove {

namespace {

enum StreamTag : std::uint64_t { kInitTag = 1, kBatchTag = 2, kViewTag = 3, kQueueTag = 4 };

}  // namespace

std::size_t TrainConfig::warmup_steps() const {
  return static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(steps)));
}

void TrainConfig::validate() const {
  if (steps == 0 || batch == 0) throw ConfigError("train: steps and batch must be positive");
  if (!(lr > 0)) throw ConfigError("train: lr must be positive");
  if (!(lr_min >= 0 && lr_min <= lr)) throw ConfigError("train: lr_min must lie in [0, lr]");
  if (!(warmup_frac >= 0 && warmup_frac < 1)) throw ConfigError("train: warmup_frac must lie in [0, 1)");
  if (!(lars.momentum >= 0 && lars.momentum < 1)) throw ConfigError("train: lars momentum must lie in [0, 1)");
  if (!(lars.trust_coeff > 0) || !(lars.weight_decay >= 0)) {
    throw ConfigError("train: lars trust_coeff must be positive and weight_decay non-negative");
  }
  if (!(ema_start >= 0 && ema_start <= ema_end && ema_end <= 1)) {
    throw ConfigError("train: need 0 <= ema_start <= ema_end <= 1");
  }
  if (!(t_pos > 0)) throw ConfigError("train: t_pos must be positive");
  if (queue_capacity == 0) throw ConfigError("train: queue_capacity must be positive");
  if (augment.out_h % encoder.total_stride() != 0 || augment.out_w % encoder.total_stride() != 0) {
    throw ConfigError("train: view resolution must be divisible by the encoder stride");
  }
  if (local_crops > 0) {
    const AugmentProfile local = default_multicrop(augment).local;
    if (local.out_h % encoder.total_stride() != 0 || local.out_w % encoder.total_stride() != 0) {
      throw ConfigError("train: local view resolution must be divisible by the encoder stride");
    }
  }
  encoder.validate();
  attention.validate(encoder.embed_dim);
  loss.validate();
}

std::string metrics_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%zu,%.9g,%.9g,%.9g,%.3f", m.step, m.loss, m.lr, m.alpha,
                m.diag.n_matches, m.diag.sigma_pos_mean(), m.diag.sigma_neg_mean(), m.diag.hinge_active_fraction(),
                m.wallclock_ms);
  return buf;
}

std::vector<NamedParam<float>*> TrainState::trainable() {
  std::vector<NamedParam<float>*> out;
  for (auto& p : student.parameters()) out.push_back(&p);
  for (auto& p : predictor.parameters()) out.push_back(&p);
  return out;
}

namespace {

CheckpointRecord record(std::string name, const Tensor<float>& t) {
  return {std::move(name), t.shape(), t.values()};
}

// Every tensor of the state under its checkpoint name.
std::vector<std::pair<std::string, Tensor<float>>> named_tensors(TrainState& s) {
  std::vector<std::pair<std::string, Tensor<float>>> out;
  for (auto& p : s.student.parameters()) out.push_back({"student." + p.name, p.value});
  for (auto& b : s.student.buffers()) out.push_back({"student." + b.name, b.value});
  for (auto& p : s.teacher.parameters()) out.push_back({"teacher." + p.name, p.value});
  for (auto& b : s.teacher.buffers()) out.push_back({"teacher." + b.name, b.value});
  for (auto& p : s.predictor.parameters()) out.push_back({p.name, p.value});
  return out;
}

std::vector<std::string> lars_names(TrainState& s) {
  std::vector<std::string> out;
  for (auto& p : s.student.parameters()) out.push_back("lars.student." + p.name);
  for (auto& p : s.predictor.parameters()) out.push_back("lars." + p.name);
  return out;
}

}  // namespace

CheckpointFile TrainState::to_checkpoint() const {
  auto& self = const_cast<TrainState&>(*this);
  CheckpointFile file;
  file.step = step;
  for (auto& [name, t] : named_tensors(self)) file.records.push_back(record(name, t));
  const auto params = self.trainable();
  const auto names = lars_names(self);
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::vector<float> slot = lars.slots.empty() ? std::vector<float>(params[i]->value.size(), 0.f) : lars.slots[i];
    file.records.push_back({names[i], params[i]->value.shape(), std::move(slot)});
  }
  if (queue) {
    file.records.push_back({"queue.data", {queue->capacity(), queue->dim()}, queue->storage()});
    file.records.push_back(
        {"queue.meta", {2}, {static_cast<float>(queue->cursor()), static_cast<float>(queue->size())}});
  }
  return file;
}

void TrainState::restore(const CheckpointFile& file) {
  std::map<std::string, const CheckpointRecord*> by_name;
  for (const auto& r : file.records) by_name[r.name] = &r;
  std::map<std::string, bool> used;
  auto take = [&](const std::string& name, const Shape& shape) -> const CheckpointRecord& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw DataError("checkpoint: missing record " + name);
    if (it->second->shape != shape) {
      throw DataError("checkpoint: record " + name + " has shape " + shape_string(it->second->shape) + ", expected " +
                      shape_string(shape));
    }
    used[name] = true;
    return *it->second;
  };
  // Validate everything before touching the state.
  auto tensors = named_tensors(*this);
  std::vector<const CheckpointRecord*> values;
  for (auto& [name, t] : tensors) values.push_back(&take(name, t.shape()));
  const auto params = trainable();
  const auto lnames = lars_names(*this);
  std::vector<const CheckpointRecord*> slots;
  for (std::size_t i = 0; i < params.size(); ++i) slots.push_back(&take(lnames[i], params[i]->value.shape()));
  const CheckpointRecord* qdata = nullptr;
  const CheckpointRecord* qmeta = nullptr;
  if (queue) {
    qdata = &take("queue.data", {queue->capacity(), queue->dim()});
    qmeta = &take("queue.meta", {2});
    const float cursor = qmeta->data[0], fill = qmeta->data[1];
    if (!(cursor >= 0 && cursor < static_cast<float>(queue->capacity()) && fill >= 0 &&
          fill <= static_cast<float>(queue->capacity()) && cursor == std::floor(cursor) && fill == std::floor(fill))) {
      throw DataError("checkpoint: record queue.meta holds an invalid cursor/fill");
    }
  }
  for (const auto& r : file.records) {
    if (!used.count(r.name)) throw DataError("checkpoint: unknown record " + r.name);
  }
  for (const auto* v : values) {
    for (const float x : v->data)
      if (!std::isfinite(x)) throw DataError("checkpoint: record " + v->name + " holds non-finite values");
  }

  for (std::size_t i = 0; i < tensors.size(); ++i) tensors[i].second.values() = values[i]->data;
  lars.slots.clear();
  for (const auto* s : slots) lars.slots.push_back(s->data);
  if (queue) {
    queue->restore(qdata->data, static_cast<std::size_t>(qmeta->data[0]), static_cast<std::size_t>(qmeta->data[1]));
  }
  step = file.step;
}

TrainState init_state(const TrainConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, {kInitTag});
  Encoder<float> student(cfg.encoder, rng);
  Predictor<float> predictor(cfg.attention, cfg.encoder.embed_dim, rng);
  Encoder<float> teacher = student.clone();
  teacher.set_trainable(false);
  teacher.set_training(false);
  teacher.set_role(Role::teacher);
  std::optional<NegativeQueue<float>> queue;
  if (cfg.loss.mode == LossMode::rank && cfg.loss.negatives != NegativeStrategy::intra) {
    queue.emplace(cfg.queue_capacity, cfg.encoder.embed_dim);
  }
  return TrainState{std::move(student), std::move(teacher), std::move(predictor), {}, std::move(queue), 0};
}

std::vector<ViewRecord> sample_training_views(const Tensor<float>& image, const TrainConfig& cfg, Rng& rng) {
  if (cfg.local_crops == 0) {
    std::vector<ViewRecord> out;
    out.push_back(sample_view(image, rng, cfg.augment));
    out.push_back(sample_view(image, rng, cfg.augment));
    return out;
  }
  return make_multicrop(image, rng, default_multicrop(cfg.augment), 2, cfg.local_crops);
}

std::vector<std::size_t> batch_indices(const TrainConfig& cfg, std::size_t step, std::size_t corpus_size) {
  if (corpus_size == 0) throw DataError("train: empty corpus");
  Rng rng = Rng::stream(cfg.seed, {kBatchTag, step});
  std::vector<std::size_t> idx(cfg.batch);
  for (auto& i : idx) i = rng.below(corpus_size);
  return idx;
}

StepMetrics train_step(TrainState& state, const TrainConfig& cfg, std::span<const Tensor<float>* const> images) {
  const auto t0 = std::chrono::steady_clock::now();
  if (images.empty()) throw DataError("train_step: empty batch");
  const std::size_t n = images.size(), s = state.step;

  std::vector<std::vector<ViewRecord>> views(n);
  for (std::size_t b = 0; b < n; ++b) {
    Rng rng = Rng::stream(cfg.seed, {kViewTag, s, b});
    views[b] = sample_training_views(*images[b], cfg, rng);
  }
  const std::size_t nv = views[0].size();

  state.student.set_training(true);
  state.teacher.set_training(false);
  Tape<float> tape;
  Tape<float> frozen(false);
  std::vector<Tensor<float>> preds(nv), targets(nv);
  std::vector<std::vector<GridPoints>> grids(nv);
  for (std::size_t u = 0; u < nv; ++u) {
    std::vector<const ViewRecord*> slot(n);
    for (std::size_t b = 0; b < n; ++b) slot[b] = &views[b][u];
    const Tensor<float> batch = make_batch<float>(slot);
    const FeatureMap<float> fs = state.student.forward(tape, batch);
    preds[u] = state.predictor.forward(tape, to_sequence(tape, fs.map));
    targets[u] = to_sequence(frozen, state.teacher.forward(frozen, batch).map);
    for (std::size_t b = 0; b < n; ++b) grids[u].push_back(build_grid(views[b][u].geometry, fs.rows(), fs.cols()));
  }

  StepMetrics m;
  m.lr = cosine_lr(s + 1, cfg.steps, cfg.lr, cfg.lr_min, cfg.warmup_steps());
  m.alpha = ema_alpha(s, cfg.steps, cfg.ema_start, cfg.ema_end);
  Rng qrng = Rng::stream(cfg.seed, {kQueueTag, s});
  const NegativeQueue<float>* queue = state.queue ? &*state.queue : nullptr;
  std::vector<Tensor<float>> terms;
  for (std::size_t u = 0; u < nv; ++u) {
    for (std::size_t v = 0; v < nv; ++v) {
      if (u == v || (!cfg.symmetric && v < u)) continue;
      std::vector<MatchSet> matches(n);
      for (std::size_t b = 0; b < n; ++b) matches[b] = match_pairs(grids[u][b], grids[v][b], cfg.t_pos, cfg.distance);
      auto res = contextual_loss(tape, preds[u], targets[v], matches, cfg.loss, queue, &qrng);
      m.diag.merge(res.diag);
      if (!res.empty) terms.push_back(res.loss);
    }
  }

  if (terms.empty()) {
    m.skipped = true;
  } else {
    Tensor<float> total = terms[0];
    for (std::size_t k = 1; k < terms.size(); ++k) total = tape.add(total, terms[k]);
    const Tensor<float> loss = tape.scale(total, 1.f / static_cast<float>(terms.size()));
    m.loss = loss.item();
    auto params = state.trainable();
    for (auto* p : params) p->value.zero_grad();
    tape.backward(loss);
    lars_step<float>(params, state.lars, m.lr, cfg.lars);
    ema_update(state.teacher, state.student, m.alpha);
    if (state.queue) {
      const std::size_t per = targets[0].size() / n;
      for (std::size_t b = 0; b < n; ++b) {
        state.queue->push_from_map(cfg.loss.negatives, targets[0].data().subspan(b * per, per), qrng);
      }
    }
  }
  m.step = ++state.step;
  if (cfg.wallclock) {
    m.wallclock_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return m;
}

void save_checkpoint(const TrainState& state, const std::string& path) { write_checkpoint(path, state.to_checkpoint()); }

void load_checkpoint(TrainState& state, const std::string& path) { state.restore(read_checkpoint(path)); }

namespace {

// Keeps the header and rows with step <= last_step; rows past a checkpoint
// belong to work that was never saved.
void prepare_metrics(const std::string& path, std::size_t last_step) {
  if (last_step == 0 || !std::filesystem::exists(path)) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw DataError("metrics: cannot open " + path);
    out << kMetricsHeader << '\n';
    return;
  }
  std::ifstream in(path);
  std::string line, kept;
  if (!std::getline(in, line) || line != kMetricsHeader) throw DataError("metrics: " + path + " has an unexpected header");
  kept = line + '\n';
  std::size_t expect = 1;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t step = 0;
    try {
      step = std::stoull(line.substr(0, line.find(',')));
    } catch (const std::exception&) {
      throw DataError("metrics: malformed row in " + path + ": " + line);
    }
    if (step > last_step) break;
    if (step != expect) throw DataError("metrics: " + path + " is missing step " + std::to_string(expect));
    kept += line + '\n';
    ++expect;
  }
  if (expect != last_step + 1) throw DataError("metrics: " + path + " ends before the checkpoint step");
  in.close();
  std::ofstream out(path, std::ios::trunc);
  out << kept;
}

}  // namespace

std::vector<StepMetrics> train(TrainState& state, const TrainConfig& cfg, std::span<const Tensor<float>> corpus, std::ostream* log) {
  cfg.validate();
  const std::size_t end = cfg.stop_at ? std::min(cfg.stop_at, cfg.steps) : cfg.steps;
  std::vector<StepMetrics> history;
  std::ofstream metrics;
  if (!cfg.metrics_path.empty()) {
    prepare_metrics(cfg.metrics_path, state.step);
    metrics.open(cfg.metrics_path, std::ios::app);
  }
  while (state.step < end) {
    const auto idx = batch_indices(cfg, state.step, corpus.size());
    std::vector<const Tensor<float>*> batch;
    for (std::size_t i : idx) batch.push_back(&corpus[i]);
    const StepMetrics m = train_step(state, cfg, batch);
    history.push_back(m);
    if (metrics.is_open()) metrics << metrics_row(m) << std::endl;
    if (log && m.skipped) *log << "step " << m.step << ": every match set empty, update skipped\n";
    if (log && (m.step % 50 == 0 || m.step == end)) {
      *log << "step " << m.step << "/" << cfg.steps << " loss " << m.loss << " matches " << m.diag.n_matches
           << std::endl;
    }
    if (!cfg.checkpoint_path.empty() && cfg.checkpoint_every && m.step % cfg.checkpoint_every == 0) {
      save_checkpoint(state, cfg.checkpoint_path);
    }
  }
  if (!cfg.checkpoint_path.empty()) save_checkpoint(state, cfg.checkpoint_path);
  return history;
}

}  // namespace clove
