// evq: train, sample, infill, reconstruct, benchmark and verify.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage / config / file errors.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "evq/bench.hpp"
#include "evq/io.hpp"
#include "evq/pipeline.hpp"
#include "evq/sampler.hpp"
#include "evq/verify.hpp"

using namespace evq;
namespace fs = std::filesystem;

namespace {

constexpr int kOk = 0, kVerifyFailed = 1, kUsage = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const std::vector<std::string> kKnownKeys = {
    "kind", "seed",
    "dataset.generator", "dataset.image_size", "dataset.channels", "dataset.count", "dataset.seed", "dataset.heldout",
    "ae.downsample", "ae.window", "ae.dim", "ae.heads", "ae.layers_per_stage", "ae.mlp_ratio", "ae.shifted_windows",
    "ae.codebook_size", "ae.code_dim", "ae.beta",
    "prior.block", "prior.extend", "prior.dim", "prior.heads", "prior.layers", "prior.mlp_ratio",
    "prior.class_conditional", "prior.codebook_size", "prior.num_classes",
    "train.steps", "train.batch", "train.lr", "train.lr_decay", "train.lr_floor", "train.stop_after", "train.restart_every", "train.log_every",
    "sample.steps", "sample.temperature", "sample.noise_scale"};

/// Config file (optional) + --set overrides + EVQ_SEED.
io::KeyValueConfig load_config(const std::string& path, const std::vector<std::string>& sets) {
  io::KeyValueConfig c = path.empty() ? io::KeyValueConfig{} : io::KeyValueConfig::load(path);
  c.override_with(sets);
  if (const char* s = std::getenv("EVQ_SEED")) c.set("seed", s);
  c.require_known(kKnownKeys);
  return c;
}

std::uint64_t seed_of(const io::KeyValueConfig& c) { return c.get_size("seed", 1); }

DatasetSpec dataset_spec(const io::KeyValueConfig& c) {
  DatasetSpec d;
  d.generator = c.get("dataset.generator", d.generator);
  d.image_size = c.get_size("dataset.image_size", d.image_size);
  d.channels = c.get_size("dataset.channels", d.channels);
  d.count = c.get_size("dataset.count", d.count);
  d.seed = c.get_size("dataset.seed", d.seed);
  return d;
}

AeConfig ae_config(const io::KeyValueConfig& c) {
  AeConfig a;
  a.channels = c.get_size("dataset.channels", a.channels);
  a.downsample = c.get_size("ae.downsample", a.downsample);
  a.window = c.get_size("ae.window", a.window);
  a.dim = c.get_size("ae.dim", a.dim);
  a.heads = c.get_size("ae.heads", a.heads);
  a.layers_per_stage = c.get_size("ae.layers_per_stage", a.layers_per_stage);
  a.mlp_ratio = c.get_size("ae.mlp_ratio", a.mlp_ratio);
  a.shifted_windows = c.get_bool("ae.shifted_windows", a.shifted_windows);
  a.codebook_size = c.get_size("ae.codebook_size", a.codebook_size);
  a.code_dim = c.get_size("ae.code_dim", a.code_dim);
  a.beta = c.get_double("ae.beta", a.beta);
  a.validate();
  return a;
}

MgaConfig prior_config(const io::KeyValueConfig& c, const AeConfig& ae, std::size_t image_size, std::size_t classes) {
  MgaConfig m;
  m.grid_h = m.grid_w = image_size / ae.downsample;
  m.block = c.get_size("prior.block", 2);
  m.extend = c.get_size("prior.extend", 1);
  m.codebook_size = ae.codebook_size;
  m.num_classes = c.get_bool("prior.class_conditional", true) ? classes : 0;
  m.dim = c.get_size("prior.dim", 64);
  m.heads = c.get_size("prior.heads", 4);
  m.layers = c.get_size("prior.layers", 2);
  m.mlp_ratio = c.get_size("prior.mlp_ratio", 4);
  m.validate();
  return m;
}

/// Optimizer settings shared by both stages; `steps` is the decay horizon.
TrainConfig train_config(const io::KeyValueConfig& c, double default_lr, std::size_t steps) {
  TrainConfig tc;
  tc.lr = c.get_double("train.lr", default_lr);
  const std::string decay = c.get("train.lr_decay", "cosine");
  if (decay == "cosine") {
    tc.decay_steps = steps;
  } else if (decay != "none") {
    throw ConfigError("train.lr_decay must be cosine or none");
  }
  tc.lr_floor = c.get_double("train.lr_floor", 0.05);
  if (tc.lr <= 0 || tc.lr_floor < 0 || tc.lr_floor > 1) throw ConfigError("train.lr must be > 0, train.lr_floor in [0,1]");
  return tc;
}

/// Loop bounds: `steps` sets the schedule, `train.stop_after` may end the run earlier.
LoopConfig run_loop(const LoopConfig& lc, const io::KeyValueConfig& c) {
  LoopConfig run = lc;
  run.steps = std::min(lc.steps, c.get_size("train.stop_after", lc.steps));
  return run;
}

SampleConfig sample_config(const io::KeyValueConfig& c) {
  SampleConfig s;
  s.steps = c.get_size("sample.steps", s.steps);
  s.temperature = c.get_double("sample.temperature", s.temperature);
  s.noise_scale = c.get_double("sample.noise_scale", s.noise_scale);
  s.validate();
  return s;
}

/// CSV + JSON-lines metrics next to `prefix` (either may be skipped).
struct MetricsFiles {
  std::ofstream csv, jsonl;
  io::MetricsWriter writer;
  explicit MetricsFiles(const std::string& prefix) {
    if (prefix.empty()) return;
    csv.open(prefix + ".csv");
    jsonl.open(prefix + ".jsonl");
    if (!csv || !jsonl) throw IoError("cannot open metrics files at " + prefix);
    writer = io::MetricsWriter(&csv, &jsonl);
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

struct LoadedVq {
  io::KeyValueConfig cfg;
  std::unique_ptr<LocalAutoencoder<float>> ae;
};

LoadedVq load_vq(const std::string& path) {
  const io::Checkpoint ck = io::load_checkpoint(path);
  LoadedVq v;
  v.cfg = ck.config_values();
  if (v.cfg.get("kind", "") != "vq") throw UsageError(path + " is not a stage-1 checkpoint");
  v.ae = std::make_unique<LocalAutoencoder<float>>(ae_config(v.cfg), ck.seed);
  io::restore_params(ck, v.ae->params);
  return v;
}

struct LoadedPrior {
  io::KeyValueConfig cfg;
  std::unique_ptr<MgaModel<float>> model;
};

LoadedPrior load_prior(const std::string& path, const LoadedVq& vq) {
  const io::Checkpoint ck = io::load_checkpoint(path);
  LoadedPrior p;
  p.cfg = ck.config_values();
  if (p.cfg.get("kind", "") != "prior") throw UsageError(path + " is not a stage-2 checkpoint");
  const std::size_t k = p.cfg.get_size("prior.codebook_size", 0);
  if (k != vq.ae->cfg.codebook_size)
    throw UsageError("codebook size mismatch: prior expects K=" + std::to_string(k) + ", stage-1 has K=" +
                     std::to_string(vq.ae->cfg.codebook_size));
  const AeConfig ae = vq.ae->cfg;
  const std::size_t image_size = vq.cfg.get_size("dataset.image_size", 16);
  MgaConfig mc = prior_config(p.cfg, ae, image_size, p.cfg.get_size("prior.num_classes", 0));
  p.model = std::make_unique<MgaModel<float>>(mc, ck.seed);
  io::restore_params(ck, p.model->params);
  return p;
}

// ---------------------------------------------------------------------------
// Verbs

struct TrainArgs {
  std::string config, out, metrics, resume, vq;
  std::vector<std::string> sets;
};

int cmd_train_vq(const TrainArgs& a) {
  io::KeyValueConfig cfg = load_config(a.config, a.sets);
  cfg.set("kind", "vq");
  const DatasetSpec spec = dataset_spec(cfg);
  const AeConfig ac = ae_config(cfg);
  ac.validate_image(spec.image_size, spec.image_size);
  const std::uint64_t seed = seed_of(cfg);
  const Dataset ds = make_dataset(spec);
  const DataSplit split = DataSplit::tail(ds.images.size(), cfg.get_size("dataset.heldout", spec.count / 10));

  LocalAutoencoder<float> ae(ac, seed);
  LoopConfig lc;
  lc.steps = cfg.get_size("train.steps", 2000);
  TrainConfig tc = train_config(cfg, 1e-3, lc.steps);
  tc.restart_every = cfg.get_size("train.restart_every", 100);
  tc.seed = Rng(seed).split(4).next_u64();
  Stage1Trainer<float> tr(ae, tc);
  lc.batch = cfg.get_size("train.batch", 16);
  lc.seed = Rng(seed).split(1).next_u64();
  std::uint64_t first = 0;
  if (!a.resume.empty()) {
    const auto ck = io::load_checkpoint(a.resume);
    if (ck.config_values().get("kind", "") != "vq") throw UsageError(a.resume + " is not a stage-1 checkpoint");
    io::restore_params(ck, ae.params);
    io::restore_adam(ck, ae.params, tr.optimizer(), "adam");
    first = tr.optimizer().steps();
    if (const auto* u = ck.find("stage1.usage")) {
      if (!u->is_f64 || u->f64.size() != ac.codebook_size) throw IoError("bad stage1.usage record");
      tr.usage().assign(u->f64.begin(), u->f64.end());
    }
  }
  MetricsFiles mf(a.metrics);
  const std::size_t log_every = cfg.get_size("train.log_every", 100);
  train_stage1(tr, ds, split, run_loop(lc, cfg), first, [&](std::uint64_t s, const Stage1Stats& st) {
    mf.writer.row({{"step", static_cast<std::int64_t>(s)}, {"l2", st.l2}, {"vq", st.vq}, {"loss", st.loss},
                   {"perplexity", st.perplexity},
                   {"restarted", static_cast<std::int64_t>(st.restarted)}});
    if (log_every && (s % log_every == 0 || s + 1 == lc.steps))
      std::fprintf(stderr, "step %llu  l2 %.5f  vq %.5f  ppl %.1f\n", static_cast<unsigned long long>(s), st.l2, st.vq,
                   st.perplexity);
  });
  std::vector<ImageBuffer> held;
  for (auto i : split.heldout) held.push_back(ds.images[i]);
  const double mse = reconstruction_mse(ae, held);
  std::fprintf(stderr, "held-out per-pixel MSE %.6f over %zu images\n", mse, held.size());
  std::printf("heldout_mse=%.6f\n", mse);

  io::Checkpoint ck;
  ck.seed = seed;
  ck.config = cfg.to_text();
  io::store_params(ck, ae.params);
  io::store_adam(ck, ae.params, tr.optimizer(), "adam");
  if (!tr.usage().empty())
    ck.add_f64("stage1.usage", {tr.usage().size()}, std::vector<double>(tr.usage().begin(), tr.usage().end()));
  io::save_checkpoint(a.out, ck);
  return kOk;
}

int cmd_train_prior(const TrainArgs& a) {
  if (a.vq.empty()) throw UsageError("train-prior needs --vq");
  const LoadedVq vq = load_vq(a.vq);
  io::KeyValueConfig cfg = load_config(a.config, a.sets);
  cfg.set("kind", "prior");
  // Dataset geometry comes from the stage-1 run.
  for (const auto& [k, v] : vq.cfg.values())
    if (k.rfind("dataset.", 0) == 0) cfg.set(k, v);
  const DatasetSpec spec = dataset_spec(cfg);
  const std::uint64_t seed = seed_of(cfg);
  const Dataset ds = make_dataset(spec);
  const DataSplit split = DataSplit::tail(ds.images.size(), cfg.get_size("dataset.heldout", spec.count / 10));
  MgaConfig mc = prior_config(cfg, vq.ae->cfg, spec.image_size, ds.num_classes);
  cfg.set("prior.codebook_size", std::to_string(mc.codebook_size));
  cfg.set("prior.num_classes", std::to_string(mc.num_classes));

  std::fprintf(stderr, "tokenizing %zu images\n", ds.images.size());
  const auto train_grids = tokenize_images(*vq.ae, ds, split.train);
  const auto held_grids = tokenize_images(*vq.ae, ds, split.heldout);
  const auto train_labels = labels_of(ds, split.train), held_labels = labels_of(ds, split.heldout);
  const std::size_t used = codes_used(train_grids);

  MgaModel<float> model(mc, seed);
  LoopConfig lc;
  lc.steps = cfg.get_size("train.steps", 1500);
  TrainConfig tc = train_config(cfg, 3e-4, lc.steps);
  tc.seed = Rng(seed).split(2).next_u64();
  Stage2Trainer<float> tr(model, tc);
  lc.batch = cfg.get_size("train.batch", 16);
  lc.seed = Rng(seed).split(3).next_u64();
  std::uint64_t first = 0;
  if (!a.resume.empty()) {
    const auto ck = io::load_checkpoint(a.resume);
    const auto rc = ck.config_values();
    if (rc.get("kind", "") != "prior") throw UsageError(a.resume + " is not a stage-2 checkpoint");
    if (rc.get_size("prior.codebook_size", 0) != mc.codebook_size) throw UsageError("codebook size mismatch on resume");
    io::restore_params(ck, model.params);
    io::restore_adam(ck, model.params, tr.optimizer(), "adam");
    first = tr.optimizer().steps();
  }
  MetricsFiles mf(a.metrics);
  const std::size_t log_every = cfg.get_size("train.log_every", 100);
  const auto& labels = mc.num_classes ? train_labels : std::vector<std::size_t>{};
  train_stage2(tr, train_grids, labels, run_loop(lc, cfg), first, [&](std::uint64_t s, const Stage2Stats& st) {
    mf.writer.row({{"step", static_cast<std::int64_t>(s)}, {"masked_ce", st.loss}, {"accuracy", st.accuracy()},
                   {"masked", static_cast<std::int64_t>(st.masked)}});
    if (log_every && (s % log_every == 0 || s + 1 == lc.steps))
      std::fprintf(stderr, "step %llu  masked CE %.4f  acc %.3f\n", static_cast<unsigned long long>(s), st.loss,
                   st.accuracy());
  });
  const auto ev = tr.evaluate(held_grids, seed, mc.num_classes ? held_labels : std::vector<std::size_t>{});
  std::fprintf(stderr, "held-out masked-token accuracy %.4f (chance %.4f, %zu codes used), CE %.4f\n", ev.accuracy(),
               1.0 / static_cast<double>(used), used, ev.loss);
  std::printf("heldout_accuracy=%.6f\nchance=%.6f\n", ev.accuracy(), 1.0 / static_cast<double>(used));

  io::Checkpoint ck;
  ck.seed = seed;
  ck.config = cfg.to_text();
  io::store_params(ck, model.params);
  io::store_adam(ck, model.params, tr.optimizer(), "adam");
  io::save_checkpoint(a.out, ck);
  return kOk;
}

struct GenArgs {
  std::string vq, prior, out_dir, tokens, image, mask, pixel_mask, config;
  std::vector<std::string> sets;
  std::size_t count = 4;
  std::optional<std::size_t> class_id;
  std::optional<std::uint64_t> seed;
};

std::uint64_t generation_seed(const GenArgs& a, const io::KeyValueConfig& cfg) {
  if (const char* s = std::getenv("EVQ_SEED")) return std::stoull(s);
  return a.seed ? *a.seed : cfg.get_size("seed", 1);
}

int cmd_sample(const GenArgs& a) {
  const LoadedVq vq = load_vq(a.vq);
  const LoadedPrior pr = load_prior(a.prior, vq);
  io::KeyValueConfig cfg = pr.cfg;
  cfg.override_with(a.sets);
  SampleConfig sc = sample_config(cfg);
  if (a.class_id) {
    if (*a.class_id >= pr.model->cfg.num_classes) throw UsageError("class id out of range for this prior");
    sc.class_id = a.class_id;
  }
  fs::create_directories(a.out_dir);
  const Rng base(generation_seed(a, cfg));
  for (std::size_t i = 0; i < a.count; ++i) {
    Rng rng = base.split(i);
    const auto r = sample_image(*pr.model, vq.ae.get(), sc, rng);
    char name[64];
    std::snprintf(name, sizeof name, "sample_%04zu", i);
    const fs::path stem = fs::path(a.out_dir) / name;
    io::write_pnm(stem.string() + (r.image.channels == 1 ? ".pgm" : ".ppm"), r.image);
    io::write_tokens(stem.string() + ".tok", r.tokens);
    std::printf("%s calls=%zu\n", stem.string().c_str(), r.trace.model_calls());
  }
  return kOk;
}

int cmd_infill(const GenArgs& a) {
  const LoadedVq vq = load_vq(a.vq);
  const LoadedPrior pr = load_prior(a.prior, vq);
  io::KeyValueConfig cfg = pr.cfg;
  cfg.override_with(a.sets);
  SampleConfig sc = sample_config(cfg);
  TokenGrid grid;
  std::optional<ImageBuffer> original;
  if (!a.tokens.empty() == !a.image.empty()) throw UsageError("infill needs exactly one of --tokens or --image");
  if (!a.tokens.empty()) {
    grid = io::read_tokens(a.tokens);
  } else {
    original = io::read_pnm(a.image);
    grid = vq.ae->tokenize(*original);
  }
  const BlockPlan& plan = pr.model->plan();
  if (grid.height != plan.grid_h || grid.width != plan.grid_w) throw UsageError("token grid does not match the prior");
  std::vector<std::uint8_t> mask;
  if (!a.mask.empty() == !a.pixel_mask.empty()) throw UsageError("infill needs exactly one of --mask or --pixel-mask");
  if (!a.mask.empty()) {
    mask = io::read_mask(a.mask, grid.height, grid.width);
  } else {
    const std::size_t f = vq.ae->cfg.downsample;
    mask = token_mask_from_pixels(io::read_mask(a.pixel_mask, grid.height * f, grid.width * f), grid.height * f,
                                  grid.width * f, f);
  }
  InfillSpec spec{grid, a.class_id};
  if (a.class_id && *a.class_id >= pr.model->cfg.num_classes) throw UsageError("class id out of range for this prior");
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) spec.tokens.cells[i] = TokenGrid::kMask;
  for (auto c : spec.tokens.cells)
    if (c >= static_cast<std::int32_t>(pr.model->codebook_size()))
      throw UsageError("token grid holds codes outside the codebook");
  fs::create_directories(a.out_dir);
  const Rng base(generation_seed(a, cfg));
  for (std::size_t i = 0; i < a.count; ++i) {
    Rng rng = base.split(i);
    const auto r = infill(*pr.model, vq.ae.get(), spec, sc, rng);
    char name[64];
    std::snprintf(name, sizeof name, "infill_%04zu", i);
    const fs::path stem = fs::path(a.out_dir) / name;
    ImageBuffer img = original ? io::hconcat({*original, r.image}) : r.image;
    io::write_pnm(stem.string() + (img.channels == 1 ? ".pgm" : ".ppm"), img);
    io::write_tokens(stem.string() + ".tok", r.tokens);
    std::printf("%s calls=%zu\n", stem.string().c_str(), r.trace.model_calls());
  }
  return kOk;
}

int cmd_reconstruct(const GenArgs& a) {
  const LoadedVq vq = load_vq(a.vq);
  std::vector<ImageBuffer> images;
  if (!a.image.empty()) {
    images.push_back(io::read_pnm(a.image));
  } else {
    const DatasetSpec spec = dataset_spec(vq.cfg);
    const Dataset ds = make_dataset(spec);
    const DataSplit split = DataSplit::tail(ds.images.size(), vq.cfg.get_size("dataset.heldout", spec.count / 10));
    for (std::size_t i = 0; i < a.count && i < split.heldout.size(); ++i) images.push_back(ds.images[split.heldout[i]]);
  }
  fs::create_directories(a.out_dir);
  double total = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double mse = reconstruction_mse(*vq.ae, {images[i]});
    total += mse;
    const ImageBuffer rec = vq.ae->decode_tokens(vq.ae->tokenize(images[i]));
    char name[64];
    std::snprintf(name, sizeof name, "recon_%04zu", i);
    const fs::path stem = fs::path(a.out_dir) / name;
    io::write_pnm(stem.string() + (rec.channels == 1 ? ".pgm" : ".ppm"), io::hconcat({images[i], rec}));
    std::printf("%s mse=%.6f\n", stem.string().c_str(), mse);
  }
  std::printf("mean_mse=%.6f\n", images.empty() ? 0.0 : total / static_cast<double>(images.size()));
  return kOk;
}

struct BenchArgs {
  std::vector<std::size_t> sides{32, 64, 128};
  std::size_t block = 8, extend = 4, layers = 1, dim = 16, heads = 8, steps = 8, trials = 1;
  std::size_t measure_max_side = 64;
  std::string csv, jsonl;
  bool sweep = true;
};

int cmd_bench(const BenchArgs& a) {
  std::ofstream csv_file, jsonl_file;
  std::ostream* csv = &std::cout;
  std::ostream* jsonl = nullptr;
  if (!a.csv.empty()) {
    csv_file.open(a.csv);
    csv = &csv_file;
  }
  if (!a.jsonl.empty()) {
    jsonl_file.open(a.jsonl);
    jsonl = &jsonl_file;
  }
  if ((csv != &std::cout && !*csv) || (jsonl && !*jsonl)) throw IoError("cannot open bench output");
  io::MetricsWriter cost(csv, jsonl);
  for (std::size_t side : a.sides) {
    bench::CostConfig c{side, side, a.block, a.extend, a.layers, a.dim, a.heads};
    const bool measure = side <= a.measure_max_side;
    const bench::CostReport r = measure ? bench::measured_cost(c, a.trials) : bench::analytic_cost(c);
    cost.row({{"report", std::string("cost")},
              {"side", static_cast<std::int64_t>(side)},
              {"block", static_cast<std::int64_t>(a.block)},
              {"extend", static_cast<std::int64_t>(a.extend)},
              {"global_tokens", static_cast<std::int64_t>(r.global_tokens)},
              {"mga_seq_len", static_cast<std::int64_t>(r.mga_seq_len)},
              {"num_blocks", static_cast<std::int64_t>(r.num_blocks)},
              {"score_ratio_per_block", r.score_ratio_per_block},
              {"score_ratio_full_grid", r.score_ratio_full_grid},
              {"global_attention_flops", r.global_attention_flops},
              {"mga_attention_flops_full_grid", r.mga_attention_flops_full_grid},
              {"mga_peak_bytes", static_cast<std::int64_t>(r.measured_mga_peak_bytes)},
              {"global_peak_bytes", static_cast<std::int64_t>(r.measured_global_peak_bytes)},
              {"mga_oom", static_cast<std::int64_t>(r.mga_oom)},
              {"global_oom", static_cast<std::int64_t>(r.global_oom)},
              {"mga_ms", r.mga_ms},
              {"global_ms", r.global_ms}});
  }
  if (!a.sweep) return kOk;

  // Sampling cost over block size (fixed T) and over T (fixed block size).
  io::MetricsWriter sweep(csv, jsonl);
  *csv << '\n';
  auto run = [&](std::size_t ws, std::size_t steps, const char* kind) {
    MgaConfig mc;
    mc.grid_h = mc.grid_w = 16;
    mc.block = ws;
    mc.extend = 2;
    mc.codebook_size = 16;
    mc.dim = 16;
    mc.heads = 2;
    mc.layers = 1;
    mc.mlp_ratio = 2;
    MgaModel<float> m(mc, 3);
    SampleConfig sc;
    sc.steps = steps;
    Rng rng(17);
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = sample_image<MgaModel<float>, NoDecoder>(m, nullptr, sc, rng);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    sweep.row({{"report", std::string(kind)},
               {"block", static_cast<std::int64_t>(ws)},
               {"steps", static_cast<std::int64_t>(steps)},
               {"model_calls", static_cast<std::int64_t>(out.trace.model_calls())},
               {"wall_ms", ms}});
  };
  for (std::size_t ws : {1, 2, 4, 8, 16}) run(ws, a.steps, "block_sweep");
  for (std::size_t t : {1, 2, 4, 8, 16}) run(4, t, "steps_ablation");
  return kOk;
}

struct VerifyArgs {
  std::string vq;
  std::size_t instances = 10;
  std::size_t latent = 16;
};

int cmd_verify(const VerifyArgs& a) {
  std::vector<verify::CheckResult> results;
  results.push_back(verify::check_gradients(a.instances, 1e-4, 1));
  results.push_back(verify::check_schedule());
  results.push_back(verify::check_degenerate_global());
  results.push_back(verify::check_degenerate_raster());
  if (!a.vq.empty()) {
    const LoadedVq vq = load_vq(a.vq);
    results.push_back(verify::check_locality(*vq.ae, a.latent, 41));
  } else {
    LocalAutoencoder<float> ae(AeConfig{}, 1);
    results.push_back(verify::check_locality(ae, a.latent, 41));
  }
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%s %s: %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str());
    ok = ok && r.passed;
  }
  return ok ? kOk : kVerifyFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-grained VQ image generation: training, sampling and verification"};
  app.require_subcommand(1);

  TrainArgs tvq, tpr;
  auto* s_tvq = app.add_subcommand("train-vq", "Train the stage-1 local autoencoder and codebook");
  s_tvq->add_option("-c,--config", tvq.config, "key=value config file");
  s_tvq->add_option("--set", tvq.sets, "Config override key=value (repeatable)");
  s_tvq->add_option("-o,--out", tvq.out, "Checkpoint to write")->required();
  s_tvq->add_option("--metrics", tvq.metrics, "Metrics file prefix (.csv and .jsonl)");
  s_tvq->add_option("--resume", tvq.resume, "Continue from this checkpoint");

  auto* s_tpr = app.add_subcommand("train-prior", "Train the stage-2 multi-grained prior on frozen tokens");
  s_tpr->add_option("-c,--config", tpr.config, "key=value config file");
  s_tpr->add_option("--set", tpr.sets, "Config override key=value (repeatable)");
  s_tpr->add_option("--vq", tpr.vq, "Stage-1 checkpoint")->required();
  s_tpr->add_option("-o,--out", tpr.out, "Checkpoint to write")->required();
  s_tpr->add_option("--metrics", tpr.metrics, "Metrics file prefix (.csv and .jsonl)");
  s_tpr->add_option("--resume", tpr.resume, "Continue from this checkpoint");

  GenArgs smp, inf, rec;
  auto add_gen = [](CLI::App* s, GenArgs& g, bool prior) {
    s->add_option("--vq", g.vq, "Stage-1 checkpoint")->required();
    if (prior) s->add_option("--prior", g.prior, "Stage-2 checkpoint")->required();
    s->add_option("-o,--out-dir", g.out_dir, "Output directory")->required();
    s->add_option("-n,--count", g.count, "Number of outputs");
    s->add_option("--seed", g.seed, "Seed (EVQ_SEED overrides)");
    if (prior) {
      s->add_option("--class", g.class_id, "Class id for conditional generation");
      s->add_option("--set", g.sets, "Sampling override, e.g. sample.steps=8");
    }
  };
  auto* s_smp = app.add_subcommand("sample", "Generate images block by block");
  add_gen(s_smp, smp, true);
  auto* s_inf = app.add_subcommand("infill", "Regenerate masked token cells of an image or token grid");
  add_gen(s_inf, inf, true);
  s_inf->add_option("--tokens", inf.tokens, "Token grid file");
  s_inf->add_option("--image", inf.image, "PGM/PPM image, tokenized with the stage-1 encoder");
  s_inf->add_option("--mask", inf.mask, "Token-cell mask: one byte per cell, 1 = generate");
  s_inf->add_option("--pixel-mask", inf.pixel_mask, "Pixel mask: one byte per pixel, any overlap marks a cell");
  auto* s_rec = app.add_subcommand("reconstruct", "Encode, quantize and decode; write side-by-side images");
  add_gen(s_rec, rec, false);
  s_rec->add_option("--image", rec.image, "Single PGM/PPM image instead of held-out dataset images");

  BenchArgs ba;
  auto* s_bench = app.add_subcommand("bench", "Attention cost model, memory measurement and sampling sweeps");
  s_bench->add_option("--sides", ba.sides, "Latent sides for cost reports")->delimiter(',');
  s_bench->add_option("--block", ba.block, "W_s");
  s_bench->add_option("--extend", ba.extend, "E_s");
  s_bench->add_option("--layers", ba.layers);
  s_bench->add_option("--dim", ba.dim);
  s_bench->add_option("--heads", ba.heads);
  s_bench->add_option("--steps", ba.steps, "T for the block-size sweep");
  s_bench->add_option("--trials", ba.trials, "Measurement repeats (minimum reported)");
  s_bench->add_option("--measure-max-side", ba.measure_max_side, "Measure peaks only up to this side");
  s_bench->add_option("--csv", ba.csv, "CSV output (default stdout)");
  s_bench->add_option("--jsonl", ba.jsonl, "JSON-lines output");
  s_bench->add_flag("!--no-sweep", ba.sweep, "Skip the sampling sweeps");

  VerifyArgs va;
  auto* s_ver = app.add_subcommand("verify", "Gradient, schedule, degeneracy and locality checks");
  s_ver->add_option("--vq", va.vq, "Stage-1 checkpoint for the locality check (default: fresh model)");
  s_ver->add_option("--instances", va.instances, "Random instances per gradient check");
  s_ver->add_option("--latent", va.latent, "Latent side for the locality check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*s_tvq) return cmd_train_vq(tvq);
    if (*s_tpr) return cmd_train_prior(tpr);
    if (*s_smp) return cmd_sample(smp);
    if (*s_inf) return cmd_infill(inf);
    if (*s_rec) return cmd_reconstruct(rec);
    if (*s_bench) return cmd_bench(ba);
    if (*s_ver) return cmd_verify(va);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "file error: %s\n", e.what());
    return kUsage;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "shape error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kUsage;
  }
  return kUsage;
}
