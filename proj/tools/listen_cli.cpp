// Command-line front end: training stages, evaluation, grid search,
// latency benchmark, streaming monitor and checkpoint export.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>

#include "listen/listen.hpp"

namespace fs = std::filesystem;
using namespace listenkit;
using json = nlohmann::json;

namespace {

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string checkpoint;
  std::string out;
};

struct DataOptions {
  std::string manifest;
  std::string test_manifest;
  std::size_t synthetic = 20;  // clips per mode when no manifest is given
  double test_fraction = 0.33;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--seed", c.seed, "Random seed");
  cmd->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  cmd->add_option("--checkpoint", c.checkpoint, "Input checkpoint");
  cmd->add_option("--out", c.out, "Output path");
}

void add_data(CLI::App* cmd, DataOptions& d) {
  cmd->add_option("--manifest", d.manifest, "Labeled clip manifest (JSON lines)")->check(CLI::ExistingFile);
  cmd->add_option("--test-manifest", d.test_manifest, "Separate test manifest")->check(CLI::ExistingFile);
  cmd->add_option("--synthetic", d.synthetic, "Synthetic clips per mode when no manifest is given");
  cmd->add_option("--test-fraction", d.test_fraction, "Held-out fraction when splitting one corpus");
}

json load_config(const Common& c) {
  if (c.config.empty()) return json::object();
  std::ifstream in(c.config);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError("config '" + c.config + "': " + e.what());
  }
}

template <typename T>
T section(const json& cfg, const std::string& key) {
  return cfg.contains(key) ? cfg.at(key).get<T>() : T{};
}

// A grid id (L19, I05) or an explicit config object.
ModelConfig resolve_model(const json& cfg, const std::string& flag) {
  if (!flag.empty()) {
    return flag[0] == 'I' ? find_config(impact_grid(), flag) : find_config(listen_grid(), flag);
  }
  if (cfg.contains("model")) {
    const auto& m = cfg.at("model");
    if (m.is_string()) return resolve_model(json::object(), m.get<std::string>());
    auto c = m.get<ModelConfig>();
    c.validate();
    return c;
  }
  return find_config(listen_grid(), "L19");
}

std::vector<LabeledClip> labeled_clips(const std::string& manifest, std::size_t per_mode, Prng& prng) {
  if (!manifest.empty()) return load_manifest_clips(read_manifest(manifest));
  return synth_corpus(cnc_mode_specs(), per_mode, prng);
}

std::pair<Dataset<float>, Dataset<float>> train_test(const DataOptions& d, Prng& prng, const SpectrogramFrontend& fe) {
  const auto all = make_dataset<float>(labeled_clips(d.manifest, d.synthetic, prng), fe);
  if (!d.test_manifest.empty()) return {all, make_dataset<float>(load_manifest_clips(read_manifest(d.test_manifest)), fe)};
  const auto split = split_indices(all.size(), 1.0 - d.test_fraction, prng);
  return {subset(all, split.train), subset(all, split.test)};
}

std::size_t class_count(const Dataset<float>& data) {
  int mx = 0;
  for (const auto& ex : data) mx = std::max(mx, ex.label);
  return static_cast<std::size_t>(std::max(mx + 1, 2));
}

ModeTaxonomy labels_for(std::size_t classes) {
  auto t = cnc_taxonomy();
  if (classes <= t.size()) {
    t.resize(classes);
    return t;
  }
  ModeTaxonomy g;
  for (std::size_t i = 0; i < classes; ++i) g.push_back({static_cast<int>(i), "Mode " + std::to_string(i), "", ""});
  return g;
}

fs::path out_dir(const Common& c, const std::string& fallback) {
  fs::path p = c.out.empty() ? fs::path(fallback) : fs::path(c.out);
  fs::create_directories(p);
  return p;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------- subcommands

int cmd_pretrain(const Common& c, const DataOptions& d, const std::string& model_id) {
  const json cfg = load_config(c);
  const auto model = resolve_model(cfg, model_id);
  const auto pre = section<PretrainConfig>(cfg, "pretrain");
  Prng prng(c.seed);
  SpectrogramFrontend fe;
  std::vector<Tensor<float>> corpus;
  for (auto& ex : make_dataset<float>(labeled_clips(d.manifest, d.synthetic, prng), fe)) corpus.push_back(std::move(ex.image));
  auto pair = make_pair<float>(model, prng.fork(1).next());
  std::cerr << "pretraining " << model.name << " on " << corpus.size() << " clips\n";
  const auto curve = pretrain_run<float>(pair, corpus, pre, prng, [](const EpochLosses& e, const StudentTeacherPair<float>&) {
    std::cerr << "epoch " << e.epoch << " total " << e.total << " local " << e.local << " global " << e.global << '\n';
  });
  const auto dir = out_dir(c, "pretrain_out");
  ModelBundle b;
  b.config = model;
  b.preprocessing = fe.settings();
  b.backbone = pair.student;
  b.decoder = pair.decoder;
  b.metadata = {{"stage", "pretrain"}, {"seed", c.seed}, {"pretrain", pre}, {"clips", corpus.size()}};
  save_checkpoint(b, dir / "pretrained.lstn");
  write_loss_csv(dir / "loss.csv", curve);
  std::cout << json{{"checkpoint", (dir / "pretrained.lstn").string()}, {"final_total", curve.back().total}}.dump() << '\n';
  return 0;
}

int cmd_distill(const Common& c, const DataOptions& d, const std::string& model_id) {
  if (c.checkpoint.empty()) throw ConfigError("distill: --checkpoint (parent) is required");
  const json cfg = load_config(c);
  const auto parent_bundle = load_checkpoint(c.checkpoint);
  const FrozenParent<float> parent{parent_bundle.backbone, parent_bundle.preprocessing};
  const auto student_cfg = resolve_model(cfg, model_id);
  const auto dcfg = section<DistillConfig>(cfg, "distill");
  Prng prng(c.seed);
  SpectrogramFrontend fe(parent_bundle.preprocessing);
  auto [train, held] = train_test(d, prng, fe);
  auto images = [](Dataset<float>& ds) {
    std::vector<Tensor<float>> out;
    for (auto& ex : ds) out.push_back(std::move(ex.image));
    return out;
  };
  const auto train_im = images(train), held_im = images(held);
  DistillState<float> s(build_backbone<float>(student_cfg, prng.fork(1).next()),
                        build_projection<float>(student_cfg.embed_dim, parent.backbone.dim(), prng.fork(2).next()), dcfg.lr);
  const auto curve = distill_run(parent, fe.settings(), s, train_im, held_im, dcfg, prng, [](const DistillEpoch& e) {
    std::cerr << "epoch " << e.epoch << " steps " << e.steps << " train " << e.train_mse << " heldout " << e.heldout_mse
              << " cosine " << e.heldout_cosine << '\n';
  });
  const auto dir = out_dir(c, "distill_out");
  save_checkpoint(export_student(s.student, fe.settings(),
                                 {{"stage", "distill"}, {"seed", c.seed}, {"parent", parent_bundle.config}, {"distill", dcfg}}),
                  dir / "student.lstn");
  write_distill_csv(dir / "distill.csv", curve);
  std::cout << json{{"checkpoint", (dir / "student.lstn").string()}, {"heldout_mse", curve.back().heldout_mse}}.dump() << '\n';
  return 0;
}

int cmd_finetune(const Common& c, const DataOptions& d, const std::string& model_id) {
  const json cfg = load_config(c);
  const auto ft = section<FinetuneConfig>(cfg, "finetune");
  Prng prng(c.seed);
  std::optional<ModelBundle> init;
  if (!c.checkpoint.empty()) init = load_checkpoint(c.checkpoint);
  SpectrogramFrontend fe(init ? init->preprocessing : PreprocessingSettings{});
  auto [train, test] = train_test(d, prng, fe);
  const std::size_t classes = std::max(class_count(train), class_count(test));
  Classifier<float> model = init ? Classifier<float>{init->backbone, build_head<float>(init->backbone.dim(), classes, prng.fork(3).next())}
                                 : build_classifier<float>(resolve_model(cfg, model_id), classes, prng.fork(3).next());
  std::cerr << "fine-tuning " << model.backbone.config.name << " on " << train.size() << " clips, " << classes << " classes\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto curve = finetune(model, train, ft, prng, [](std::size_t e, double loss) {
    if (e % 10 == 0) std::cerr << "epoch " << e << " loss " << loss << '\n';
  });
  const double wall = seconds_since(t0);
  const auto labels = labels_for(classes);
  const auto report = evaluate(model, test);
  const auto dir = out_dir(c, "finetune_out");
  save_checkpoint(bundle_from_classifier(model, fe.settings(), labels, {{"stage", "finetune"}, {"seed", c.seed}, {"finetune", ft}}),
                  dir / "classifier.lstn");
  auto rj = report.to_json(labels);
  rj["finetune_seconds"] = wall;
  write_json(dir / "report.json", rj);
  {
    std::ofstream out(dir / "loss.csv");
    out.precision(17);
    out << "epoch,loss\n";
    for (std::size_t i = 0; i < curve.size(); ++i) out << i + 1 << ',' << curve[i] << '\n';
  }
  std::cout << json{{"checkpoint", (dir / "classifier.lstn").string()}, {"macro_f1", report.macro}, {"finetune_seconds", wall}}.dump()
            << '\n';
  return 0;
}

int cmd_eval(const Common& c, const DataOptions& d) {
  if (c.checkpoint.empty()) throw ConfigError("eval: --checkpoint is required");
  const auto bundle = load_checkpoint(c.checkpoint);
  const auto model = classifier_from_bundle(bundle);
  Prng prng(c.seed);
  SpectrogramFrontend fe(bundle.preprocessing);
  const auto data = make_dataset<float>(labeled_clips(d.manifest, d.synthetic, prng), fe);
  const auto report = evaluate(model, data).to_json(bundle.labels);
  if (c.out.empty()) {
    std::cout << report.dump(2) << '\n';
  } else {
    write_json(c.out, report);
  }
  return 0;
}

struct GridOptions {
  std::string family = "L";
  std::size_t tasks = 2;
  int classes = 4;
  std::size_t train_per_class = 8;
  std::size_t test_per_class = 4;
  std::size_t epochs = 20;
};

int cmd_gridsearch(const Common& c, const GridOptions& g) {
  const json cfg = load_config(c);
  const GridSpec spec = g.family == "I" ? impact_grid() : g.family == "L" ? listen_grid() : throw ConfigError("family must be L or I");
  auto grid = enumerate_grid(spec);
  if (cfg.contains("only")) {
    const auto keep = cfg.at("only").get<std::set<std::string>>();
    std::erase_if(grid, [&](const ModelConfig& m) { return !keep.count(m.name); });
  }
  Prng prng(c.seed);
  SpectrogramFrontend fe;
  const auto suite = synthetic_suite(g.tasks, g.classes, g.train_per_class, g.test_per_class, prng, fe);
  const auto dir = out_dir(c, "grid_out");
  GridBudget budget;
  budget.finetune = cfg.contains("finetune") ? cfg.at("finetune").get<FinetuneConfig>() : FinetuneConfig{};
  if (!cfg.contains("finetune")) budget.finetune.epochs = g.epochs;
  budget.seed = c.seed;
  budget.store = dir / "trials";
  if (!c.checkpoint.empty()) {
    const auto parent_bundle = load_checkpoint(c.checkpoint);
    const auto dcfg = section<DistillConfig>(cfg, "distill");
    std::vector<Tensor<float>> images;
    for (const auto& t : suite.tasks)
      for (const auto& ex : t.train) images.push_back(ex.image);
    budget.init = [parent = FrozenParent<float>{parent_bundle.backbone, parent_bundle.preprocessing}, images, dcfg,
                   pre = fe.settings()](const ModelConfig& m, std::uint64_t seed) {
      Prng p(seed);
      DistillState<float> s(build_backbone<float>(m, p.next()), build_projection<float>(m.embed_dim, parent.backbone.dim(), p.next()),
                            dcfg.lr);
      distill_run(parent, pre, s, images, {}, dcfg, p);
      return s.student;
    };
  }
  const auto results = run_grid(grid, suite, budget, [](const TrialResult& r, bool reused) {
    std::cerr << r.id << (reused ? " (cached)" : "") << ": " << (r.ok ? "mean F1 " + std::to_string(r.mean_f1) : "failed: " + r.error)
              << '\n';
  });
  write_results_csv(dir / "results.csv", results);
  const SelectionPolicy policy = cfg.contains("selection") ? cfg.at("selection").get<SelectionPolicy>()
                                 : g.family == "I"         ? SelectionPolicy::parent_family()
                                                           : SelectionPolicy::child_family();
  const auto chosen = select_config(results, policy);
  const json sel = {{"selected", chosen}, {"policy", policy}, {"trials", results.size()}};
  write_json(dir / "selection.json", sel);
  std::cout << sel.dump() << '\n';
  return 0;
}

struct BenchOptions {
  std::size_t clips = 300;
  std::size_t warmup = 5;
  double budget_ms = kDefaultBudgetMs;
  std::string wav;
};

int cmd_bench(const Common& c, const BenchOptions& o, const std::string& model_id) {
  const json cfg = load_config(c);
  Prng prng(c.seed);
  const ModelBundle bundle = c.checkpoint.empty()
                                 ? bundle_from_classifier(build_classifier<float>(resolve_model(cfg, model_id), 10, prng.next()),
                                                          PreprocessingSettings{}, cnc_taxonomy())
                                 : load_checkpoint(c.checkpoint);
  const MonitorModel model(bundle);
  std::vector<AudioClip> clips;
  if (!o.wav.empty()) {
    WavSource src(o.wav, model.sample_rate());
    while (auto clip = src.next()) clips.push_back(std::move(*clip));
  } else {
    const auto specs = cnc_mode_specs();
    for (std::size_t i = 0; i < std::min<std::size_t>(o.clips, 50); ++i) clips.push_back(synth_mode_clip(specs[i % specs.size()], prng));
  }
  if (clips.empty()) throw InputError("bench: no clips");
  for (std::size_t i = 0; i < o.warmup; ++i) infer_clip(model, clips[i % clips.size()], 0, o.budget_ms);
  std::vector<ModeEvent> events;
  std::vector<LatencyRecord> records;
  for (std::size_t i = 0; i < o.clips; ++i) {
    events.push_back(infer_clip(model, clips[i % clips.size()], i, o.budget_ms));
    records.push_back(events.back().latency);
  }
  const auto stats = latency_stats(records, o.budget_ms);
  const auto dir = out_dir(c, "bench_out");
  const json j = {{"model", bundle.config}, {"params_blocks", count_params(bundle.backbone, ParamScope::blocks)}, {"latency", stats.to_json()}};
  write_json(dir / "latency.json", j);
  write_latency_csv(dir / "latency.csv", events);
  std::cout << j.dump() << '\n';
  return 0;
}

struct MonitorCli {
  std::string wav;
  std::string pcm;
  std::vector<std::string> sinks{"stdout"};
  std::size_t capacity = 4;
  double budget_ms = kDefaultBudgetMs;
  double speed = 1.0;
};

int cmd_monitor(const Common& c, const MonitorCli& m) {
  if (c.checkpoint.empty()) throw ConfigError("monitor: --checkpoint is required");
  if (m.wav.empty() == m.pcm.empty()) throw ConfigError("monitor: give exactly one of --wav or --pcm");
  const MonitorModel model(load_checkpoint(c.checkpoint));
  std::unique_ptr<ClipSource> source;
  std::ifstream pcm_file;
  if (!m.wav.empty()) {
    source = std::make_unique<WavSource>(m.wav, model.sample_rate(), m.speed);
  } else if (m.pcm == "-") {
    source = std::make_unique<RawPcmSource>(std::cin, model.sample_rate(), "stdin");
  } else {
    pcm_file.open(m.pcm, std::ios::binary);
    if (!pcm_file) throw IoError("cannot open '" + m.pcm + "'");
    source = std::make_unique<RawPcmSource>(pcm_file, model.sample_rate(), m.pcm);
  }
  std::vector<std::unique_ptr<EventSink>> owned;
  std::vector<EventSink*> sinks;
  for (const auto& s : m.sinks) {
    owned.push_back(make_sink(s));
    sinks.push_back(owned.back().get());
  }
  MonitorOptions opt;
  opt.capacity = m.capacity;
  opt.budget_ms = m.budget_ms;
  opt.warn = [](const std::string& w) { std::cerr << "warning: " << w << '\n'; };
  MonitorSummary s;
  {
    Publisher pub(sinks);
    s = run_monitor(model, *source, &pub, opt);
  }
  json summary = {{"processed", s.processed}, {"drops", s.drops}, {"skipped", s.skipped}};
  if (!s.latencies.empty()) summary["latency"] = latency_stats(s.latencies, m.budget_ms).to_json();
  std::cerr << summary.dump() << '\n';
  return 0;
}

int cmd_export(const Common& c, bool keep_decoder) {
  if (c.checkpoint.empty() || c.out.empty()) throw ConfigError("export: --checkpoint and --out are required");
  auto bundle = load_checkpoint(c.checkpoint);
  if (!keep_decoder) bundle.decoder.reset();
  save_checkpoint(bundle, c.out);
  std::cout << json{{"out", c.out}, {"bytes", fs::file_size(c.out)}, {"header", checkpoint_header(bundle)}}.dump() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"listen: acoustic machining-mode monitoring toolkit"};
  app.require_subcommand(1);
  Common common;
  DataOptions data;
  std::string model_id;

  auto* pretrain = app.add_subcommand("pretrain", "Masked student-teacher pretraining");
  auto* distill = app.add_subcommand("distill", "Distil a parent backbone into a smaller student");
  auto* finetune_cmd = app.add_subcommand("finetune", "Fine-tune a classifier and evaluate it");
  auto* eval = app.add_subcommand("eval", "Evaluate a classifier checkpoint");
  auto* grid = app.add_subcommand("gridsearch", "Run a configuration grid and select a model");
  auto* bench = app.add_subcommand("bench", "Measure per-clip latency");
  auto* monitor = app.add_subcommand("monitor", "Stream audio and publish mode events");
  auto* export_cmd = app.add_subcommand("export", "Rewrite a checkpoint for deployment");

  for (auto* cmd : {pretrain, distill, finetune_cmd, eval, grid, bench, monitor, export_cmd}) add_common(cmd, common);
  for (auto* cmd : {pretrain, distill, finetune_cmd, eval}) add_data(cmd, data);
  for (auto* cmd : {pretrain, distill, finetune_cmd, bench}) cmd->add_option("--model", model_id, "Grid id, e.g. L19 or I05");

  GridOptions g;
  grid->add_option("--family", g.family, "L (child grid) or I (parent grid)");
  grid->add_option("--tasks", g.tasks, "Synthetic tasks scored for mean F1");
  grid->add_option("--classes", g.classes, "Classes per synthetic task");
  grid->add_option("--train-per-class", g.train_per_class);
  grid->add_option("--test-per-class", g.test_per_class);
  grid->add_option("--epochs", g.epochs, "Fine-tune epochs per task (unless set in --config)");

  BenchOptions b;
  bench->add_option("--clips", b.clips, "Timed clips");
  bench->add_option("--warmup", b.warmup, "Untimed warm-up clips");
  bench->add_option("--budget-ms", b.budget_ms, "Per-clip budget");
  bench->add_option("--wav", b.wav, "Take clips from a WAV file")->check(CLI::ExistingFile);

  MonitorCli m;
  monitor->add_option("--wav", m.wav, "WAV file source")->check(CLI::ExistingFile);
  monitor->add_option("--pcm", m.pcm, "Raw s16le 48 kHz mono source (- for stdin)");
  monitor->add_option("--sink", m.sinks, "stdout or tcp:host:port (repeatable)");
  monitor->add_option("--capacity", m.capacity, "Clip queue capacity");
  monitor->add_option("--budget-ms", m.budget_ms, "Per-clip budget");
  monitor->add_option("--speed", m.speed, "WAV pacing relative to real time (0: unpaced)");

  bool keep_decoder = false;
  export_cmd->add_flag("--keep-decoder", keep_decoder, "Keep the pretraining decoder");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*pretrain) return cmd_pretrain(common, data, model_id);
    if (*distill) return cmd_distill(common, data, model_id);
    if (*finetune_cmd) return cmd_finetune(common, data, model_id);
    if (*eval) return cmd_eval(common, data);
    if (*grid) return cmd_gridsearch(common, g);
    if (*bench) return cmd_bench(common, b, model_id);
    if (*monitor) return cmd_monitor(common, m);
    if (*export_cmd) return cmd_export(common, keep_decoder);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
