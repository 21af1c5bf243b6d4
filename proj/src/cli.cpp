// Copyright 2026 The contseg Authors
// SPDX-License-Identifier: Apache-2.0

#include "contseg/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "contseg/checkpoint.hpp"
#include "contseg/config.hpp"
#include "contseg/engine.hpp"
#include "contseg/error.hpp"
#include "contseg/plot.hpp"
#include "contseg/serialize.hpp"
#include "contseg/sslge.hpp"
#include "contseg/volume_io.hpp"

namespace contseg {

namespace fs = std::filesystem;
using OJson = nlohmann::ordered_json;

namespace {

class LockedError : public Error {
 public:
  using Error::Error;
};

// Exclusive ownership of a run directory for the life of one invocation.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
      if (errno == EEXIST) throw LockedError("run directory is locked: " + path_.string());
      throw IoError("cannot create lock file " + path_.string());
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] const auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
  }
  ~RunLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  fs::path path_;
};

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool paper_scale = false;
  std::string order = "order1";
  std::string strategy = "clnet";
  std::string checkpoint;
  std::string head;
  std::string image;
  std::string scores;
  std::string case_ref;
  std::string run;
};

std::uint64_t mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RunConfig resolve(const Options& o) {
  RunConfig c = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.seed) c.seed = o.seed;
  if (o.paper_scale) apply_paper_scale(c);
  if (const char* e = std::getenv(kOutputRootEnv); e && *e) c.output_root = e;
  c.validate();
  const std::uint64_t seed = c.require_seed();
  c.engine.seed = seed;
  c.ge.seed = mix(seed, 1);
  c.ssl.seed = mix(seed, 2);
  c.finetune.seed = mix(seed, 3);
  return c;
}

fs::path run_root(const Options& o, const RunConfig& c) {
  if (!o.out.empty()) return o.out;
  return fs::path(c.output_root) / ("seed_" + std::to_string(*c.seed));
}

Encoder fresh_encoder(const RunConfig& c) {
  Rng rng(mix(*c.seed, 0));
  return Encoder(c.encoder, rng);
}


// Datasets written by `synth` into the run directory take precedence over regeneration.
Corpus run_corpus(RunConfig c, const fs::path& root) {
  if (c.data_dir.empty() && fs::is_directory(root / "data")) c.data_dir = (root / "data").string();
  return load_corpus(c);
}

void write_json(const fs::path& p, const OJson& j) {
  fs::create_directories(p.parent_path());
  write_text(p, j.dump(2) + "\n");
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

const DatasetDescriptor& comprehensive(const TaskRegistry& reg) {
  if (reg.datasets.empty()) throw ConfigError("registry has no datasets");
  return reg.datasets.front();
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_synth(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  write_json(root / "config.json", to_json(c));
  const TaskRegistry reg = load_registry(c);
  write_json(root / "registry.json", to_json(reg));
  std::size_t n = 0;
  for (const auto& d : reg.datasets) {
    const auto samples = generate_dataset(d, reg);
    write_dataset(root / "data" / d.dataset_id, d, reg, samples);
    n += samples.size();
    out << "synth " << d.dataset_id << ": " << samples.size() << " cases\n";
  }
  out << "wrote " << n << " cases to " << (root / "data").string() << "\n";
  return kExitOk;
}

int cmd_pretrain_ssl(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const Corpus corpus = run_corpus(c, root);
  std::vector<Sample> data;
  for (const auto& d : corpus.registry.datasets)
    for (auto& s : corpus.split(d.dataset_id, Split::train)) data.push_back(std::move(s));
  Encoder enc = fresh_encoder(c);
  Rng rng(mix(*c.seed, 4));
  Predictor pred(enc.embedding_dim(), rng);
  const TrainLog log = simsiam_pretrain(data, enc, pred, c.ssl);
  Model m;
  m.encoder = enc;
  save_checkpoint(root / "ssl" / "encoder", m);
  write_text(root / "ssl" / "train_log.csv", log.csv());
  out << "ssl: " << log.rows.size() << " epochs, final loss " << fixed(log.rows.back().loss) << "\n";
  return kExitOk;
}

void train_ge(const RunConfig& c, const fs::path& root, std::ostream& out) {
  write_json(root / "config.json", to_json(c));
  const Corpus corpus = run_corpus(c, root);
  Encoder start = fresh_encoder(c);
  if (c.ssl_enabled) {
    const fs::path p = root / "ssl" / "encoder";
    if (!fs::exists(p)) throw InvalidArgument("ssl.enabled is set but " + p.string() + " is missing; run pretrain-ssl");
    start = load_checkpoint(p).encoder;
    start.set_frozen(false);
  }
  const DatasetDescriptor& comp = comprehensive(corpus.registry);
  GeResult ge = train_ge_supervised(start, corpus.registry, comp, corpus.split(comp.dataset_id, Split::train),
                                    corpus.split(comp.dataset_id, Split::val), c.ge);
  for (const auto& w : ge.warnings) out << "warning: " << w << "\n";
  Model m;
  m.encoder = ge.encoder;
  if (c.finetune_enabled) {
    std::vector<FinetuneSet> sets;
    for (const auto& d : corpus.registry.datasets)
      if (d.dataset_id != comp.dataset_id) sets.push_back({d.dataset_id, d.class_set, corpus.split(d.dataset_id, Split::train)});
    MomentumQueue queue;
    FinetuneReport rep;
    m.encoder = momentum_finetune(ge.encoder, sets, queue, c.finetune, &rep);
    freeze_encoder(m.encoder);
    write_text(root / "ge" / "finetune_log.csv", rep.log.csv());
  }
  m.heads = ge.heads;
  save_checkpoint(root / "ge" / "checkpoint", m);
  write_text(root / "ge" / "train_log.csv", ge.log.csv());
  OJson rep;
  OJson v = OJson::object();
  for (const auto& [cls, d] : ge.val_dsc) v[std::to_string(cls)] = d;
  rep["val_dsc"] = v;
  rep["warnings"] = ge.warnings;
  rep["finetuned"] = c.finetune_enabled;
  write_json(root / "ge" / "report.json", rep);
  for (const auto& [cls, d] : ge.val_dsc)
    out << "ge " << corpus.registry.anatomy(cls).name << " val DSC " << fixed(d) << "\n";
}

// Trains the general encoder first when the run directory has none.
Encoder ge_encoder(const RunConfig& c, const fs::path& root, std::ostream& out) {
  const fs::path p = root / "ge" / "checkpoint";
  if (!fs::exists(p)) {
    out << "no general encoder in " << root.string() << "; training one\n";
    train_ge(c, root, out);
  }
  Encoder e = load_checkpoint(p).encoder;
  freeze_encoder(e);
  return e;
}

int cmd_train_ge(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  train_ge(c, root, out);
  return kExitOk;
}

int cmd_run_pl(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const Corpus corpus = run_corpus(c, root);
  const Encoder enc = ge_encoder(c, root, out);
  const fs::path dir = root / "pl";
  fs::remove_all(dir);
  const PartialLabelResult pl = run_partial_label(corpus, enc, c.engine, c.engine.fls);
  write_step(dir, pl.result, pl.model);
  write_text(dir / "metrics.csv", metrics_csv("pl", {pl.result.snapshot}));
  OJson rep;
  OJson v = OJson::object();
  for (const auto& [h, d] : pl.result.val_dsc) v[h] = d;
  rep["val_dsc"] = v;
  OJson abl = OJson::object();
  for (const auto& [h, p] : pl.fls_ablation)
    abl[h] = {{"with_fls", p.first}, {"without_fls", p.second}, {"margin", p.first - p.second}};
  rep["fls_ablation"] = abl;
  rep["dense_params"] = pl.result.snapshot.dense_params;
  rep["sparse_params"] = pl.result.snapshot.sparse_params;
  write_json(dir / "report.json", rep);
  for (const auto& [h, d] : pl.result.val_dsc) out << "pl " << h << " val DSC " << fixed(d) << "\n";
  for (const auto& [h, p] : pl.fls_ablation)
    out << "pl " << h << " FLS " << fixed(p.first) << " vs no FLS " << fixed(p.second) << "\n";
  out << "pl params " << pl.result.snapshot.sparse_params << " / " << pl.result.snapshot.dense_params << "\n";
  return kExitOk;
}

int cmd_run_cs(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const Corpus corpus = run_corpus(c, root);
  const auto orders = run_orders(c, corpus.registry);
  const ContinualOrder& order = find_order(orders, o.order);
  LearnerStrategy strategy;
  strategy.kind = strategy_from_string(o.strategy);
  strategy.baseline = c.baseline;
  strategy.validate();
  const Encoder enc = ge_encoder(c, root, out);
  const std::string name = order.name + "_" + to_string(strategy.kind);
  const fs::path dir = root / "cs" / name;
  fs::remove_all(dir);
  std::vector<StepSnapshot> snaps;
  run_continual(corpus, enc, order, strategy, c.engine, [&](const StepResult& r, const Model& m) {
    write_step(dir, r, m);
    snaps.push_back(r.snapshot);
    out << name << " step " << r.snapshot.step << " (" << r.snapshot.dataset_id << "):";
    for (const auto& id : r.snapshot.seen_datasets) out << " " << id << "=" << fixed(*r.snapshot.dataset_dsc(id));
    out << "\n";
  });
  write_text(dir / "metrics.csv", metrics_csv(name, snaps));
  return kExitOk;
}

int cmd_prune(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty() || o.head.empty()) throw ConfigError("prune needs --checkpoint and --head");
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const Corpus corpus = run_corpus(c, root);
  Model m = load_checkpoint(o.checkpoint);
  freeze_encoder(m.encoder);
  const PruneRecord rec = prune_head(m, o.head, corpus, c.engine);
  const fs::path dir = root / "pruned" / o.head;
  fs::remove_all(dir);
  save_checkpoint(dir / "checkpoint", m);
  write_json(dir / "prune_record.json", rec.to_json());
  out << "pruned " << o.head << " to rate " << rec.final_rate << ", val DSC " << fixed(rec.val_dsc_before) << " -> "
      << fixed(rec.val_dsc_after) << "\n";
  return kExitOk;
}

int cmd_predict(const Options& o, std::ostream& out) {
  if (o.checkpoint.empty()) throw ConfigError("predict needs --checkpoint");
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const Model m = load_checkpoint(o.checkpoint);
  Image image;
  std::vector<double> scores;
  std::string name;
  if (!o.image.empty()) {
    image = read_image(o.image);
    name = fs::path(o.image).stem().string();
    if (!o.scores.empty()) scores = nlohmann::json::parse(read_text(o.scores)).get<std::vector<double>>();
  } else {
    const Corpus corpus = run_corpus(c, root);
    const Sample* s = &corpus.probe();
    if (!o.case_ref.empty()) {
      const auto slash = o.case_ref.find('/');
      if (slash == std::string::npos) throw ConfigError("--case expects <dataset>/<case_id>");
      const auto it = corpus.samples.find(o.case_ref.substr(0, slash));
      if (it == corpus.samples.end()) throw ConfigError("unknown dataset in --case " + o.case_ref);
      s = nullptr;
      for (const auto& x : it->second)
        if (x.case_id == o.case_ref.substr(slash + 1)) s = &x;
      if (!s) throw ConfigError("unknown case " + o.case_ref);
    }
    image = s->image;
    scores = s->bpr_scores;
    name = s->case_id;
  }
  const PredictionMaps maps = predict_volume(m, image, scores, c.merge);
  const fs::path dir = root / "predict" / name;
  fs::create_directories(dir);
  write_labels(dir / "merged_labels.raw", maps.merged);
  for (const auto& [h, lm] : maps.heads) write_labels(dir / (h + "_labels.raw"), lm);
  out << "predict " << name << ": merged map and " << maps.heads.size() << " head maps in " << dir.string() << "\n";
  return kExitOk;
}

int cmd_eval(const Options& o, std::ostream& out) {
  if (o.run.empty()) throw ConfigError("eval needs --run <step directory>");
  const RunConfig c = resolve(o);
  const fs::path root = run_root(o, c);
  RunLock lock(root);
  const fs::path step_dir = o.run;
  const std::string stored = read_text(step_dir / "snapshot.json");
  const auto j = nlohmann::json::parse(stored);
  const StepSnapshot prev = snapshot_from_json(j);
  const Corpus corpus = run_corpus(c, root);
  const Model m = load_checkpoint(step_dir / "checkpoint");
  const StepSnapshot snap = make_snapshot(m, corpus, prev.step, prev.seen_datasets);
  const std::string doc = snapshot_document(snap, m, probe_posteriors(m, corpus)).dump(2) + "\n";
  write_text(step_dir / "eval_snapshot.json", doc);
  if (doc != stored) throw Error("re-evaluation differs from " + (step_dir / "snapshot.json").string());
  out << "eval: snapshot.json reproduced for step " << snap.step << "\n";
  return kExitOk;
}

struct RunCurve {
  std::string name;
  std::vector<StepSnapshot> steps;
};

std::vector<StepSnapshot> read_steps(const fs::path& dir) {
  std::vector<StepSnapshot> v;
  for (int t = 0;; ++t) {
    const fs::path p = dir / ("step_" + std::to_string(t)) / "snapshot.json";
    if (!fs::exists(p)) break;
    v.push_back(snapshot_from_json(nlohmann::json::parse(read_text(p))));
  }
  return v;
}

double final_mean_dsc(const StepSnapshot& s) { return mean_class_dsc(s.scores); }

int cmd_report(const Options& o, std::ostream& out) {
  const RunConfig c = resolve(o);
  const fs::path root = o.run.empty() ? run_root(o, c) : fs::path(o.run);
  RunLock lock(root);
  std::vector<RunCurve> runs;
  if (fs::is_directory(root / "cs")) {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root / "cs"))
      if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      RunCurve r{d.filename().string(), read_steps(d)};
      if (!r.steps.empty()) runs.push_back(std::move(r));
    }
  }
  std::optional<RunCurve> pl;
  if (fs::exists(root / "pl" / "step_0" / "snapshot.json")) pl = RunCurve{"pl", read_steps(root / "pl")};
  if (runs.empty() && !pl) throw InvalidArgument("no finished runs under " + root.string());

  const fs::path dir = root / "report";
  fs::create_directories(dir);
  std::ostringstream csv, md;
  csv << "run,step,dataset,mean_dsc,mean_asd,dense_params,sparse_params\n";
  md << "| run | first dataset | DSC at step 0 | DSC at final step | drop (points) | final mean DSC | sparse params |\n"
     << "|---|---|---|---|---|---|---|\n";
  auto emit = [&](const RunCurve& r) {
    for (const auto& s : r.steps)
      for (const auto& id : s.seen_datasets) {
        std::vector<double> asds;
        for (const auto& cs : s.scores)
          if (cs.dataset_id == id)
            if (auto a = cs.mean_asd()) asds.push_back(*a);
        csv << r.name << ',' << s.step << ',' << id << ',' << fixed(*s.dataset_dsc(id), 6) << ','
            << (asds.empty() ? std::string() : fixed(mean(asds), 6)) << ',' << s.dense_params << ','
            << s.sparse_params << '\n';
      }
  };
  PlotSpec curves{"Forgetting curves", "step", "DSC of the first dataset", {}, std::pair{0.0, 1.0}, true, true};
  PlotSpec params{"DSC vs parameters", "sparse parameters (thousands)", "mean DSC", {}, std::pair{0.0, 1.0}, false,
                  false};
  for (const auto& r : runs) {
    emit(r);
    const std::string first = r.steps.front().seen_datasets.front();
    Series s{r.name, {}, {}};
    for (const auto& st : r.steps) {
      s.x.push_back(st.step);
      s.y.push_back(*st.dataset_dsc(first));
    }
    const double d0 = s.y.front(), d1 = s.y.back();
    md << "| " << r.name << " | " << first << " | " << fixed(d0) << " | " << fixed(d1) << " | "
       << fixed(100 * (d0 - d1), 2) << " | " << fixed(final_mean_dsc(r.steps.back())) << " | "
       << r.steps.back().sparse_params << " |\n";
    curves.series.push_back(std::move(s));
    params.series.push_back({r.name, {r.steps.back().sparse_params / 1000.0}, {final_mean_dsc(r.steps.back())}});
  }
  if (pl) {
    emit(*pl);
    params.series.push_back({"pl", {pl->steps.back().sparse_params / 1000.0}, {final_mean_dsc(pl->steps.back())}});
    md << "| pl | - | - | - | - | " << fixed(final_mean_dsc(pl->steps.back())) << " | "
       << pl->steps.back().sparse_params << " |\n";
  }
  write_plot(dir / "forgetting_curves.png", curves);
  write_plot(dir / "dsc_vs_params.png", params);
  write_text(dir / "summary.csv", csv.str());
  write_text(dir / "summary.md", md.str());
  out << md.str();
  out << "report written to " << dir.string() << "\n";
  return kExitOk;
}

void error_record(std::ostream& err, const std::string& command, const std::string& kind, const std::string& msg,
                  int code) {
  OJson j;
  j["error"] = {{"command", command}, {"kind", kind}, {"message", msg}, {"exit_code", code}};
  err << j.dump() << "\n";
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"contseg: continual segmentation experiments on synthetic volumes", "contseg"};
  app.require_subcommand(1);
  app.fallthrough(false);
  Options o;
  using Handler = int (*)(const Options&, std::ostream&);
  std::vector<std::pair<CLI::App*, Handler>> commands;
  auto add = [&](const char* name, const char* help, Handler h) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", o.config, "run configuration (JSON)");
    sub->add_option("--seed", o.seed, "seed; overrides the config");
    sub->add_option("--out", o.out, "run directory; default <output_root>/seed_<seed>");
    sub->add_flag("--paper-scale", o.paper_scale, "full-scale hyperparameters instead of desk defaults");
    commands.emplace_back(sub, h);
    return sub;
  };
  add("synth", "generate the synthetic datasets", cmd_synth);
  add("pretrain-ssl", "SimSiam pretraining of the encoder", cmd_pretrain_ssl);
  add("train-ge", "train and freeze the general encoder", cmd_train_ge);
  add("run-pl", "partial-label training of every decoder", cmd_run_pl);
  CLI::App* cs = add("run-cs", "continual training over a dataset order", cmd_run_cs);
  cs->add_option("--order", o.order, "order name")->capture_default_str();
  cs->add_option("--strategy", o.strategy, "clnet, naive, mib or plop")->capture_default_str();
  CLI::App* pr = add("prune", "lottery-ticket pruning of one stored head", cmd_prune);
  pr->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
  pr->add_option("--head", o.head, "head id");
  CLI::App* pd = add("predict", "per-head and merged label maps for one volume", cmd_predict);
  pd->add_option("--checkpoint", o.checkpoint, "checkpoint directory");
  pd->add_option("--image", o.image, "raw image file; default the probe volume");
  pd->add_option("--scores", o.scores, "JSON array of slice scores for --image");
  pd->add_option("--case", o.case_ref, "<dataset>/<case_id> from the corpus");
  CLI::App* ev = add("eval", "re-evaluate a stored step and compare with its snapshot.json", cmd_eval);
  ev->add_option("--run", o.run, "step directory");
  CLI::App* rp = add("report", "tables and plots for the runs of a run directory", cmd_report);
  rp->add_option("--run", o.run, "run directory; default the --out/config directory");

  std::string command = "contseg";
  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    error_record(err, command, "usage", e.what(), kExitUsage);
    return kExitUsage;
  }
  for (const auto& [sub, handler] : commands) {
    if (!sub->parsed()) continue;
    command = sub->get_name();
    try {
      return handler(o, out);
    } catch (const ConfigError& e) {
      error_record(err, command, "config", e.what(), kExitConfig);
      return kExitConfig;
    } catch (const LockedError& e) {
      error_record(err, command, "locked", e.what(), kExitLocked);
      return kExitLocked;
    } catch (const std::exception& e) {
      error_record(err, command, "runtime", e.what(), kExitFailure);
      return kExitFailure;
    }
  }
  error_record(err, command, "usage", "no subcommand", kExitUsage);
  return kExitUsage;
}

int cli_main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace contseg
