// SPDX-License-Identifier: Apache-2.0
// pbd: data generation, training, decoding, evaluation and inspection.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "pbd/config.hpp"
#include "pbd/errors.hpp"
#include "pbd/mask.hpp"
#include "pbd/packer.hpp"
#include "pbd/pipeline.hpp"

namespace fs = std::filesystem;
using namespace pbd;

namespace {

enum ExitCode {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kDomain = 5,
  kCapacity = 6,
  kContract = 7,
  kDivergence = 8,
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

// Config file, then PBD_OUT_DIR / PBD_THREADS, then --set overrides.
RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig() : load_config(c.config_path);
  if (const char* dir = std::getenv("PBD_OUT_DIR"); dir && *dir) cfg.out_dir = dir;
  if (const char* th = std::getenv("PBD_THREADS"); th && *th) set_config_value(cfg, "threads", th);
  for (const auto& kv : c.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config_path, "key = value config file");
  app->add_option("--set", c.overrides, "override a config key (key=value), repeatable");
}

fs::path in_out_dir(const RunConfig& cfg, const std::string& explicit_path, const std::string& name) {
  if (!explicit_path.empty()) return explicit_path;
  return fs::path(cfg.out_dir) / name;
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

// ---- gen -------------------------------------------------------------------

int cmd_gen(const RunConfig& cfg, bool force) {
  const fs::path dir = cfg.out_dir;
  const fs::path train = dir / "train.jsonl", eval = dir / "eval.jsonl";
  if (!force && (fs::exists(train) || fs::exists(eval))) {
    throw IoError("refusing to overwrite " + (fs::exists(train) ? train : eval).string() + " (use --force)");
  }
  fs::create_directories(dir);
  DatasetConfig d = cfg.data;
  write_scene_file(train.string(), generate_split(d, 0));
  d.scenes = cfg.eval_scenes;
  write_scene_file(eval.string(), generate_split(d, 1));
  std::ofstream(dir / "data.cfg") << serialize_config(cfg);
  std::cout << "wrote " << cfg.data.scenes << " train scenes to " << train.string() << "\n"
            << "wrote " << cfg.eval_scenes << " eval scenes to " << eval.string() << "\n";
  return kOk;
}

// ---- train -----------------------------------------------------------------

int cmd_train(const RunConfig& cfg, const std::string& data_path, const std::string& resume,
              const std::string& ckpt_out) {
  const fs::path data = data_path.empty() ? fs::path(cfg.out_dir) / "train.jsonl" : fs::path(data_path);
  if (!fs::exists(data)) throw IoError("dataset not found: " + data.string());
  const auto scenes = read_scene_file(data.string());
  const auto examples = training_examples(scenes);

  AdamState state;
  ModelParams params = resume.empty() ? ModelParams::initialized(cfg.model, cfg.init_seed)
                                      : load_checkpoint(resume, &state);
  if (!resume.empty() && !(params.config() == cfg.model)) {
    throw ConfigError("checkpoint dimensions differ from the configured model");
  }
  TransformerModel model(std::move(params));
  std::cout << "training on " << examples.size() << " examples from " << data.string() << ", steps "
            << state.step << " -> " << cfg.train.steps << "\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto curve = train(model, state, examples, cfg.train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path ckpt = in_out_dir(cfg, ckpt_out, "model.ckpt");
  ensure_parent(ckpt);
  save_checkpoint(ckpt.string(), model.params(), state);
  const fs::path csv = ckpt.parent_path() / "loss.csv";
  const bool append = !resume.empty() && fs::exists(csv);
  std::ofstream out(csv, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write " + csv.string());
  if (append) {
    std::ostringstream tmp;
    write_loss_csv(tmp, curve);
    const auto body = tmp.str();
    out << body.substr(body.find('\n') + 1);
  } else {
    write_loss_csv(out, curve);
  }
  if (!curve.empty()) {
    std::cout << "loss " << fixed(curve.front().l_total) << " -> " << fixed(curve.back().l_total) << " in "
              << fixed(secs, 1) << " s\n";
  }
  std::cout << "checkpoint " << ckpt.string() << " (step " << state.step << "), curve " << csv.string() << "\n";
  return kOk;
}

// ---- decode ----------------------------------------------------------------

struct DecodeFlags {
  std::string mode, checkpoint, scene, out, trace;
  bool greedy = false;
  std::optional<double> temperature, top_p, rep_penalty;
  std::optional<int> block_size, max_new_tokens, limit;
};

DecodeConfig decode_config(const RunConfig& cfg, const DecodeFlags& f) {
  DecodeConfig d = cfg.decode;
  if (!f.mode.empty()) d.mode = parse_decode_mode(f.mode);
  if (f.greedy) d.greedy = true;
  if (f.temperature) d.temperature = *f.temperature;
  if (f.top_p) d.top_p = *f.top_p;
  if (f.rep_penalty) d.repetition_penalty = *f.rep_penalty;
  if (f.block_size) d.n_future = *f.block_size;
  if (f.max_new_tokens) d.max_new_tokens = *f.max_new_tokens;
  d.validate();
  return d;
}

int cmd_decode(const RunConfig& cfg, const DecodeFlags& f) {
  const auto dc = decode_config(cfg, f);
  const fs::path ckpt = in_out_dir(cfg, f.checkpoint, "model.ckpt");
  const fs::path scenes_path = f.scene.empty() ? fs::path(cfg.out_dir) / "eval.jsonl" : fs::path(f.scene);
  const TransformerModel model(load_checkpoint(ckpt.string()));
  const auto scenes = read_scene_file(scenes_path.string());
  const auto preds = decode_scenes(model, scenes, dc, cfg.threads, f.limit.value_or(-1));

  const fs::path out = in_out_dir(cfg, f.out, std::string("predictions_") + to_string(dc.mode) + ".jsonl");
  ensure_parent(out);
  write_predictions(out.string(), preds);
  const fs::path trace = in_out_dir(cfg, f.trace, std::string("trace_") + to_string(dc.mode) + ".json");
  ensure_parent(trace);
  std::ofstream(trace) << trace_json(preds) << "\n";
  const auto s = summarize(scenes, preds);
  std::cout << to_string(dc.mode) << ": " << preds.size() << " queries, " << s.throughput.boxes << " boxes, "
            << s.throughput.forward_passes << " forward passes, " << s.fallbacks << " fallbacks, "
            << fixed(s.throughput.bps, 1) << " BPS\n"
            << "predictions " << out.string() << ", trace " << trace.string() << "\n";
  return kOk;
}

// ---- eval / bench tables ---------------------------------------------------

void print_table(std::ostream& os, const std::vector<ModeSummary>& rows, bool csv) {
  double slow_ppb = 0.0;
  for (const auto& r : rows)
    if (r.mode == DecodeMode::Slow) slow_ppb = r.passes_per_box();
  const std::vector<std::string> head = {"mode",   "queries", "F1@0.5",     "F1@0.95",      "F1@mean",
                                         "P",      "R",       "BPS",        "passes",       "passes/box",
                                         "ratio",  "fallbacks", "flagged", "neg_ok"};
  auto ratio = [&](const ModeSummary& r) {
    return slow_ppb > 0.0 && r.passes_per_box() > 0.0 ? fixed(slow_ppb / r.passes_per_box(), 2) : std::string("-");
  };
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    cells.push_back({to_string(r.mode), std::to_string(r.queries), fixed(r.f1.f1_50), fixed(r.f1.f1_95),
                     fixed(r.f1.f1_mean), fixed(r.f1.p_mean), fixed(r.f1.r_mean), fixed(r.throughput.bps, 1),
                     std::to_string(r.throughput.forward_passes), fixed(r.passes_per_box(), 2), ratio(r),
                     std::to_string(r.fallbacks), std::to_string(r.flagged),
                     std::to_string(r.negatives_ok) + "/" + std::to_string(r.negatives)});
  }
  if (csv) {
    for (std::size_t i = 0; i < head.size(); ++i) os << (i ? "," : "") << head[i];
    os << "\n";
    for (const auto& row : cells) {
      for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
      os << "\n";
    }
    return;
  }
  std::vector<std::size_t> w(head.size());
  for (std::size_t i = 0; i < head.size(); ++i) {
    w[i] = head[i].size();
    for (const auto& row : cells) w[i] = std::max(w[i], row[i].size());
  }
  for (std::size_t i = 0; i < head.size(); ++i) os << std::setw(static_cast<int>(w[i]) + 2) << head[i];
  os << "\n";
  for (const auto& row : cells) {
    for (std::size_t i = 0; i < row.size(); ++i) os << std::setw(static_cast<int>(w[i]) + 2) << row[i];
    os << "\n";
  }
}

// F1 and throughput per object count, one row per (objects, mode).
void write_by_objects(const fs::path& path, const std::vector<Scene>& scenes,
                      const std::vector<std::vector<Prediction>>& runs) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "objects,mode,queries,f1_50,f1_mean,bps\n";
  int max_obj = 0;
  for (const auto& s : scenes) max_obj = std::max<int>(max_obj, s.objects.size());
  for (int k = 0; k <= max_obj; ++k) {
    for (const auto& run : runs) {
      std::vector<Prediction> sel;
      for (const auto& p : run)
        if (static_cast<int>(scenes[p.scene].objects.size()) == k) sel.push_back(p);
      if (sel.empty()) continue;
      const auto s = summarize(scenes, sel);
      out << k << "," << to_string(s.mode) << "," << s.queries << "," << fixed(s.f1.f1_50) << ","
          << fixed(s.f1.f1_mean) << "," << fixed(s.throughput.bps, 2) << "\n";
    }
  }
}

int cmd_eval(const RunConfig& cfg, const std::vector<std::string>& pred_paths, const std::string& scene_path,
             const std::string& out_csv, const std::string& by_objects) {
  const fs::path sp = scene_path.empty() ? fs::path(cfg.out_dir) / "eval.jsonl" : fs::path(scene_path);
  const auto scenes = read_scene_file(sp.string());
  std::vector<ModeSummary> rows;
  std::vector<std::vector<Prediction>> runs;
  for (const auto& p : pred_paths) {
    runs.push_back(read_predictions(p));
    rows.push_back(summarize(scenes, runs.back()));
  }
  print_table(std::cout, rows, false);
  const fs::path csv = in_out_dir(cfg, out_csv, "metrics.csv");
  ensure_parent(csv);
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv.string());
  print_table(out, rows, true);
  if (!by_objects.empty()) write_by_objects(by_objects, scenes, runs);
  std::cout << "metrics " << csv.string() << "\n";
  return kOk;
}

int cmd_bench(const RunConfig& cfg, const DecodeFlags& f, const std::string& modes, int min_objects,
              const std::string& out_csv) {
  const fs::path ckpt = in_out_dir(cfg, f.checkpoint, "model.ckpt");
  const fs::path sp = f.scene.empty() ? fs::path(cfg.out_dir) / "eval.jsonl" : fs::path(f.scene);
  const TransformerModel model(load_checkpoint(ckpt.string()));
  const auto scenes = read_scene_file(sp.string());
  std::vector<ModeSummary> rows, rows_min;
  std::stringstream ms(modes);
  std::string name;
  while (std::getline(ms, name, ',')) {
    DecodeFlags g = f;
    g.mode = name;
    const auto preds = decode_scenes(model, scenes, decode_config(cfg, g), cfg.threads, f.limit.value_or(-1));
    rows.push_back(summarize(scenes, preds));
    if (min_objects > 0) rows_min.push_back(summarize(scenes, preds, min_objects));
  }
  print_table(std::cout, rows, false);
  if (min_objects > 0) {
    std::cout << "\nscenes with >= " << min_objects << " objects:\n";
    print_table(std::cout, rows_min, false);
  }
  const fs::path csv = in_out_dir(cfg, out_csv, "bench.csv");
  ensure_parent(csv);
  std::ofstream out(csv);
  if (!out) throw IoError("cannot write " + csv.string());
  print_table(out, rows, true);
  std::cout << "table " << csv.string() << "\n";
  return kOk;
}

// ---- bench-pack ------------------------------------------------------------

int cmd_bench_pack(int budget, int buffer, const std::string& dist, int batches, std::uint64_t seed,
                   const std::string& out_csv) {
  int lo = 0, hi = 0;
  if (std::sscanf(dist.c_str(), "uniform:%d:%d", &lo, &hi) != 2 || lo < 1 || hi < lo) {
    throw ConfigError("--dist expects uniform:LO:HI with 1 <= LO <= HI, got '" + dist + "'");
  }
  if (hi > budget) throw ConfigError("--dist upper bound exceeds --budget");
  auto rng = std::make_shared<std::mt19937_64>(seed);
  std::function<std::optional<int>()> source = [rng, lo, hi]() -> std::optional<int> {
    return std::uniform_int_distribution<int>(lo, hi)(*rng);
  };
  StreamPacker<int> packer({source}, {1.0}, [](int n) { return n; }, budget, buffer, seed);
  std::vector<PackedBatch<int>> out;
  std::ofstream csv;
  if (!out_csv.empty()) {
    csv.open(out_csv);
    if (!csv) throw IoError("cannot write " + out_csv);
    csv << "batch,items,tokens,efficiency,buffer\n";
  }
  for (int b = 0; b < batches; ++b) {
    out.push_back(*packer.next());
    if (csv.is_open()) {
      csv << b << "," << out.back().items.size() << "," << out.back().tokens() << ","
          << fixed(static_cast<double>(out.back().tokens()) / budget) << "," << packer.buffer_size() << "\n";
    }
  }
  const auto& st = packer.stats();
  std::cout << "batches " << batches << ", budget " << budget << ", buffer " << buffer << ", dist " << dist << "\n"
            << "efficiency " << fixed(packing_efficiency(out)) << ", max buffer " << st.max_buffer
            << ", forced emissions " << st.forced_emissions << "\n";
  return kOk;
}

// ---- inspect-mask ----------------------------------------------------------

int cmd_inspect_mask(int vis, int q, int ntp, int blk, int block_size) {
  SequenceLayout layout{vis, q, ntp, blk, block_size};
  layout.validate();
  const auto mask = build_training_mask(layout);
  std::cout << std::string(9, ' ') << segment_legend(layout) << "\n";
  const auto rows = mask.render_ascii();
  std::istringstream in(rows);
  std::string line;
  for (int i = 0; std::getline(in, line); ++i) {
    const char* seg = "?";
    switch (layout.segment_of(i)) {
      case SequenceLayout::Segment::Vis: seg = "vis"; break;
      case SequenceLayout::Segment::Query: seg = "q  "; break;
      case SequenceLayout::Segment::Ntp: seg = "ntp"; break;
      case SequenceLayout::Segment::Blk: seg = "blk"; break;
    }
    std::cout << std::setw(4) << i << " " << seg << " " << line << "\n";
  }
  return kOk;
}

int run(int argc, char** argv) {
  CLI::App app{"pbd: parallel box decoding on synthetic grid scenes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "pbd 1.0");

  Common common;
  bool force = false;
  auto* gen = app.add_subcommand("gen", "generate train and eval scene files into out_dir");
  add_common(gen, common);
  gen->add_flag("--force", force, "overwrite existing files");

  std::string data_path, resume, ckpt_out;
  auto* tr = app.add_subcommand("train", "train a model; writes a checkpoint and loss.csv");
  add_common(tr, common);
  tr->add_option("--data", data_path, "train scene file (default out_dir/train.jsonl)");
  tr->add_option("--resume", resume, "continue from this checkpoint");
  tr->add_option("--checkpoint-out", ckpt_out, "checkpoint path (default out_dir/model.ckpt)");

  DecodeFlags df;
  auto* dec = app.add_subcommand("decode", "decode every query of a scene file");
  add_common(dec, common);
  auto add_decode_flags = [&](CLI::App* a, bool with_mode) {
    if (with_mode) a->add_option("--mode", df.mode, "slow, fast or hybrid")->check(CLI::IsMember({"slow", "fast", "hybrid"}));
    a->add_option("--checkpoint", df.checkpoint, "model checkpoint (default out_dir/model.ckpt)");
    a->add_option("--scene", df.scene, "scene file (default out_dir/eval.jsonl)");
    a->add_flag("--greedy", df.greedy, "argmax decoding");
    a->add_option("--temperature", df.temperature, "sampling temperature");
    a->add_option("--top-p", df.top_p, "nucleus mass");
    a->add_option("--rep-penalty", df.rep_penalty, "repetition penalty");
    a->add_option("--block-size", df.block_size, "tokens per Fast step");
    a->add_option("--max-new-tokens", df.max_new_tokens, "generation budget");
    a->add_option("--limit", df.limit, "decode only the first N scenes");
  };
  add_decode_flags(dec, true);
  dec->add_option("--out", df.out, "predictions file (default out_dir/predictions_MODE.jsonl)");
  dec->add_option("--trace", df.trace, "trace file (default out_dir/trace_MODE.json)");

  std::vector<std::string> preds;
  std::string eval_scene, metrics_out, by_objects;
  auto* ev = app.add_subcommand("eval", "score prediction files against a scene file");
  add_common(ev, common);
  ev->add_option("--pred", preds, "predictions file, repeatable (one table row each)")->required();
  ev->add_option("--scene", eval_scene, "scene file (default out_dir/eval.jsonl)");
  ev->add_option("--out", metrics_out, "metrics CSV (default out_dir/metrics.csv)");
  ev->add_option("--by-objects", by_objects, "also write F1 and BPS per object count to this CSV");

  std::string modes = "slow,fast,hybrid", bench_out;
  int min_objects = 3;
  auto* be = app.add_subcommand("bench", "decode with several modes and compare");
  add_common(be, common);
  add_decode_flags(be, false);
  be->add_option("--modes", modes, "comma-separated modes");
  be->add_option("--min-objects", min_objects, "extra table restricted to scenes with this many objects (0 = off)");
  be->add_option("--out", bench_out, "table CSV (default out_dir/bench.csv)");

  int budget = 36864, buffer = 32, batches = 1000;
  std::uint64_t pack_seed = 1;
  std::string dist = "uniform:200:2000", pack_out;
  auto* bp = app.add_subcommand("bench-pack", "packing efficiency on a synthetic length distribution");
  bp->add_option("--budget", budget, "tokens per batch");
  bp->add_option("--buffer", buffer, "buffer capacity");
  bp->add_option("--dist", dist, "length distribution, uniform:LO:HI");
  bp->add_option("--batches", batches, "batches to assemble");
  bp->add_option("--seed", pack_seed, "seed");
  bp->add_option("--out", pack_out, "per-batch CSV");

  int vis = 2, q = 1, ntp = 6, blk = 12, block_size = kBlockSize;
  auto* im = app.add_subcommand("inspect-mask", "print the training mask of one layout");
  im->add_option("--vis", vis, "visual tokens");
  im->add_option("--q", q, "query tokens");
  im->add_option("--ntp", ntp, "token-stream length");
  im->add_option("--blk", blk, "block-stream length");
  im->add_option("--block-size", block_size, "block size");

  bool list_keys = false;
  auto* sc = app.add_subcommand("show-config", "print the resolved config");
  add_common(sc, common);
  sc->add_flag("--keys", list_keys, "list every config key with its meaning instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }

  if (*gen) return cmd_gen(resolve(common), force);
  if (*tr) return cmd_train(resolve(common), data_path, resume, ckpt_out);
  if (*dec) return cmd_decode(resolve(common), df);
  if (*ev) return cmd_eval(resolve(common), preds, eval_scene, metrics_out, by_objects);
  if (*be) return cmd_bench(resolve(common), df, modes, min_objects, bench_out);
  if (*bp) return cmd_bench_pack(budget, buffer, dist, batches, pack_seed, pack_out);
  if (*im) return cmd_inspect_mask(vis, q, ntp, blk, block_size);
  if (*sc) {
    if (list_keys) {
      for (const auto& k : config_keys()) std::cout << std::left << std::setw(28) << k.name << k.help << "\n";
      return kOk;
    }
    std::cout << serialize_config(resolve(common));
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kIo;
  } catch (const CapacityError& e) {
    std::cerr << "capacity error: " << e.what() << "\n";
    return kCapacity;
  } catch (const DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return kDivergence;
  } catch (const DomainError& e) {
    std::cerr << "domain error: " << e.what() << "\n";
    return kDomain;
  } catch (const EncodeError& e) {
    std::cerr << "encode error: " << e.what() << "\n";
    return kDomain;
  } catch (const ContractError& e) {
    std::cerr << "contract error: " << e.what() << "\n";
    return kContract;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInternal;
  }
}
