#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "n3d/checkpoint.hpp"
#include "n3d/errors.hpp"
#include "n3d/eval.hpp"
#include "n3d/flow.hpp"
#include "n3d/forge.hpp"
#include "n3d/lexicon.hpp"
#include "n3d/run_config.hpp"

namespace fs = std::filesystem;
using namespace n3d;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error("usage", what) {}
};

struct Settings {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
};

void add_settings(CLI::App* cmd, Settings& s) {
  cmd->add_option("--config", s.config_path, "key=value config file");
  cmd->add_option("--set", s.overrides, "override one setting (key=value); repeatable");
}

// Defaults, then the config file, then explicit flags.
RunConfig resolve(const Settings& s, const std::vector<std::pair<std::string, std::string>>& flags) {
  RunConfig rc = s.config_path.empty() ? RunConfig{} : parse_config_file(s.config_path);
  for (const auto& kv : s.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    rc.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  for (const auto& [k, v] : flags) rc.set(k, v);
  return rc;
}

void echo(const std::string& title, const std::vector<std::pair<std::string, std::string>>& kv) {
  std::cout << "# " << title << "\n";
  for (const auto& [k, v] : kv) std::cout << k << "=" << v << "\n";
  std::cout << std::flush;
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create directory '" + dir + "': " + ec.message());
}

void write_views(const OccupancyGrid& grid, const std::vector<std::uint8_t>* highlight, const std::string& dir) {
  ensure_dir(dir);
  const auto images = render_views(grid, highlight);
  for (std::size_t i = 0; i < kViews.size(); ++i) {
    const std::string path = (fs::path(dir) / (view_name(kViews[i]) + ".ppm")).string();
    write_ppm(images[i], path);
    std::cout << "wrote " << path << "\n";
  }
}

// ---- subcommands ---------------------------------------------------------------

struct GenData {
  std::string out, lexicon, objects_dir;
  std::string per_op, seed;
  Settings settings;
};

int run_gen_data(const GenData& a) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.per_op.empty()) flags.emplace_back("per_op", a.per_op);
  if (!a.seed.empty()) flags.emplace_back("seed", a.seed);
  const RunConfig rc = resolve(a.settings, flags);
  rc.forge.validate();
  auto kv = rc.to_kv();
  kv.emplace_back("out", a.out);
  echo("gen-data effective config", kv);

  const auto generated = generate_dataset(rc.seed, rc.per_op, rc.forge);
  std::vector<EditTriplet> triplets;
  triplets.reserve(generated.size());
  for (const auto& g : generated) triplets.push_back(g.triplet);
  write_dataset(triplets, a.out);
  std::cout << "wrote " << triplets.size() << " triplets to " << a.out << "\n";

  if (!a.lexicon.empty()) {
    write_text(a.lexicon, Lexicon::standard().to_text());
    std::cout << "wrote lexicon (" << Lexicon::standard().word_count() << " words) to " << a.lexicon << "\n";
  }
  if (!a.objects_dir.empty()) {
    ensure_dir(a.objects_dir);
    for (std::size_t i = 0; i < generated.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "source_%05zu.n3do", i);
      write_object(generated[i].source_object, (fs::path(a.objects_dir) / name).string());
    }
    std::cout << "wrote " << generated.size() << " source objects to " << a.objects_dir << "\n";
  }
  return kExitOk;
}

struct Train {
  std::string data, stage, strategy, out, losses;
  Settings settings;
};

int run_train(const Train& a) {
  std::vector<std::pair<std::string, std::string>> flags;
  if (!a.stage.empty()) flags.emplace_back("stage", a.stage);
  if (!a.strategy.empty()) flags.emplace_back("strategy", a.strategy);
  const RunConfig rc = resolve(a.settings, flags);
  const Lexicon& lex = Lexicon::standard();
  const ModelConfig mcfg = rc.model_config(lex.vocab_size());
  const TrainConfig tcfg = rc.train_config();
  const std::string losses = a.losses.empty() ? a.out + ".losses.csv" : a.losses;
  auto kv = rc.to_kv();
  kv.emplace_back("data", a.data);
  kv.emplace_back("out", a.out);
  kv.emplace_back("losses", losses);
  echo("train effective config", kv);

  const auto triplets = read_dataset(a.data);
  std::vector<FlowExample<float>> data;
  data.reserve(triplets.size());
  for (const auto& t : triplets) data.push_back(make_example<float>(t, mcfg.stage));

  Rng rng(rc.seed);
  Model<float> model = build_model<float>(mcfg, rng);
  OptimizerState<float> opt;
  const ParamCount pc = param_count(model);
  std::cout << "parameters: backbone " << pc.backbone << ", text path " << pc.text_path << ", source path "
            << pc.source_path << ", heads " << pc.heads << ", total " << pc.total() << "\n";

  const KeyValues meta(kv.begin(), kv.end());
  const CheckpointSink<float> sink = [&](std::size_t step, const Model<float>& m, const OptimizerState<float>& o) {
    KeyValues mm = meta;
    mm.emplace_back("step", std::to_string(step));
    save_checkpoint(a.out, m, &o, mm);
  };
  const TrainReport rep = train<float>(model, opt, data, tcfg, sink, &std::cout);

  std::ostringstream csv;
  csv << "step,loss\n";
  for (std::size_t i = 0; i < rep.losses.size(); ++i) csv << i + 1 << "," << rep.losses[i] << "\n";
  write_text(losses, csv.str());

  std::printf("\n%-16s %14s\n", "metric", "value");
  std::printf("%-16s %14zu\n", "steps", rep.steps);
  std::printf("%-16s %14llu\n", "skipped", static_cast<unsigned long long>(rep.skipped));
  std::printf("%-16s %14.6f\n", "initial_loss", rep.initial_loss);
  std::printf("%-16s %14.6f\n", "final_loss", rep.final_loss);
  std::printf("%-16s %14.6f\n", "final/initial", rep.initial_loss > 0 ? rep.final_loss / rep.initial_loss : 0.0);
  std::printf("%-16s %14.1f\n", "seconds", rep.seconds);
  std::cout << "wrote " << a.out << " and " << losses << "\n";
  return kExitOk;
}

struct Edit {
  std::string ckpt1, ckpt2, source, instruction, out, render;
  std::size_t steps = 32;
  std::uint64_t seed = 0;
};

int run_edit(const Edit& a) {
  echo("edit effective config", {{"ckpt1", a.ckpt1},
                                 {"ckpt2", a.ckpt2},
                                 {"source", a.source},
                                 {"instruction", a.instruction},
                                 {"steps", std::to_string(a.steps)},
                                 {"seed", std::to_string(a.seed)},
                                 {"out", a.out},
                                 {"render", a.render}});
  if (a.steps == 0) throw ConfigError("--steps must be >= 1");
  const Checkpoint c1 = load_checkpoint(a.ckpt1, Stage::Structure);
  const Checkpoint c2 = load_checkpoint(a.ckpt2, Stage::Local);
  const VoxelObject src = read_object(a.source);
  Rng rng(a.seed);
  const OccupancyGrid out = edit_object(c1.model, c2.model, src.grid, a.instruction, a.steps, rng);
  write_object(VoxelObject{out, {}}, a.out);
  std::cout << "edited object: " << out.count() << " voxels (source " << src.grid.count() << "); wrote " << a.out
            << "\n";
  if (!a.render.empty()) write_views(out, nullptr, a.render);
  return kExitOk;
}

struct Eval {
  std::string ckpt1, ckpt2, data, report;
  std::size_t steps = 32;
  std::uint64_t seed = 0;
};

int run_eval(const Eval& a) {
  echo("eval effective config", {{"ckpt1", a.ckpt1},
                                 {"ckpt2", a.ckpt2},
                                 {"data", a.data},
                                 {"report", a.report},
                                 {"steps", std::to_string(a.steps)},
                                 {"seed", std::to_string(a.seed)}});
  if (a.steps == 0) throw ConfigError("--steps must be >= 1");
  const Checkpoint c1 = load_checkpoint(a.ckpt1, Stage::Structure);
  const Checkpoint c2 = load_checkpoint(a.ckpt2, Stage::Local);
  const auto testset = read_dataset(a.data);
  const EvalReport rep = evaluate(c1.model, c2.model, testset, a.steps, a.seed);
  const std::string table = rep.table();
  std::cout << "\n" << table;
  write_text(a.report, table);
  write_text(a.report + ".csv", rep.csv());
  std::cout << "wrote " << a.report << " and " << a.report << ".csv\n";
  return kExitOk;
}

struct GradCheck {
  std::string strategy, stage = "structure";
  bool f64 = false;
  std::uint64_t seed = 0;
};

int run_gradcheck(const GradCheck& a) {
  if (!a.f64) throw UsageError("gradcheck runs in 64-bit precision only; pass --f64");
  const Strategy strategy = parse_strategy(a.strategy);
  const Stage stage = parse_stage(a.stage);
  echo("gradcheck effective config",
       {{"strategy", a.strategy}, {"stage", a.stage}, {"seed", std::to_string(a.seed)}, {"eps", "1e-4"}});
  const GradCheckReport rep = check_model_gradients(strategy, stage, a.seed);
  for (const auto& e : rep.entries)
    std::printf("%-28s %6zu elements  max rel err %.3e  max |grad| %.3e\n", e.name.c_str(), e.elements, e.max_rel_err,
                e.max_abs_grad);
  const double worst = rep.max_rel_err();
  std::printf("max relative error %.3e (%s)\n", worst, rep.worst() ? rep.worst()->name.c_str() : "-");
  if (!(worst < 1e-3)) throw NumericalError("gradient check failed: max relative error " + std::to_string(worst));
  return kExitOk;
}

struct Render {
  std::string object, out, highlight;
};

int run_render(const Render& a) {
  echo("render effective config", {{"object", a.object}, {"out", a.out}, {"highlight-part", a.highlight}});
  const VoxelObject obj = read_object(a.object);
  const std::vector<std::uint8_t>* mask = nullptr;
  if (!a.highlight.empty()) {
    for (const auto& [name, m] : obj.parts)
      if (name == a.highlight) mask = &m;
    if (!mask) {
      std::string known;
      for (const auto& p : obj.parts) known += (known.empty() ? "" : ", ") + p.first;
      throw ConfigError("object has no part '" + a.highlight + "' (parts: " + (known.empty() ? "none" : known) + ")");
    }
  }
  write_views(obj.grid, mask, a.out);
  return kExitOk;
}

int exit_code_for(const Error& e) {
  const std::string& tag = e.tag();
  if (tag == "usage" || tag == "config") return kExitUsage;
  if (tag == "numerical") return kExitNumerical;
  return kExitData;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Keep freed activation buffers in the heap instead of returning them to the OS.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  CLI::App app{"n3d: instruction-guided voxel editing with rectified-flow transformers"};
  app.require_subcommand(1);

  GenData gen;
  auto* c_gen = app.add_subcommand("gen-data", "generate a curated edit-triplet dataset");
  c_gen->add_option("--out", gen.out, "dataset file")->required();
  c_gen->add_option("--per-op", gen.per_op, "triplets per edit operation");
  c_gen->add_option("--seed", gen.seed, "generator seed");
  c_gen->add_option("--lexicon", gen.lexicon, "also write the lexicon (one word per line)");
  c_gen->add_option("--objects-dir", gen.objects_dir, "also write each source object as .n3do");
  add_settings(c_gen, gen.settings);

  Train tr;
  auto* c_train = app.add_subcommand("train", "train one stage of the editor");
  c_train->add_option("--data", tr.data, "dataset file")->required();
  c_train->add_option("--stage", tr.stage, "structure | local")->required();
  c_train->add_option("--strategy", tr.strategy, "token-concat | cross-attn")->required();
  c_train->add_option("--out", tr.out, "checkpoint file")->required();
  c_train->add_option("--losses", tr.losses, "loss curve CSV (default: <out>.losses.csv)");
  add_settings(c_train, tr.settings);

  Edit ed;
  auto* c_edit = app.add_subcommand("edit", "edit one object");
  c_edit->add_option("--ckpt1", ed.ckpt1, "structure-stage checkpoint")->required();
  c_edit->add_option("--ckpt2", ed.ckpt2, "local-stage checkpoint")->required();
  c_edit->add_option("--source", ed.source, "source object (.n3do)")->required();
  c_edit->add_option("--instruction", ed.instruction, "edit instruction")->required();
  c_edit->add_option("--steps", ed.steps, "Euler sampling steps")->capture_default_str();
  c_edit->add_option("--seed", ed.seed, "sampling seed")->capture_default_str();
  c_edit->add_option("--out", ed.out, "edited object (.n3do)")->required();
  c_edit->add_option("--render", ed.render, "write five PPM views of the result here");

  Eval ev;
  auto* c_eval = app.add_subcommand("eval", "evaluate a checkpoint pair on a dataset");
  c_eval->add_option("--ckpt1", ev.ckpt1, "structure-stage checkpoint")->required();
  c_eval->add_option("--ckpt2", ev.ckpt2, "local-stage checkpoint")->required();
  c_eval->add_option("--data", ev.data, "dataset file")->required();
  c_eval->add_option("--report", ev.report, "report table; per-sample CSV goes to <report>.csv")->required();
  c_eval->add_option("--steps", ev.steps, "Euler sampling steps")->capture_default_str();
  c_eval->add_option("--seed", ev.seed, "sampling seed")->capture_default_str();

  GradCheck gc;
  auto* c_gc = app.add_subcommand("gradcheck", "finite-difference check of the model gradients");
  c_gc->add_option("--strategy", gc.strategy, "token-concat | cross-attn")->required();
  c_gc->add_option("--stage", gc.stage, "structure | local")->capture_default_str();
  c_gc->add_option("--seed", gc.seed, "parameter seed")->capture_default_str();
  c_gc->add_flag("--f64", gc.f64, "run in 64-bit precision (required)");

  Render rd;
  auto* c_render = app.add_subcommand("render", "write five orthographic PPM views of an object");
  c_render->add_option("--object", rd.object, "object file (.n3do)")->required();
  c_render->add_option("--out", rd.out, "output directory")->required();
  c_render->add_option("--highlight-part", rd.highlight, "part to draw in the highlight color");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (*c_gen) return run_gen_data(gen);
    if (*c_train) return run_train(tr);
    if (*c_edit) return run_edit(ed);
    if (*c_eval) return run_eval(ev);
    if (*c_gc) return run_gradcheck(gc);
    if (*c_render) return run_render(rd);
  } catch (const Error& e) {
    std::cout << std::flush;
    std::cerr << "error[" << e.tag() << "]: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cout << std::flush;
    std::cerr << "error[internal]: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}
