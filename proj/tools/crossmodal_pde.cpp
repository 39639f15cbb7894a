#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/experiments.hpp"
#include "doctor.hpp"

using namespace crossmodal;
namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  bool seed_given() const { return seed_option && seed_option->count() > 0; }
  CLI::Option* seed_option = nullptr;
};

void add_common(CLI::App* cmd, CommonFlags& flags, const std::string& out_help) {
  flags.seed_option = cmd->add_option("--seed", flags.seed, "Random seed");
  cmd->add_option("--out", flags.out, out_help);
  cmd->add_option("--config", flags.config, "JSON configuration file");
}

nlohmann::json read_json_file(const std::string& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path);
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void emit_text(const std::string& out, const std::string& text) {
  if (out.empty() || out == "-") {
    std::cout << text;
  } else {
    write_text_atomic(out, text);
  }
}

void require_out(const CommonFlags& flags, const std::string& what) {
  if (flags.out.empty()) throw ConfigError("--out is required: path of the " + what);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cross-modal PDE adaptation toolkit"};
  app.require_subcommand(1);

  // gen
  CommonFlags gen_flags;
  std::string gen_family = "advection";
  std::size_t gen_train = 64, gen_test = 16, gen_nx = 128;
  auto* gen = app.add_subcommand("gen", "Generate a PDE dataset");
  add_common(gen, gen_flags, "Dataset file to write");
  gen->add_option("--family", gen_family, "advection, diffusion-reaction, diffusion-sorption, burgers");
  gen->add_option("--n-train", gen_train, "Training instances");
  gen->add_option("--n-test", gen_test, "Test instances");
  gen->add_option("--nx", gen_nx, "Spatial grid points");

  // corpus
  CommonFlags corpus_flags;
  std::size_t corpus_sequences = 2000;
  std::string corpus_model, corpus_proxy;
  auto* corpus = app.add_subcommand("corpus", "Generate the tagged proxy corpus");
  add_common(corpus, corpus_flags, "Corpus file to write");
  corpus->add_option("--sequences", corpus_sequences, "Number of sequences");
  corpus->add_option("--model", corpus_model, "Checkpoint used to embed the corpus");
  corpus->add_option("--proxy", corpus_proxy, "Proxy embedding set to write (needs --model)");

  // pretrain
  CommonFlags pre_flags;
  std::string pre_corpus, pre_arch = "decoder";
  std::size_t pre_sequences = 2000, pre_steps = 200, pre_d = 64, pre_layers = 4,
              pre_heads = 4, pre_positions = 256;
  auto* pretrain = app.add_subcommand("pretrain", "Build and pretrain a model on the corpus");
  add_common(pretrain, pre_flags, "Checkpoint to write");
  pretrain->add_option("--corpus", pre_corpus, "Corpus file (generated from --seed when absent)");
  pretrain->add_option("--sequences", pre_sequences, "Sequences when generating the corpus");
  pretrain->add_option("--arch", pre_arch, "encoder or decoder");
  pretrain->add_option("--d-model", pre_d, "Model width");
  pretrain->add_option("--layers", pre_layers, "Transformer blocks");
  pretrain->add_option("--heads", pre_heads, "Attention heads");
  pretrain->add_option("--max-positions", pre_positions, "Positional table size");
  pretrain->add_option("--steps", pre_steps, "Pretraining steps");

  // run
  CommonFlags run_flags;
  std::size_t run_workers = 0;
  auto* run = app.add_subcommand("run", "Run an experiment from a JSON config");
  add_common(run, run_flags, "Output directory for run records (overrides the config)");
  run->add_option("--workers", run_workers, "Parallel runs (default: hardware threads)");

  // table
  CommonFlags table_flags;
  std::string table_in;
  auto* table = app.add_subcommand("table", "Aggregate run records into a CSV table");
  add_common(table, table_flags, "CSV file to write (stdout when absent)");
  table->add_option("--in", table_in, "Directory of run records (default: the config's output_dir)");

  // plot
  CommonFlags plot_flags;
  std::string plot_in, plot_title = "Test nRMSE";
  auto* plot = app.add_subcommand("plot", "Render a results CSV as an SVG bar chart");
  add_common(plot, plot_flags, "SVG file to write (stdout when absent)");
  plot->add_option("--in", plot_in, "Results CSV")->required();
  plot->add_option("--title", plot_title, "Figure title");

  // doctor
  CommonFlags doctor_flags;
  auto* doctor = app.add_subcommand("doctor", "Run the invariant self-checks");
  add_common(doctor, doctor_flags, "Write the report to this file as well");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      require_out(gen_flags, "dataset");
      DatasetSpec spec;
      if (!gen_flags.config.empty()) {
        nlohmann::json j{{"dataset", read_json_file(gen_flags.config)}};
        spec = j.get<ExperimentConfig>().dataset;
      } else {
        const auto family = pde_family_from_string(gen_family);
        spec.params = default_params(family);
        spec.grid = default_grid(family, gen_nx);
        spec.n_train = gen_train;
        spec.n_test = gen_test;
      }
      spec.seed = gen_flags.seed;
      auto data = build_dataset(gen_flags.out, spec.params, spec.n_train, spec.n_test,
                                spec.grid, spec.seed);
      std::cout << "wrote " << data.train.size() << " train / " << data.test.size() << " test "
                << to_string(data.family) << " instances to " << gen_flags.out << "\n";
    } else if (corpus->parsed()) {
      require_out(corpus_flags, "corpus");
      CorpusSpec spec;
      if (!corpus_flags.config.empty()) spec = read_json_file(corpus_flags.config).get<CorpusSpec>();
      auto c = gen_corpus(corpus_flags.seed, corpus_sequences, spec);
      write_corpus(corpus_flags.out, c);
      std::cout << "wrote " << c.sequences.size() << " sequences (" << c.token_count()
                << " tokens) to " << corpus_flags.out << "\n";
      if (!corpus_proxy.empty()) {
        if (corpus_model.empty()) throw ConfigError("--proxy needs --model");
        if (!fs::exists(corpus_model)) throw IoError("checkpoint not found: " + corpus_model);
        auto set = build_proxy_set(load_checkpoint(corpus_model), c);
        write_proxy_set(corpus_proxy, set);
        std::cout << "wrote " << set.labels.size() << " proxy features to " << corpus_proxy << "\n";
      }
    } else if (pretrain->parsed()) {
      require_out(pre_flags, "checkpoint");
      ModelConfig mc;
      if (!pre_flags.config.empty()) {
        mc = read_json_file(pre_flags.config).get<ModelConfig>();
      } else {
        mc.arch = architecture_from_string(pre_arch);
        mc.d_model = pre_d;
        mc.n_layers = pre_layers;
        mc.n_heads = pre_heads;
        mc.d_ff = 4 * pre_d;
        mc.max_positions = pre_positions;
      }
      SyntheticCorpus c;
      if (!pre_corpus.empty()) {
        if (!fs::exists(pre_corpus)) throw IoError("corpus not found: " + pre_corpus);
        c = read_corpus(pre_corpus);
      } else {
        c = gen_corpus(pre_flags.seed, pre_sequences);
      }
      auto model = build_model(mc);
      PretrainSchedule schedule;
      schedule.steps = pre_steps;
      schedule.seed = pre_flags.seed;
      auto trace = pretrain_on_corpus(model, c, schedule);
      save_checkpoint(pre_flags.out, model);
      std::cout << "pretrained " << to_string(mc.arch) << " d" << mc.d_model << " x"
                << mc.n_layers << ": loss " << trace.front() << " -> " << trace.back()
                << "; wrote " << pre_flags.out << "\n";
    } else if (run->parsed()) {
      if (run_flags.config.empty()) throw ConfigError("run needs --config");
      auto config = read_experiment_config(run_flags.config);
      if (!run_flags.out.empty()) config.output_dir = run_flags.out;
      if (run_flags.seed_given()) config.seeds = {run_flags.seed};
      if (run_workers) config.workers = run_workers;
      for (const auto& r : run_experiment(config)) {
        std::cout << config.name << " seed " << r.seed << ": test nRMSE " << r.test_nrmse
                  << (r.converged ? "" : " (diverged)") << "\n";
      }
    } else if (table->parsed()) {
      std::string dir = table_in;
      if (dir.empty() && !table_flags.config.empty())
        dir = read_experiment_config(table_flags.config).output_dir.string();
      if (dir.empty()) throw ConfigError("table needs --in or --config");
      emit_text(table_flags.out, results_csv(build_results_table(load_run_records(dir))));
    } else if (plot->parsed()) {
      FigureStyle style;
      style.title = plot_title;
      emit_text(plot_flags.out, emit_figure(read_results_csv(plot_in), style));
    } else if (doctor->parsed()) {
      std::ostringstream report;
      const int failed = tools::run_doctor(doctor_flags.seed, report);
      std::cout << report.str();
      if (!doctor_flags.out.empty()) write_text_atomic(doctor_flags.out, report.str());
      return failed == 0 ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
