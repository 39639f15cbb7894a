#include "crossmodal/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "crossmodal/bidir.hpp"
#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/metrics.hpp"

namespace crossmodal {

namespace {

constexpr std::uint64_t kModelSeedSalt = 0x632be59bd9b4e019ULL;
constexpr std::uint64_t kHeadSeedSalt = 0x85ebca77c2b2ae63ULL;

const char* kCsvHeader =
    "dataset,arch,d_model,n_layers,pretrained,method,bidir_method,seed_count,"
    "nrmse_mean,nrmse_min,nrmse_max,wallclock_s";

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

nlohmann::json number(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json();
}

double number_from(const nlohmann::json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

nlohmann::json optional_path(const std::optional<std::filesystem::path>& p) {
  return p ? nlohmann::json(p->string()) : nlohmann::json();
}

std::optional<std::filesystem::path> optional_path_from(const nlohmann::json& j,
                                                        const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return std::filesystem::path(j.at(key).get<std::string>());
}

void require_file(const std::filesystem::path& path, const std::string& what) {
  if (!std::filesystem::exists(path)) {
    throw IoError(what + " not found: " + path.string());
  }
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json stage1_json(const Stage1Report& r) {
  return {{"trace", r.trace},
          {"initial_distance", number(r.initial_distance)},
          {"final_distance", number(r.final_distance)},
          {"degenerate_class_events", r.degenerate_class_events}};
}

Stage1Report stage1_from_json(const nlohmann::json& j) {
  Stage1Report r;
  for (const auto& v : j.at("trace")) r.trace.push_back(static_cast<float>(number_from(v)));
  r.initial_distance = number_from(j.at("initial_distance"));
  r.final_distance = number_from(j.at("final_distance"));
  r.degenerate_class_events = j.value("degenerate_class_events", std::size_t{0});
  return r;
}

nlohmann::json train_json(const TrainReport& r) {
  nlohmann::json j = r;
  j["initial_test_nrmse"] = number(r.initial_test_nrmse);
  j["test_nrmse"] = number(r.test_nrmse);
  j["train_nrmse"] = number(r.train_nrmse);
  return j;
}

TrainReport train_from_json(const nlohmann::json& j) {
  TrainReport r;
  for (const auto& v : j.at("epoch_losses"))
    r.epoch_losses.push_back(static_cast<float>(number_from(v)));
  r.initial_test_nrmse = number_from(j.at("initial_test_nrmse"));
  r.test_nrmse = number_from(j.at("test_nrmse"));
  r.train_nrmse = number_from(j.at("train_nrmse"));
  r.steps = j.at("steps").get<std::size_t>();
  r.optimizer = optimizer_kind_from_string(j.at("optimizer").get<std::string>());
  r.learning_rate = j.at("learning_rate").get<float>();
  r.batch_size = j.at("batch_size").get<std::size_t>();
  r.diverged = j.at("diverged").get<bool>();
  r.diagnostic = j.at("diagnostic").get<std::string>();
  return r;
}

PdeDataset load_dataset(const DatasetSpec& spec) {
  if (spec.path) {
    require_file(*spec.path, "dataset");
    return read_dataset(*spec.path);
  }
  return generate_dataset(spec.params, spec.n_train, spec.n_test, spec.grid, spec.seed);
}

SyntheticCorpus load_corpus(const std::optional<std::filesystem::path>& path,
                            std::uint64_t seed, std::size_t sequences,
                            const std::string& what) {
  if (path) {
    require_file(*path, what);
    return read_corpus(*path);
  }
  return gen_corpus(seed, sequences);
}

ProxyEmbeddingSet load_proxy(const ExperimentConfig& config,
                             const TransformerModel& source) {
  if (config.proxy.path) {
    require_file(*config.proxy.path, "proxy set");
    return read_proxy_set(*config.proxy.path);
  }
  auto corpus = load_corpus(config.proxy.corpus_path, config.proxy.corpus_seed,
                            config.proxy.corpus_sequences, "proxy corpus");
  return build_proxy_set(source, corpus);
}

struct Prepared {
  PdeDataset dataset;
  std::optional<TransformerModel> shared_model;
  std::optional<ProxyEmbeddingSet> shared_proxy;
};

RunRecord run_one(const ExperimentConfig& config, const Prepared& prepared,
                  std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  RunRecord record;
  record.started_at = utc_now();
  record.config = config;
  record.seed = seed;

  TransformerModel model = prepared.shared_model ? prepared.shared_model->clone()
                                                 : source_model(config, seed);
  record.source_model_id = model_id(model);
  const auto& adaptation = config.adaptation;
  std::optional<ProxyEmbeddingSet> own_proxy;
  const ProxyEmbeddingSet* proxy = nullptr;
  if (adaptation.method == AdaptationMethod::ORCA) {
    if (prepared.shared_proxy) {
      proxy = &*prepared.shared_proxy;
    } else {
      own_proxy = load_proxy(config, model);
      proxy = &*own_proxy;
    }
  }

  const auto& data = prepared.dataset;
  AdaptationConfig run_config = adaptation;
  run_config.seed = mix(adaptation.seed, seed);
  const std::uint64_t head_seed = mix(seed, kHeadSeedSalt);
  std::vector<Tensor> predictions;

  if (adaptation.bidir_method == BidirMethod::ParallelFlipping) {
    TransformerModel reversed_model = model.clone();
    FlipPair pair{make_pipeline(std::move(model), 1, 1, head_seed),
                  make_pipeline(std::move(reversed_model), 1, 1, mix(head_seed, 1))};
    auto report = parallel_flipping_train(pair, data, proxy, run_config);
    if (proxy) record.stage1 = {report.forward_stage1, report.reversed_stage1};
    record.training = {report.forward, report.reversed};
    if (std::isfinite(report.test_nrmse)) {
      NoGradGuard no_grad;
      for (const auto& inst : data.test)
        predictions.push_back(predict_flip_pair(pair, instance_input(inst)));
    }
  } else {
    Pipeline pipeline = make_pipeline(std::move(model), 1, 1, head_seed);
    if (proxy) record.stage1 = {orca_stage1(pipeline, *proxy, data.train, run_config)};
    record.training = {finetune(pipeline, data, finetune_policy(adaptation.method), run_config)};
    if (!record.training.front().diverged) {
      NoGradGuard no_grad;
      const PredictOptions options{adaptation.bidir_method, adaptation.restart_positions};
      for (const auto& inst : data.test)
        predictions.push_back(predict_sequence(pipeline, instance_input(inst), options));
    }
  }

  record.converged = std::none_of(record.training.begin(), record.training.end(),
                                  [](const TrainReport& r) { return r.diverged; });
  if (record.converged && !predictions.empty()) {
    double err = 0.0, first = 0.0, second = 0.0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
      err += nrmse(predictions[i], instance_target(data.test[i]));
      const auto [a, b] = spikiness_diagnostic(predictions[i]);
      first += a;
      second += b;
    }
    const double n = static_cast<double>(predictions.size());
    record.test_nrmse = err / n;
    record.first_half_tv = first / n;
    record.second_half_tv = second / n;
  } else {
    record.test_nrmse = record.first_half_tv = record.second_half_tv =
        std::numeric_limits<double>::quiet_NaN();
  }
  record.wallclock_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return record;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 2) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  dataset.params.validate();
  dataset.grid.validate();
  adaptation.validate();
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  if (!dataset.path && (dataset.n_train == 0 || dataset.n_test == 0))
    throw ConfigError("dataset splits must be nonempty");
  const std::size_t needed =
      adaptation.bidir_method == BidirMethod::SequenceDoubling ? 2 * dataset.grid.n_x
                                                               : dataset.grid.n_x;
  if (!dataset.path && model.max_positions < needed) {
    throw ConfigError("model max_positions " + std::to_string(model.max_positions) +
                      " below the " + std::to_string(needed) + " positions this run needs");
  }
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  const auto& s = c.pretraining.schedule;
  j = {{"name", c.name},
       {"dataset",
        {{"family", to_string(c.dataset.params.family)},
         {"params", c.dataset.params},
         {"grid", c.dataset.grid},
         {"n_train", c.dataset.n_train},
         {"n_test", c.dataset.n_test},
         {"seed", c.dataset.seed},
         {"path", optional_path(c.dataset.path)}}},
       {"model", c.model},
       {"pretrained", c.pretrained},
       {"checkpoint", optional_path(c.checkpoint)},
       {"pretraining",
        {{"corpus_sequences", c.pretraining.corpus_sequences},
         {"corpus_seed", c.pretraining.corpus_seed},
         {"corpus_path", optional_path(c.pretraining.corpus_path)},
         {"steps", s.steps},
         {"batch_size", s.batch_size},
         {"pad_length", s.pad_length},
         {"optimizer", to_string(s.optimizer.kind)},
         {"learning_rate", s.optimizer.learning_rate},
         {"seed", s.seed}}},
       {"proxy",
        {{"corpus_sequences", c.proxy.corpus_sequences},
         {"corpus_seed", c.proxy.corpus_seed},
         {"corpus_path", optional_path(c.proxy.corpus_path)},
         {"path", optional_path(c.proxy.path)}}},
       {"adaptation", c.adaptation},
       {"seeds", c.seeds},
       {"output_dir", c.output_dir.string()}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  c.name = j.value("name", c.name);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    const auto family = pde_family_from_string(
        d.contains("family") ? d.at("family").get<std::string>()
                             : d.at("params").at("family").get<std::string>());
    c.dataset.params = default_params(family);
    if (d.contains("params")) {
      auto p = d.at("params");
      p["family"] = to_string(family);
      c.dataset.params = p.get<PdeParams>();
    }
    std::size_t n_x = d.value("n_x", std::size_t{128});
    if (d.contains("grid")) n_x = d.at("grid").value("n_x", n_x);
    c.dataset.grid = default_grid(family, n_x);
    if (d.contains("grid")) {
      const auto& g = d.at("grid");
      c.dataset.grid.dt_solver = g.value("dt_solver", c.dataset.grid.dt_solver);
      c.dataset.grid.t_in = g.value("t_in", c.dataset.grid.t_in);
      c.dataset.grid.t_out = g.value("t_out", c.dataset.grid.t_out);
    }
    c.dataset.n_train = d.value("n_train", c.dataset.n_train);
    c.dataset.n_test = d.value("n_test", c.dataset.n_test);
    c.dataset.seed = d.value("seed", c.dataset.seed);
    c.dataset.path = optional_path_from(d, "path");
  }
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  c.pretrained = j.value("pretrained", c.pretrained);
  c.checkpoint = optional_path_from(j, "checkpoint");
  if (j.contains("pretraining")) {
    const auto& p = j.at("pretraining");
    auto& s = c.pretraining.schedule;
    c.pretraining.corpus_sequences = p.value("corpus_sequences", c.pretraining.corpus_sequences);
    c.pretraining.corpus_seed = p.value("corpus_seed", c.pretraining.corpus_seed);
    c.pretraining.corpus_path = optional_path_from(p, "corpus_path");
    s.steps = p.value("steps", s.steps);
    s.batch_size = p.value("batch_size", s.batch_size);
    s.pad_length = p.value("pad_length", s.pad_length);
    if (p.contains("optimizer"))
      s.optimizer.kind = optimizer_kind_from_string(p.at("optimizer").get<std::string>());
    s.optimizer.learning_rate = p.value("learning_rate", s.optimizer.learning_rate);
    s.seed = p.value("seed", s.seed);
  }
  if (j.contains("proxy")) {
    const auto& p = j.at("proxy");
    c.proxy.corpus_sequences = p.value("corpus_sequences", c.proxy.corpus_sequences);
    c.proxy.corpus_seed = p.value("corpus_seed", c.proxy.corpus_seed);
    c.proxy.corpus_path = optional_path_from(p, "corpus_path");
    c.proxy.path = optional_path_from(p, "path");
  }
  if (j.contains("adaptation")) c.adaptation = j.at("adaptation").get<AdaptationConfig>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  c.output_dir = j.value("output_dir", c.output_dir.string());
  c.workers = j.value("workers", c.workers);
}

ExperimentConfig read_experiment_config(const std::filesystem::path& path) {
  require_file(path, "experiment config");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  auto config = j.get<ExperimentConfig>();
  config.validate();
  return config;
}

nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json stage1 = nlohmann::json::array(), training = nlohmann::json::array();
  for (const auto& s : r.stage1) stage1.push_back(stage1_json(s));
  for (const auto& t : r.training) training.push_back(train_json(t));
  return {{"schema_version", kRunRecordSchemaVersion},
          {"config", r.config},
          {"seed", r.seed},
          {"source_model_id", r.source_model_id},
          {"metric",
           {{"name", "nRMSE"},
            {"aggregation", "mean over test instances of ||pred - truth|| / ||truth||"}}},
          {"stage1", stage1},
          {"training", training},
          {"test_nrmse", number(r.test_nrmse)},
          {"spikiness",
           {{"first_half_tv", number(r.first_half_tv)},
            {"second_half_tv", number(r.second_half_tv)}}},
          {"converged", r.converged},
          {"timing", {{"wallclock_s", r.wallclock_s}, {"started_at", r.started_at}}}};
}

RunRecord run_record_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", 0) != kRunRecordSchemaVersion) {
    throw IoError("unsupported run record schema version " +
                  std::to_string(j.value("schema_version", 0)));
  }
  RunRecord r;
  r.config = j.at("config");
  r.seed = j.at("seed").get<std::uint64_t>();
  r.source_model_id = j.at("source_model_id").get<std::string>();
  for (const auto& s : j.at("stage1")) r.stage1.push_back(stage1_from_json(s));
  for (const auto& t : j.at("training")) r.training.push_back(train_from_json(t));
  r.test_nrmse = number_from(j.at("test_nrmse"));
  r.first_half_tv = number_from(j.at("spikiness").at("first_half_tv"));
  r.second_half_tv = number_from(j.at("spikiness").at("second_half_tv"));
  r.converged = j.at("converged").get<bool>();
  r.wallclock_s = j.at("timing").at("wallclock_s").get<double>();
  r.started_at = j.at("timing").at("started_at").get<std::string>();
  return r;
}

std::string record_fingerprint(const RunRecord& r) {
  auto j = to_json(r);
  j.erase("timing");
  return j.dump();
}

std::string run_file_name(const ExperimentConfig& config, std::uint64_t seed) {
  std::ostringstream name;
  name << config.name << "__" << to_string(config.dataset.params.family) << "__"
       << to_string(config.model.arch) << "__" << to_string(config.adaptation.method)
       << "__" << to_string(config.adaptation.bidir_method) << "__seed" << seed << ".json";
  return name.str();
}

TransformerModel source_model(const ExperimentConfig& config, std::uint64_t seed) {
  if (!config.pretrained) {
    ModelConfig c = config.model;
    c.seed = mix(config.model.seed, mix(seed, kModelSeedSalt));
    return build_model(c);
  }
  if (config.checkpoint) {
    require_file(*config.checkpoint, "pretrained checkpoint");
    auto model = load_checkpoint(*config.checkpoint);
    if (model.config().d_model != config.model.d_model ||
        model.config().n_layers != config.model.n_layers ||
        model.config().arch != config.model.arch) {
      throw ConfigError("checkpoint " + config.checkpoint->string() +
                        " does not match the configured model");
    }
    return model;
  }
  auto model = build_model(config.model);
  auto corpus = load_corpus(config.pretraining.corpus_path, config.pretraining.corpus_seed,
                            config.pretraining.corpus_sequences, "pretraining corpus");
  pretrain_on_corpus(model, corpus, config.pretraining.schedule);
  return model;
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& config) {
  config.validate();
  Prepared prepared;
  prepared.dataset = load_dataset(config.dataset);
  const std::size_t L = prepared.dataset.grid.n_x;
  const std::size_t needed =
      config.adaptation.bidir_method == BidirMethod::SequenceDoubling ? 2 * L : L;
  if (config.model.max_positions < needed) {
    throw ConfigError("model max_positions below the " + std::to_string(needed) +
                      " positions this run needs");
  }
  if (config.pretrained) {
    prepared.shared_model = source_model(config, 0);
    if (config.adaptation.method == AdaptationMethod::ORCA)
      prepared.shared_proxy = load_proxy(config, *prepared.shared_model);
  }

  std::filesystem::create_directories(config.output_dir);
  std::vector<RunRecord> records(config.seeds.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
      try {
        records[i] = run_one(config, prepared, config.seeds[i]);
        write_text_atomic(config.output_dir / run_file_name(config, config.seeds[i]),
                          to_json(records[i]).dump(2) + "\n");
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::size_t workers = config.workers ? config.workers : std::thread::hardware_concurrency();
  workers = std::clamp<std::size_t>(workers, 1, config.seeds.size());
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return records;
}

std::vector<RunRecord> load_run_records(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("records directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".json")
      files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> records;
  for (const auto& f : files) {
    try {
      records.push_back(run_record_from_json(nlohmann::json::parse(read_text(f))));
    } catch (const nlohmann::json::exception& e) {
      throw IoError(f.string() + ": " + e.what());
    }
  }
  return records;
}

std::string ResultsRow::label() const {
  return dataset + " " + arch + " d" + std::to_string(d_model) + " L" +
         std::to_string(n_layers) + (pretrained ? "" : " scratch") + " " + method + " " +
         bidir_method;
}

ResultsTable build_results_table(const std::vector<RunRecord>& records) {
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t, bool,
                         std::string, std::string>;
  std::vector<Key> order;
  std::map<Key, std::vector<const RunRecord*>> groups;
  for (const auto& r : records) {
    const auto& c = r.config;
    Key key{c.at("dataset").at("family").get<std::string>(),
            c.at("model").at("arch").get<std::string>(),
            c.at("model").at("d_model").get<std::size_t>(),
            c.at("model").at("n_layers").get<std::size_t>(),
            c.at("pretrained").get<bool>(),
            c.at("adaptation").at("method").get<std::string>(),
            c.at("adaptation").at("bidir_method").get<std::string>()};
    if (!groups.contains(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  ResultsTable table;
  for (const auto& key : order) {
    ResultsRow row;
    std::tie(row.dataset, row.arch, row.d_model, row.n_layers, row.pretrained, row.method,
             row.bidir_method) = key;
    double sum = 0.0, time = 0.0;
    row.nrmse_min = std::numeric_limits<double>::infinity();
    row.nrmse_max = -std::numeric_limits<double>::infinity();
    for (const auto* r : groups[key]) {
      if (!std::isfinite(r->test_nrmse)) continue;
      ++row.seed_count;
      sum += r->test_nrmse;
      time += r->wallclock_s;
      row.nrmse_min = std::min(row.nrmse_min, r->test_nrmse);
      row.nrmse_max = std::max(row.nrmse_max, r->test_nrmse);
    }
    if (row.seed_count == 0) {
      row.nrmse_mean = row.nrmse_min = row.nrmse_max =
          std::numeric_limits<double>::quiet_NaN();
    } else {
      row.nrmse_mean = sum / static_cast<double>(row.seed_count);
      row.wallclock_s = time / static_cast<double>(row.seed_count);
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

std::string results_csv(const ResultsTable& table) {
  std::ostringstream out;
  out << kCsvHeader << "\n";
  for (const auto& r : table.rows) {
    for (const auto* field : {&r.dataset, &r.arch, &r.method, &r.bidir_method}) {
      if (field->find_first_of(",\n\"") != std::string::npos)
        throw ContractError("CSV field contains a separator: " + *field);
    }
    out << r.dataset << ',' << r.arch << ',' << r.d_model << ',' << r.n_layers << ','
        << (r.pretrained ? "true" : "false") << ',' << r.method << ',' << r.bidir_method
        << ',' << r.seed_count << ',' << format_double(r.nrmse_mean) << ','
        << format_double(r.nrmse_min) << ',' << format_double(r.nrmse_max) << ','
        << format_double(r.wallclock_s) << "\n";
  }
  return out.str();
}

ResultsTable parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader)
    throw IoError("results CSV has an unexpected header");
  ResultsTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 12)
      throw IoError("results CSV line " + std::to_string(line_no) + " has " +
                    std::to_string(f.size()) + " fields");
    try {
      ResultsRow r;
      r.dataset = f[0];
      r.arch = f[1];
      r.d_model = std::stoul(f[2]);
      r.n_layers = std::stoul(f[3]);
      r.pretrained = f[4] == "true";
      r.method = f[5];
      r.bidir_method = f[6];
      r.seed_count = std::stoul(f[7]);
      r.nrmse_mean = std::stod(f[8]);
      r.nrmse_min = std::stod(f[9]);
      r.nrmse_max = std::stod(f[10]);
      r.wallclock_s = std::stod(f[11]);
      table.rows.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw IoError("results CSV line " + std::to_string(line_no) + " is malformed");
    }
  }
  return table;
}

void write_results_csv(const std::filesystem::path& path, const ResultsTable& table) {
  write_text_atomic(path, results_csv(table));
}

ResultsTable read_results_csv(const std::filesystem::path& path) {
  require_file(path, "results table");
  return parse_results_csv(read_text(path));
}

std::string emit_figure(const ResultsTable& table, const FigureStyle& style) {
  if (table.rows.empty()) throw ContractError("emit_figure needs a nonempty table");

  // Datasets form groups in order of first appearance.
  std::vector<std::string> datasets;
  for (const auto& r : table.rows)
    if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end())
      datasets.push_back(r.dataset);
  std::vector<std::string> series;
  for (const auto& r : table.rows) {
    const auto s = r.arch + " " + r.method + " " + r.bidir_method;
    if (std::find(series.begin(), series.end(), s) == series.end()) series.push_back(s);
  }
  static const char* kPalette[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                                   "#66ccee", "#aa3377", "#bbbbbb", "#000000"};

  const double bar_w = 28.0, bar_gap = 6.0, group_gap = 30.0;
  const double left = 64.0, right = 24.0, top = 40.0, bottom = 60.0;
  const double legend_h = 18.0 * static_cast<double>(series.size());
  double plot_w = 0.0;
  std::vector<std::size_t> per_group(datasets.size(), 0);
  for (const auto& r : table.rows)
    ++per_group[static_cast<std::size_t>(
        std::find(datasets.begin(), datasets.end(), r.dataset) - datasets.begin())];
  for (std::size_t n : per_group)
    plot_w += static_cast<double>(n) * (bar_w + bar_gap) + group_gap;
  const double width = style.width > 0 ? style.width : left + plot_w + right;
  const double height = style.height + legend_h;
  const double plot_h = style.height - top - bottom;

  double y_max = 0.0;
  for (const auto& r : table.rows) {
    if (!std::isfinite(r.nrmse_mean)) continue;
    y_max = std::max(y_max, style.bars_minmax ? r.nrmse_max : r.nrmse_mean);
  }
  if (!(y_max > 0.0)) y_max = 1.0;
  y_max *= 1.1;
  auto y_of = [&](double v) { return top + plot_h * (1.0 - v / y_max); };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << fixed(width) << "\" height=\""
      << fixed(height) << "\" viewBox=\"0 0 " << fixed(width) << ' ' << fixed(height)
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<title>" << xml_escape(style.title) << "</title>\n";
  svg << "<rect x=\"0\" y=\"0\" width=\"" << fixed(width) << "\" height=\"" << fixed(height)
      << "\" fill=\"white\"/>\n";
  svg << "<text x=\"" << fixed(width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
      << xml_escape(style.title) << "</text>\n";

  // Axis and ticks.
  svg << "<line class=\"axis\" x1=\"" << fixed(left) << "\" y1=\"" << fixed(top) << "\" x2=\""
      << fixed(left) << "\" y2=\"" << fixed(top + plot_h) << "\" stroke=\"black\"/>\n";
  svg << "<line class=\"axis\" x1=\"" << fixed(left) << "\" y1=\"" << fixed(top + plot_h)
      << "\" x2=\"" << fixed(width - right) << "\" y2=\"" << fixed(top + plot_h)
      << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double v = y_max * t / 5.0;
    svg << "<text x=\"" << fixed(left - 6) << "\" y=\"" << fixed(y_of(v) + 4)
        << "\" text-anchor=\"end\">" << fixed(v, 3) << "</text>\n";
  }
  svg << "<text x=\"16\" y=\"" << fixed(top + plot_h / 2) << "\" transform=\"rotate(-90 16 "
      << fixed(top + plot_h / 2) << ")\" text-anchor=\"middle\">nRMSE</text>\n";

  double x = left + group_gap / 2;
  for (const auto& dataset : datasets) {
    const double group_start = x;
    for (const auto& r : table.rows) {
      if (r.dataset != dataset) continue;
      const auto s = r.arch + " " + r.method + " " + r.bidir_method;
      const auto color = kPalette[static_cast<std::size_t>(
                                      std::find(series.begin(), series.end(), s) -
                                      series.begin()) % 8];
      const double mean = std::isfinite(r.nrmse_mean) ? r.nrmse_mean : 0.0;
      svg << "<g class=\"bar\">\n<title>" << xml_escape(r.label()) << ": mean "
          << fixed(r.nrmse_mean, 4) << ", min " << fixed(r.nrmse_min, 4) << ", max "
          << fixed(r.nrmse_max, 4) << " (" << r.seed_count << " seeds)</title>\n";
      svg << "<rect x=\"" << fixed(x) << "\" y=\"" << fixed(y_of(mean)) << "\" width=\""
          << fixed(bar_w) << "\" height=\"" << fixed(top + plot_h - y_of(mean))
          << "\" fill=\"" << color << "\"/>\n";
      if (style.bars_minmax && std::isfinite(r.nrmse_mean)) {
        const double cx = x + bar_w / 2;
        svg << "<line class=\"whisker\" x1=\"" << fixed(cx) << "\" y1=\"" << fixed(y_of(r.nrmse_min))
            << "\" x2=\"" << fixed(cx) << "\" y2=\"" << fixed(y_of(r.nrmse_max))
            << "\" stroke=\"black\"/>\n";
        for (double v : {r.nrmse_min, r.nrmse_max}) {
          svg << "<line class=\"cap\" x1=\"" << fixed(cx - 6) << "\" y1=\"" << fixed(y_of(v))
              << "\" x2=\"" << fixed(cx + 6) << "\" y2=\"" << fixed(y_of(v))
              << "\" stroke=\"black\"/>\n";
        }
      }
      svg << "</g>\n";
      x += bar_w + bar_gap;
    }
    svg << "<text x=\"" << fixed((group_start + x - bar_gap) / 2) << "\" y=\""
        << fixed(top + plot_h + 18) << "\" text-anchor=\"middle\">" << xml_escape(dataset)
        << "</text>\n";
    x += group_gap;
  }

  double ly = style.height - 12.0;
  for (std::size_t s = 0; s < series.size(); ++s) {
    svg << "<rect x=\"" << fixed(left) << "\" y=\"" << fixed(ly) << "\" width=\"12\" height=\"12\" fill=\""
        << kPalette[s % 8] << "\"/>\n";
    svg << "<text x=\"" << fixed(left + 18) << "\" y=\"" << fixed(ly + 10) << "\">"
        << xml_escape(series[s]) << "</text>\n";
    ly += 18.0;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace crossmodal
