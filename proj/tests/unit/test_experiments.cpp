#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>
#include <regex>

#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"
#include "crossmodal/experiments.hpp"
#include "crossmodal/metrics.hpp"
#include "doctest.h"

using namespace crossmodal;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("crossmodal_test_experiments_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ExperimentConfig tiny_experiment(const fs::path& out) {
  ExperimentConfig c;
  c.name = "tiny";
  c.dataset.params = default_params(PdeFamily::Advection);
  c.dataset.grid = default_grid(PdeFamily::Advection, 16);
  c.dataset.n_train = 8;
  c.dataset.n_test = 4;
  c.dataset.seed = 3;
  c.model.d_model = 16;
  c.model.n_heads = 2;
  c.model.n_layers = 1;
  c.model.d_ff = 32;
  c.model.max_positions = 32;
  c.pretrained = false;
  c.pretraining.corpus_sequences = 40;
  c.pretraining.schedule.steps = 3;
  c.proxy.corpus_sequences = 20;
  c.adaptation.method = AdaptationMethod::FPT;
  c.adaptation.epochs = 2;
  c.adaptation.batch_size = 4;
  c.adaptation.stage1_steps = 2;
  c.seeds = {7};
  c.output_dir = out;
  c.workers = 1;
  return c;
}

RunRecord fake_record(const std::string& family, const std::string& bidir, double nrmse,
                      std::uint64_t seed) {
  ExperimentConfig c;
  c.dataset.params = default_params(pde_family_from_string(family));
  c.adaptation.bidir_method = bidir_method_from_string(bidir);
  RunRecord r;
  r.config = c;
  r.seed = seed;
  r.test_nrmse = nrmse;
  r.wallclock_s = 1.0;
  return r;
}

double attr(const std::string& tag, const std::string& name) {
  std::smatch m;
  const std::regex re(name + "=\"([-0-9.]+)\"");
  REQUIRE(std::regex_search(tag, m, re));
  return std::stod(m[1]);
}

}  // namespace

TEST_CASE("nrmse identities") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t len = 1 + rng() % 40;
    std::vector<float> truth(len), pred(len), doubled(len), scaled_t(len), scaled_p(len);
    for (std::size_t i = 0; i < len; ++i) {
      truth[i] = n(rng);
      pred[i] = n(rng);
      doubled[i] = 2.0f * truth[i];
      // Powers of two keep the scaling exact in float.
      scaled_t[i] = 8.0f * truth[i];
      scaled_p[i] = 8.0f * pred[i];
    }
    CHECK(nrmse(truth, truth) == 0.0);
    CHECK(nrmse(doubled, truth) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(nrmse(scaled_p, scaled_t) == doctest::Approx(nrmse(pred, truth)).epsilon(1e-12));
    // Independent double-precision oracle.
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      num += (double(pred[i]) - truth[i]) * (double(pred[i]) - truth[i]);
      den += double(truth[i]) * truth[i];
    }
    CHECK(nrmse(pred, truth) == doctest::Approx(std::sqrt(num / den)).epsilon(1e-12));
  }
  const std::vector<float> zeros(5, 0.0f), ones(5, 1.0f);
  CHECK_THROWS_AS(nrmse(ones, zeros), MetricError);
  CHECK_THROWS_AS(nrmse(std::vector<float>(4, 1.0f), ones), DimensionError);
  CHECK_THROWS_AS(nrmse(Tensor::zeros({3, 1}), Tensor::full({1, 3}, 1.0f)), DimensionError);
}

TEST_CASE("spikiness diagnostic") {
  const std::vector<float> flat(8, 0.7f);
  CHECK(spikiness_diagnostic(flat) == std::pair<double, double>{0.0, 0.0});
  const std::vector<float> example{0, 1, 0, 1, 0, 0, 0, 0};
  CHECK(spikiness_diagnostic(example) == std::pair<double, double>{3.0, 0.0});
  // A single jump at the midpoint counts in neither half.
  const std::vector<float> step{0, 0, 0, 5, 5, 5};
  CHECK(spikiness_diagnostic(step) == std::pair<double, double>{0.0, 0.0});
  CHECK_THROWS_AS(spikiness_diagnostic(std::vector<float>(5, 0.0f)), LengthError);
}

TEST_CASE("experiment config") {
  ExperimentConfig c = tiny_experiment("out");
  c.dataset.params = default_params(PdeFamily::DiffusionReaction);
  c.dataset.grid = default_grid(PdeFamily::DiffusionReaction, 16);
  c.checkpoint = "weights.ckpt";
  c.adaptation.method = AdaptationMethod::ORCA;
  c.adaptation.bidir_method = BidirMethod::SequenceDoubling;
  c.seeds = {1, 5, 9};
  nlohmann::json j = c;
  ExperimentConfig back = j.get<ExperimentConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.checkpoint == fs::path("weights.ckpt"));
  CHECK(back.seeds == std::vector<std::uint64_t>{1, 5, 9});

  SUBCASE("sequence doubling needs room for two copies") {
    c.model.max_positions = 24;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.adaptation.bidir_method = BidirMethod::None;
    CHECK_NOTHROW(c.validate());
  }
  SUBCASE("missing config file names the path") {
    try {
      read_experiment_config("no/such/config.json");
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("no/such/config.json") != std::string::npos);
    }
  }
}

TEST_CASE("run_experiment is reproducible and writes records") {
  const auto dir = scratch_dir("runs");
  auto config = tiny_experiment(dir / "a");

  SUBCASE("scratch model, FPT") {
    // A checkpoint path that does not exist is never read without pretraining.
    config.checkpoint = dir / "missing.ckpt";
    auto first = run_experiment(config);
    auto second = run_experiment(config);
    REQUIRE(first.size() == 1);
    CHECK(record_fingerprint(first[0]) == record_fingerprint(second[0]));
    CHECK(std::isfinite(first[0].test_nrmse));
    const auto file = dir / "a" / run_file_name(config, 7);
    REQUIRE(fs::exists(file));
    auto loaded = load_run_records(dir / "a");
    REQUIRE(loaded.size() == 1);
    CHECK(record_fingerprint(loaded[0]) == record_fingerprint(first[0]));
  }
  SUBCASE("pretrained in-process, ORCA with parallel flipping, two workers") {
    config.pretrained = true;
    config.adaptation.method = AdaptationMethod::ORCA;
    config.adaptation.bidir_method = BidirMethod::ParallelFlipping;
    config.seeds = {7, 8};
    config.workers = 2;
    auto parallel = run_experiment(config);
    config.workers = 1;
    auto serial = run_experiment(config);
    REQUIRE(parallel.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(record_fingerprint(parallel[i]) == record_fingerprint(serial[i]));
      CHECK(parallel[i].stage1.size() == 2);
      CHECK(parallel[i].training.size() == 2);
    }
    CHECK(parallel[0].test_nrmse != parallel[1].test_nrmse);
    CHECK(parallel[0].source_model_id == parallel[1].source_model_id);
  }
  SUBCASE("missing dataset file") {
    config.dataset.path = dir / "absent.bin";
    try {
      run_experiment(config);
      FAIL("expected IoError");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("absent.bin") != std::string::npos);
    }
  }
  SUBCASE("missing checkpoint when pretrained") {
    config.pretrained = true;
    config.checkpoint = dir / "absent.ckpt";
    CHECK_THROWS_AS(run_experiment(config), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("run record JSON round trip") {
  RunRecord r = fake_record("advection", "sd", 0.25, 3);
  r.training.push_back(TrainReport{});
  r.training[0].epoch_losses = {0.5, 0.25};
  r.first_half_tv = 1.5;
  r.second_half_tv = 0.5;
  r.started_at = "2026-01-01T00:00:00Z";
  auto back = run_record_from_json(to_json(r));
  CHECK(record_fingerprint(back) == record_fingerprint(r));
  CHECK(back.started_at == r.started_at);
  // Timing is excluded from the fingerprint.
  back.wallclock_s = 99.0;
  CHECK(record_fingerprint(back) == record_fingerprint(r));

  r.test_nrmse = std::numeric_limits<double>::quiet_NaN();
  auto j = to_json(r);
  CHECK(j.at("test_nrmse").is_null());
  CHECK(std::isnan(run_record_from_json(j).test_nrmse));
}

TEST_CASE("results table statistics") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(0.01, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<RunRecord> records;
    std::vector<double> adv, dr;
    const int n = 1 + static_cast<int>(rng() % 6);
    for (int s = 0; s < n; ++s) {
      adv.push_back(u(rng));
      dr.push_back(u(rng));
      records.push_back(fake_record("advection", "none", adv.back(), s));
      records.push_back(fake_record("diffusion-reaction", "none", dr.back(), s));
    }
    const auto table = build_results_table(records);
    REQUIRE(table.rows.size() == 2);
    CHECK(table.rows[0].dataset == "Advection");
    for (const auto& [row, values] : {std::pair{table.rows[0], adv}, std::pair{table.rows[1], dr}}) {
      double sum = 0.0;
      for (double v : values) sum += v;
      CHECK(row.seed_count == values.size());
      CHECK(row.nrmse_mean == doctest::Approx(sum / values.size()).epsilon(1e-14));
      CHECK(row.nrmse_min == *std::min_element(values.begin(), values.end()));
      CHECK(row.nrmse_max == *std::max_element(values.begin(), values.end()));
      CHECK(row.nrmse_min <= row.nrmse_mean);
      CHECK(row.nrmse_mean <= row.nrmse_max);
    }
  }
  SUBCASE("diverged runs are excluded") {
    std::vector<RunRecord> records{fake_record("advection", "none", 0.5, 0),
                                   fake_record("advection", "none", NAN, 1)};
    const auto row = build_results_table(records).rows.at(0);
    CHECK(row.seed_count == 1);
    CHECK(row.nrmse_mean == 0.5);
  }
}

TEST_CASE("results CSV round trip") {
  std::vector<RunRecord> records{
      fake_record("advection", "none", 0.1 + 1e-16, 0), fake_record("advection", "none", 1.0 / 3.0, 1),
      fake_record("advection", "sd", 0.2, 0), fake_record("burgers", "pf", 0.7, 0)};
  const auto table = build_results_table(records);
  const auto csv = results_csv(table);
  CHECK(csv.rfind("dataset,arch,d_model,n_layers,pretrained,method,bidir_method,seed_count,"
                  "nrmse_mean,nrmse_min,nrmse_max,wallclock_s\n", 0) == 0);
  const auto back = parse_results_csv(csv);
  REQUIRE(back.rows.size() == table.rows.size());
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    CHECK(back.rows[i].label() == table.rows[i].label());
    CHECK(back.rows[i].nrmse_mean == table.rows[i].nrmse_mean);
    CHECK(back.rows[i].nrmse_min == table.rows[i].nrmse_min);
    CHECK(back.rows[i].nrmse_max == table.rows[i].nrmse_max);
    CHECK(back.rows[i].seed_count == table.rows[i].seed_count);
  }
  CHECK(results_csv(back) == csv);
  CHECK_THROWS_AS(parse_results_csv("wrong,header\n"), IoError);
}

TEST_CASE("figure") {
  ResultsTable one;
  ResultsRow row;
  row.dataset = "Advection";
  row.arch = "DecoderOnly";
  row.method = "ORCA";
  row.bidir_method = "None";
  row.seed_count = 5;
  row.nrmse_mean = 0.5;
  row.nrmse_min = 0.4;
  row.nrmse_max = 0.7;
  one.rows.push_back(row);

  const auto svg = emit_figure(one);
  CHECK(svg == emit_figure(one));
  CHECK(svg.find("mean 0.5000, min 0.4000, max 0.7000 (5 seeds)") != std::string::npos);

  // Recover the value scale from the bar: its height is proportional to the mean,
  // and the whisker spans min..max on the same scale.
  std::smatch m;
  REQUIRE(std::regex_search(svg, m, std::regex("<g class=\"bar\">[\\s\\S]*?<rect [^>]*>")));
  const std::string rect = m.str().substr(m.str().find("<rect"));
  const double base = attr(rect, "y") + attr(rect, "height");
  const double per_unit = attr(rect, "height") / 0.5;
  REQUIRE(std::regex_search(svg, m, std::regex("<line class=\"whisker\"[^>]*>")));
  const std::string whisker = m.str();
  const double lo = (base - std::max(attr(whisker, "y1"), attr(whisker, "y2"))) / per_unit;
  const double hi = (base - std::min(attr(whisker, "y1"), attr(whisker, "y2"))) / per_unit;
  CHECK(lo == doctest::Approx(0.4).epsilon(0.01));
  CHECK(hi == doctest::Approx(0.7).epsilon(0.01));

  SUBCASE("bar heights follow the means") {
    ResultsTable t;
    for (double mean : {0.3, 0.9, 0.6}) {
      row.nrmse_mean = row.nrmse_min = row.nrmse_max = mean;
      row.bidir_method = "m" + std::to_string(t.rows.size());
      t.rows.push_back(row);
    }
    const auto s = emit_figure(t);
    std::vector<double> heights;
    const std::regex bar("<g class=\"bar\">\\n<title>[^<]*</title>\\n(<rect [^>]*>)");
    for (auto it = std::sregex_iterator(s.begin(), s.end(), bar); it != std::sregex_iterator(); ++it)
      heights.push_back(attr((*it)[1].str(), "height"));
    REQUIRE(heights.size() == 3);
    CHECK(heights[0] < heights[2]);
    CHECK(heights[2] < heights[1]);
  }
  CHECK_THROWS_AS(emit_figure(ResultsTable{}), ContractError);
}
