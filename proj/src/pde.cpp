#include "crossmodal/pde.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>

#include "crossmodal/container.hpp"
#include "crossmodal/errors.hpp"

namespace crossmodal {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kSorptionFloor = 1e-8;

std::string normalize(std::string s) {
  std::string out;
  for (char c : s) {
    if (c == '-' || c == '_' || c == ' ') continue;
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  }
  return out;
}

std::size_t step_count(const GridSpec& grid) {
  const double span = grid.t_out - grid.t_in;
  return static_cast<std::size_t>(std::ceil(span / grid.dt_solver - 1e-9));
}

Tensor to_tensor(const std::vector<double>& v) {
  std::vector<float> f(v.begin(), v.end());
  return Tensor::from_data({v.size()}, std::move(f));
}

std::vector<double> sample(const FourierSeries& s, const std::vector<double>& x) {
  std::vector<double> u(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) u[i] = s(x[i]);
  return u;
}

// Rescales a zero-mean series into [0, 1] around 0.5 and clips.
std::vector<double> unit_interval_profile(const FourierSeries& s,
                                          const std::vector<double>& x) {
  auto u = sample(s, x);
  for (auto& v : u) v = std::clamp(0.5 + 0.5 * v, 0.0, 1.0);
  return u;
}

// Thomas algorithm; sub/sup have n entries with sub[0] and sup[n-1] unused.
void solve_tridiagonal(const std::vector<double>& sub, std::vector<double> diag,
                       const std::vector<double>& sup, std::vector<double>& rhs) {
  const std::size_t n = diag.size();
  for (std::size_t i = 1; i < n; ++i) {
    const double w = sub[i] / diag[i - 1];
    diag[i] -= w * sup[i - 1];
    rhs[i] -= w * rhs[i - 1];
  }
  rhs[n - 1] /= diag[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) {
    rhs[i] = (rhs[i] - sup[i] * rhs[i + 1]) / diag[i];
  }
}

double godunov_flux(double ul, double ur) {
  const auto f = [](double u) { return 0.5 * u * u; };
  if (ul <= ur) {
    if (ul > 0.0) return f(ul);
    if (ur < 0.0) return f(ur);
    return 0.0;
  }
  return std::max(f(ul), f(ur));
}

PdeInstance make_instance(const std::vector<double>& input,
                          const std::vector<double>& target, PdeParams params,
                          const GridSpec& grid, std::uint64_t seed) {
  PdeInstance inst;
  inst.input = to_tensor(input);
  inst.target = to_tensor(target);
  inst.params = params;
  inst.grid = grid;
  inst.seed = seed;
  if (!inst.input.is_finite() || !inst.target.is_finite()) {
    throw DomainError("non-finite solution for " + to_string(params.family) +
                      " seed " + std::to_string(seed));
  }
  return inst;
}

}  // namespace

std::string to_string(PdeFamily family) {
  switch (family) {
    case PdeFamily::Advection: return "Advection";
    case PdeFamily::DiffusionReaction: return "DiffusionReaction";
    case PdeFamily::DiffusionSorption: return "DiffusionSorption";
    case PdeFamily::BurgersNS: return "BurgersNS";
  }
  return "?";
}

PdeFamily pde_family_from_string(const std::string& name) {
  const auto n = normalize(name);
  if (n == "advection") return PdeFamily::Advection;
  if (n == "diffusionreaction") return PdeFamily::DiffusionReaction;
  if (n == "diffusionsorption") return PdeFamily::DiffusionSorption;
  if (n == "burgersns" || n == "burgers") return PdeFamily::BurgersNS;
  throw ConfigError("unknown PDE family '" + name + "'");
}

void GridSpec::validate() const {
  if (n_x < 4) throw ConfigError("n_x must be at least 4");
  if (n_x % 2 != 0) throw ConfigError("n_x must be even, got " + std::to_string(n_x));
  if (!(dt_solver > 0.0)) throw ConfigError("dt_solver must be positive");
  if (!(t_out > t_in)) throw ConfigError("t_out must exceed t_in");
}

GridSpec default_grid(PdeFamily family, std::size_t n_x) {
  GridSpec g;
  g.n_x = n_x;
  const double dx = 1.0 / static_cast<double>(n_x);
  switch (family) {
    case PdeFamily::Advection:
      g.dt_solver = 0.01;
      g.t_out = 2.0;
      break;
    case PdeFamily::DiffusionReaction:
      g.dt_solver = 0.3 * dx * dx / 0.5;
      g.t_out = 0.01;
      break;
    case PdeFamily::DiffusionSorption:
      g.dt_solver = 0.25;
      g.t_out = 50.0;
      break;
    case PdeFamily::BurgersNS:
      g.dt_solver = 0.2 * dx * dx / 0.1;
      g.t_out = 0.2;
      break;
  }
  return g;
}

void PdeParams::validate() const {
  switch (family) {
    case PdeFamily::Advection:
      if (!std::isfinite(beta)) throw ConfigError("beta must be finite");
      break;
    case PdeFamily::DiffusionReaction:
      if (!(nu > 0.0)) throw ConfigError("nu must be positive");
      if (!std::isfinite(rho)) throw ConfigError("rho must be finite");
      break;
    case PdeFamily::DiffusionSorption:
      if (!(sorption.diffusivity > 0.0)) throw ConfigError("sorption diffusivity must be positive");
      if (sorption.c < 0.0) throw ConfigError("sorption c must be non-negative");
      if (!(sorption.n > 0.0 && sorption.n < 1.0)) throw ConfigError("sorption n must lie in (0, 1)");
      break;
    case PdeFamily::BurgersNS:
      if (!(nu > 0.0)) throw ConfigError("nu must be positive");
      break;
  }
}

PdeParams default_params(PdeFamily family) {
  PdeParams p;
  p.family = family;
  if (family == PdeFamily::BurgersNS) p.nu = p.eta;
  return p;
}

void to_json(nlohmann::json& j, const GridSpec& g) {
  j = {{"n_x", g.n_x}, {"dt_solver", g.dt_solver}, {"t_in", g.t_in}, {"t_out", g.t_out}};
}

void from_json(const nlohmann::json& j, GridSpec& g) {
  GridSpec d;
  g.n_x = j.value("n_x", d.n_x);
  g.dt_solver = j.value("dt_solver", d.dt_solver);
  g.t_in = j.value("t_in", d.t_in);
  g.t_out = j.value("t_out", d.t_out);
}

void to_json(nlohmann::json& j, const PdeParams& p) {
  j = {{"family", to_string(p.family)},
       {"beta", p.beta},
       {"nu", p.nu},
       {"rho", p.rho},
       {"eta", p.eta},
       {"zeta", p.zeta},
       {"sorption",
        {{"diffusivity", p.sorption.diffusivity}, {"c", p.sorption.c}, {"n", p.sorption.n}}}};
}

void from_json(const nlohmann::json& j, PdeParams& p) {
  const auto family = pde_family_from_string(j.at("family").get<std::string>());
  PdeParams d = default_params(family);
  p.family = family;
  p.beta = j.value("beta", d.beta);
  p.nu = j.value("nu", d.nu);
  p.rho = j.value("rho", d.rho);
  p.eta = j.value("eta", d.eta);
  p.zeta = j.value("zeta", d.zeta);
  p.sorption = d.sorption;
  if (j.contains("sorption")) {
    const auto& s = j["sorption"];
    p.sorption.diffusivity = s.value("diffusivity", d.sorption.diffusivity);
    p.sorption.c = s.value("c", d.sorption.c);
    p.sorption.n = s.value("n", d.sorption.n);
  }
}

double FourierSeries::operator()(double x) const {
  double u = offset;
  for (std::size_t k = 0; k < wavenumbers.size(); ++k) {
    u += amplitudes[k] * std::sin(kTwoPi * wavenumbers[k] * x + phases[k]);
  }
  return u;
}

double FourierSeries::amplitude_bound() const {
  double s = std::abs(offset);
  for (double a : amplitudes) s += std::abs(a);
  return s;
}

FourierSeries random_fourier_series(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> modes(1, 5);
  std::uniform_real_distribution<double> amp(0.25, 1.0);
  std::bernoulli_distribution negative(0.5);
  std::uniform_real_distribution<double> phase(0.0, kTwoPi);
  FourierSeries s;
  const int count = modes(rng);
  for (int k = 1; k <= count; ++k) {
    s.wavenumbers.push_back(k);
    s.amplitudes.push_back((negative(rng) ? -amp(rng) : amp(rng)) / k);
    s.phases.push_back(phase(rng));
  }
  return s;
}

std::vector<double> grid_points(PdeFamily family, std::size_t n_x) {
  std::vector<double> x(n_x);
  const double h = family == PdeFamily::DiffusionSorption
                       ? 1.0 / static_cast<double>(n_x - 1)
                       : 1.0 / static_cast<double>(n_x);
  for (std::size_t i = 0; i < n_x; ++i) x[i] = static_cast<double>(i) * h;
  return x;
}

std::vector<double> advection_exact(const FourierSeries& u0,
                                    const std::vector<double>& x, double beta,
                                    double elapsed) {
  std::vector<double> u(x.size());
  const double shift = beta * elapsed;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double xi = x[i] - shift;
    xi -= std::floor(xi);
    u[i] = u0(xi);
  }
  return u;
}

std::vector<double> solve_diffusion_reaction(std::vector<double> u,
                                             const GridSpec& grid,
                                             const PdeParams& params) {
  grid.validate();
  const std::size_t n = u.size();
  const double dx = 1.0 / static_cast<double>(n);
  const double bound = 0.4 * dx * dx / params.nu;
  if (grid.dt_solver > bound) {
    throw ConfigError("diffusion-reaction step " + std::to_string(grid.dt_solver) +
                      " exceeds stability bound " + std::to_string(bound));
  }
  const std::size_t steps = step_count(grid);
  const double dt = (grid.t_out - grid.t_in) / static_cast<double>(steps);
  const double r = params.nu * dt / (dx * dx);
  std::vector<double> next(n);
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < n; ++i) {
      const double left = u[(i + n - 1) % n];
      const double right = u[(i + 1) % n];
      next[i] = u[i] + r * (left - 2.0 * u[i] + right) +
                dt * params.rho * u[i] * (1.0 - u[i]);
    }
    u.swap(next);
  }
  return u;
}

std::vector<double> solve_diffusion_sorption(std::vector<double> u,
                                             const GridSpec& grid,
                                             const PdeParams& params) {
  grid.validate();
  const std::size_t n = u.size();
  const double dx = 1.0 / static_cast<double>(n - 1);
  const auto& sp = params.sorption;
  const std::size_t steps = step_count(grid);
  const double dt = (grid.t_out - grid.t_in) / static_cast<double>(steps);
  u.front() = 1.0;
  u.back() = 0.0;
  std::vector<double> sub(n, 0.0), diag(n, 1.0), sup(n, 0.0);
  for (std::size_t s = 0; s < steps; ++s) {
    // Retardation is lagged; the linear system is an M-matrix, so values
    // stay within the boundary/initial range.
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const double ui = std::max(u[i], kSorptionFloor);
      const double retardation = 1.0 + sp.c * std::pow(ui, sp.n - 1.0);
      const double r = sp.diffusivity * dt / (retardation * dx * dx);
      sub[i] = -r;
      sup[i] = -r;
      diag[i] = 1.0 + 2.0 * r;
    }
    sub[n - 1] = 0.0;
    sup[0] = 0.0;
    diag[0] = diag[n - 1] = 1.0;
    solve_tridiagonal(sub, diag, sup, u);
    u.front() = 1.0;
    u.back() = 0.0;
  }
  return u;
}

void burgers_step(std::vector<double>& u, double dx, double dt, double nu) {
  const std::size_t n = u.size();
  std::vector<double> flux(n);  // flux[i] at interface i+1/2
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t r = (i + 1) % n;
    flux[i] = godunov_flux(u[i], u[r]) - nu * (u[r] - u[i]) / dx;
  }
  for (std::size_t i = 0; i < n; ++i) {
    u[i] -= dt / dx * (flux[i] - flux[(i + n - 1) % n]);
  }
}

std::vector<double> solve_burgers(std::vector<double> u, const GridSpec& grid,
                                  const PdeParams& params) {
  grid.validate();
  const std::size_t n = u.size();
  const double dx = 1.0 / static_cast<double>(n);
  double umax = 0.0;
  for (double v : u) umax = std::max(umax, std::abs(v));
  // Viscous Burgers obeys a maximum principle, so the initial speed bounds
  // every later step.
  const double rate = 2.0 * params.nu / (dx * dx) + umax / dx;
  if (grid.dt_solver * rate > 0.9) {
    throw ConfigError("Burgers step " + std::to_string(grid.dt_solver) +
                      " exceeds stability bound " + std::to_string(0.9 / rate));
  }
  const std::size_t steps = step_count(grid);
  const double dt = (grid.t_out - grid.t_in) / static_cast<double>(steps);
  for (std::size_t s = 0; s < steps; ++s) burgers_step(u, dx, dt, params.nu);
  return u;
}

PdeInstance gen_advection(const GridSpec& grid, double beta, std::uint64_t seed) {
  grid.validate();
  std::mt19937_64 rng(seed);
  const auto u0 = random_fourier_series(rng);
  const auto x = grid_points(PdeFamily::Advection, grid.n_x);
  PdeParams params = default_params(PdeFamily::Advection);
  params.beta = beta;
  // The series is sampled functionally at both times; no interpolation.
  const auto input = advection_exact(u0, x, beta, grid.t_in);
  const auto target = advection_exact(u0, x, beta, grid.t_out);
  return make_instance(input, target, params, grid, seed);
}

PdeInstance gen_diffusion_reaction(const GridSpec& grid, double nu, double rho,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto u0 = unit_interval_profile(
      random_fourier_series(rng), grid_points(PdeFamily::DiffusionReaction, grid.n_x));
  PdeParams params = default_params(PdeFamily::DiffusionReaction);
  params.nu = nu;
  params.rho = rho;
  params.validate();
  return make_instance(u0, solve_diffusion_reaction(u0, grid, params), params, grid, seed);
}

PdeInstance gen_diffusion_sorption(const GridSpec& grid,
                                   const SorptionParams& sorption,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u0 = unit_interval_profile(
      random_fourier_series(rng), grid_points(PdeFamily::DiffusionSorption, grid.n_x));
  u0.front() = 1.0;
  u0.back() = 0.0;
  PdeParams params = default_params(PdeFamily::DiffusionSorption);
  params.sorption = sorption;
  params.validate();
  return make_instance(u0, solve_diffusion_sorption(u0, grid, params), params, grid, seed);
}

PdeInstance gen_burgers_ns_standin(const GridSpec& grid, double nu,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto u0 =
      sample(random_fourier_series(rng), grid_points(PdeFamily::BurgersNS, grid.n_x));
  PdeParams params = default_params(PdeFamily::BurgersNS);
  params.nu = nu;
  params.validate();
  return make_instance(u0, solve_burgers(u0, grid, params), params, grid, seed);
}

PdeInstance gen_instance(const GridSpec& grid, const PdeParams& params,
                         std::uint64_t seed) {
  params.validate();
  PdeInstance inst;
  switch (params.family) {
    case PdeFamily::Advection:
      inst = gen_advection(grid, params.beta, seed);
      break;
    case PdeFamily::DiffusionReaction:
      inst = gen_diffusion_reaction(grid, params.nu, params.rho, seed);
      break;
    case PdeFamily::DiffusionSorption:
      inst = gen_diffusion_sorption(grid, params.sorption, seed);
      break;
    case PdeFamily::BurgersNS:
      inst = gen_burgers_ns_standin(grid, params.nu, seed);
      break;
  }
  inst.params = params;
  return inst;
}

PdeDataset generate_dataset(const PdeParams& params, std::size_t n_train,
                            std::size_t n_test, const GridSpec& grid,
                            std::uint64_t seed) {
  if (n_train < 1 || n_test < 1) throw ConfigError("n_train and n_test must be at least 1");
  params.validate();
  grid.validate();
  PdeDataset ds;
  ds.family = params.family;
  ds.params = params;
  ds.grid = grid;
  ds.seed = seed;
  const std::uint64_t base = seed * 1000003ULL;
  for (std::size_t i = 0; i < n_train; ++i) ds.train.push_back(gen_instance(grid, params, base + i));
  for (std::size_t i = 0; i < n_test; ++i)
    ds.test.push_back(gen_instance(grid, params, base + n_train + i));
  return ds;
}

void write_dataset(const std::filesystem::path& path, const PdeDataset& dataset) {
  ContainerFile file;
  file.header = {{"format", "crossmodal-pde-dataset"},
                 {"format_version", kDatasetFormatVersion},
                 {"family", to_string(dataset.family)},
                 {"params", dataset.params},
                 {"grid", dataset.grid},
                 {"n_train", dataset.train.size()},
                 {"n_test", dataset.test.size()},
                 {"seed", dataset.seed}};
  auto seeds = nlohmann::json::array();
  const std::size_t n_x = dataset.grid.n_x;
  file.payload.reserve((dataset.train.size() + dataset.test.size()) * 2 * n_x);
  for (const auto* split : {&dataset.train, &dataset.test}) {
    for (const auto& inst : *split) {
      if (inst.input.numel() != n_x || inst.target.numel() != n_x) {
        throw DimensionError("instance length differs from grid n_x");
      }
      file.payload.insert(file.payload.end(), inst.input.data().begin(), inst.input.data().end());
      file.payload.insert(file.payload.end(), inst.target.data().begin(), inst.target.data().end());
      seeds.push_back(inst.seed);
    }
  }
  file.header["instance_seeds"] = std::move(seeds);
  write_container(path, std::move(file));
}

PdeDataset read_dataset(const std::filesystem::path& path) {
  auto file = read_container(path);
  const auto& h = file.header;
  if (h.value("format", std::string{}) != "crossmodal-pde-dataset") {
    throw IoError(path.string() + " is not a PDE dataset file");
  }
  if (h.value("format_version", 0) != kDatasetFormatVersion) {
    throw IoError("unsupported dataset format version in " + path.string());
  }
  PdeDataset ds;
  ds.params = h.at("params").get<PdeParams>();
  ds.family = ds.params.family;
  ds.grid = h.at("grid").get<GridSpec>();
  ds.seed = h.at("seed").get<std::uint64_t>();
  const auto n_train = h.at("n_train").get<std::size_t>();
  const auto n_test = h.at("n_test").get<std::size_t>();
  const std::size_t n_x = ds.grid.n_x;
  if (file.payload.size() != (n_train + n_test) * 2 * n_x) {
    throw IoError("payload size mismatch in " + path.string());
  }
  const auto& seeds = h.at("instance_seeds");
  for (std::size_t i = 0; i < n_train + n_test; ++i) {
    const float* base = file.payload.data() + i * 2 * n_x;
    PdeInstance inst;
    inst.input = Tensor::from_data({n_x}, std::vector<float>(base, base + n_x));
    inst.target = Tensor::from_data({n_x}, std::vector<float>(base + n_x, base + 2 * n_x));
    inst.params = ds.params;
    inst.grid = ds.grid;
    inst.seed = seeds.at(i).get<std::uint64_t>();
    (i < n_train ? ds.train : ds.test).push_back(std::move(inst));
  }
  return ds;
}

PdeDataset build_dataset(const std::filesystem::path& path,
                         const PdeParams& params, std::size_t n_train,
                         std::size_t n_test, const GridSpec& grid,
                         std::uint64_t seed) {
  auto ds = generate_dataset(params, n_train, n_test, grid, seed);
  write_dataset(path, ds);
  return ds;
}

}  // namespace crossmodal
