#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "crossmodal/tensor.hpp"
#include "json.hpp"

namespace crossmodal {

enum class PdeFamily { Advection, DiffusionReaction, DiffusionSorption, BurgersNS };

std::string to_string(PdeFamily family);
// Accepts the canonical names and lower-case/dashed spellings ("advection",
// "diffusion-reaction", "diffusion-sorption", "burgers", "burgers-ns").
PdeFamily pde_family_from_string(const std::string& name);

struct GridSpec {
  std::size_t n_x = 128;
  double dt_solver = 1e-4;
  double t_in = 0.0;
  double t_out = 1.0;

  void validate() const;
};

// Per-family defaults: step size inside the solver's stability region and a
// horizon long enough for the target to differ visibly from the input.
GridSpec default_grid(PdeFamily family, std::size_t n_x = 128);

struct SorptionParams {
  double diffusivity = 5e-4;
  double c = 1.0;  // retardation R(u) = 1 + c * u^(n - 1)
  double n = 0.874;
};

struct PdeParams {
  PdeFamily family = PdeFamily::Advection;
  double beta = 0.4;
  double nu = 0.5;
  double rho = 1.0;
  double eta = 0.1;
  double zeta = 0.1;
  SorptionParams sorption;

  void validate() const;
};

PdeParams default_params(PdeFamily family);

void to_json(nlohmann::json& j, const GridSpec& g);
void from_json(const nlohmann::json& j, GridSpec& g);
void to_json(nlohmann::json& j, const PdeParams& p);
void from_json(const nlohmann::json& j, PdeParams& p);

struct PdeInstance {
  Tensor input;   // [n_x], solution at t_in
  Tensor target;  // [n_x], solution at t_out
  PdeParams params;
  GridSpec grid;
  std::uint64_t seed = 0;
};

// u(x) = offset + sum_k a_k sin(2 pi k x + phi_k), evaluated in double.
struct FourierSeries {
  double offset = 0.0;
  std::vector<int> wavenumbers;
  std::vector<double> amplitudes;
  std::vector<double> phases;

  double operator()(double x) const;
  double amplitude_bound() const;
};

// Modes 1..K, K uniform in [1, 5]; mode k has amplitude magnitude in
// [0.25, 1] / k, random sign and random phase.
FourierSeries random_fourier_series(std::mt19937_64& rng);

// Spatial nodes: i / n_x on the periodic unit interval, i / (n_x - 1) for the
// Dirichlet sorption problem.
std::vector<double> grid_points(PdeFamily family, std::size_t n_x);

// Exact solution of u_t + beta u_x = 0 on the periodic unit interval.
std::vector<double> advection_exact(const FourierSeries& u0,
                                    const std::vector<double>& x, double beta,
                                    double elapsed);

// Double-precision solvers integrating from t_in to t_out on `grid`.
// Each throws ConfigError when the step violates the solver's stability bound.
std::vector<double> solve_diffusion_reaction(std::vector<double> u,
                                             const GridSpec& grid,
                                             const PdeParams& params);
std::vector<double> solve_diffusion_sorption(std::vector<double> u,
                                             const GridSpec& grid,
                                             const PdeParams& params);
std::vector<double> solve_burgers(std::vector<double> u, const GridSpec& grid,
                                  const PdeParams& params);

// One conservative step of viscous Burgers (Godunov flux, central diffusion).
void burgers_step(std::vector<double>& u, double dx, double dt, double nu);

PdeInstance gen_advection(const GridSpec& grid, double beta, std::uint64_t seed);
PdeInstance gen_diffusion_reaction(const GridSpec& grid, double nu, double rho,
                                   std::uint64_t seed);
PdeInstance gen_diffusion_sorption(const GridSpec& grid,
                                   const SorptionParams& sorption,
                                   std::uint64_t seed);
PdeInstance gen_burgers_ns_standin(const GridSpec& grid, double nu,
                                   std::uint64_t seed);
PdeInstance gen_instance(const GridSpec& grid, const PdeParams& params,
                         std::uint64_t seed);

struct PdeDataset {
  PdeFamily family = PdeFamily::Advection;
  PdeParams params;
  GridSpec grid;
  std::uint64_t seed = 0;
  std::vector<PdeInstance> train;
  std::vector<PdeInstance> test;
};

inline constexpr int kDatasetFormatVersion = 1;

// Train instance i uses seed base + i, test instance i uses base + n_train + i.
PdeDataset generate_dataset(const PdeParams& params, std::size_t n_train,
                            std::size_t n_test, const GridSpec& grid,
                            std::uint64_t seed);

void write_dataset(const std::filesystem::path& path, const PdeDataset& dataset);
PdeDataset read_dataset(const std::filesystem::path& path);

// generate_dataset followed by write_dataset.
PdeDataset build_dataset(const std::filesystem::path& path,
                         const PdeParams& params, std::size_t n_train,
                         std::size_t n_test, const GridSpec& grid,
                         std::uint64_t seed);

}  // namespace crossmodal
