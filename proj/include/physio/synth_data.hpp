#pragma once

#include "physio/dataset_io.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace physio {

struct SynthConfig {
  std::string dataset_name = "synth";
  int n_subjects = 40;
  int scans_per_subject = 1;
  int n_roi = 64;
  Eigen::Index T = 271;  // length on the dt grid
  double dt = 1.44;
  double snr = 5.0;      // signal-to-noise power ratio per ROI
  int lag_max = 5;       // longest FIR kernel, in samples
  double age_min = 36.0;
  double age_max = 89.0;
  std::uint64_t seed = 0;
  // Seed of the ROI encoding (gains and kernels). Defaults to `seed`.
  std::optional<std::uint64_t> encoding_seed;
  // Extra delay in samples prepended to every kernel. Two datasets sharing an
  // encoding seed but differing here form a transfer pair.
  int kernel_shift = 0;

  // Raw mode writes TR-grid ROIs plus a respiration trace and beat times, so
  // loading runs the full derivation and conditioning chain.
  bool raw_mode = false;
  double raw_tr = 0.8;
  double physio_hz = 400.0;

  void validate() const;
  std::uint64_t effective_encoding_seed() const { return encoding_seed.value_or(seed); }
};

/// Per-ROI mixing of the two latents.
struct SynthEncoding {
  Eigen::VectorXd rv_gain;
  Eigen::VectorXd hr_gain;
  std::vector<Eigen::VectorXd> rv_kernel;  // causal taps, tap j delays by j samples
  std::vector<Eigen::VectorXd> hr_kernel;
};

SynthEncoding make_encoding(const SynthConfig& cfg);

/// White noise restricted to [low_hz, high_hz] by Fourier synthesis, then
/// z-normalized.
Eigen::VectorXd bandlimited_noise(Eigen::Index n, double dt, double low_hz, double high_hz,
                                  std::mt19937_64& rng);

struct SynthScan {
  Eigen::MatrixXd roi;  // [n x R], z-normalized columns
  Eigen::VectorXd rv;   // latent, z-normalized
  Eigen::VectorXd hr;
};

/// Scan `index` of the dataset on a grid of n samples at step dt. The RNG
/// stream depends only on (cfg.seed, index).
SynthScan synth_scan(const SynthConfig& cfg, const SynthEncoding& enc, std::size_t index,
                     Eigen::Index n, double dt);

/// Writes the dataset files plus manifest.json and synth.json into out_dir.
/// Latent mode produces an on-grid dataset declared as preprocessed under the
/// default settings with target_dt = cfg.dt.
Manifest generate_dataset(const SynthConfig& cfg, const fs::path& out_dir);

/// Settings a latent-mode dataset is declared to be preprocessed with.
PrepSettings synth_prep_settings(const SynthConfig& cfg);

/// Instantaneous ordinary least squares from ROI values (plus intercept) to a
/// target, the closed-form learnability baseline.
struct LinearOracle {
  Eigen::VectorXd coef;  // intercept first
  static LinearOracle fit(const std::vector<const Eigen::MatrixXd*>& rois,
                          const std::vector<const Eigen::VectorXd*>& targets);
  Eigen::VectorXd predict(const Eigen::MatrixXd& roi) const;
};

}  // namespace physio
