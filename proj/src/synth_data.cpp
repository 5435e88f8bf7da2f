#include "physio/synth_data.hpp"

#include "physio/error.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>

namespace physio {

namespace {

using Index = Eigen::Index;

constexpr double kLowHz = 0.01;
constexpr double kHighHz = 0.15;

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

Eigen::VectorXd causal_filter(const Eigen::VectorXd& x, const Eigen::VectorXd& h) {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(x.size());
  for (Index t = 0; t < x.size(); ++t) {
    for (Index j = 0; j < h.size() && j <= t; ++j) y[t] += h[j] * x[t - j];
  }
  return y;
}

Eigen::VectorXd zscore(const Eigen::VectorXd& x) {
  const double mean = x.mean();
  const double sd = population_std(x);
  return (x.array() - mean) / sd;
}

// Linear interpolation of a TR-grid series at arbitrary times (clamped).
double interp(const Eigen::VectorXd& v, double dt, double t) {
  const double pos = std::clamp(t / dt, 0.0, double(v.size() - 1));
  const auto i = std::min<Index>(static_cast<Index>(pos), v.size() - 2);
  const double frac = pos - double(i);
  return v[i] + frac * (v[i + 1] - v[i]);
}

}  // namespace

void SynthConfig::validate() const {
  auto usage = [](const std::string& m) { fail(ErrorKind::usage, "synth: " + m); };
  if (n_subjects < 1) usage("n_subjects must be positive");
  if (scans_per_subject < 1) usage("scans_per_subject must be positive");
  if (n_roi < 1) usage("n_roi must be positive");
  if (T < 20) usage("T must be at least 20");
  if (!(dt > 0)) usage("dt must be positive");
  if (!(snr > 0) || !std::isfinite(snr)) usage("snr must be positive");
  if (lag_max < 1) usage("lag_max must be positive");
  if (kernel_shift < 0) usage("kernel_shift must be non-negative");
  if (!(age_min >= 0 && age_max >= age_min && age_max <= 130)) usage("age range must lie in [0, 130]");
  if (raw_mode && (!(raw_tr > 0) || !(physio_hz > 0))) usage("raw_tr and physio_hz must be positive");
  if (kHighHz >= 0.5 / dt) usage("dt too coarse for the 0.15 Hz band edge");
}

Eigen::VectorXd bandlimited_noise(Index n, double dt, double low_hz, double high_hz, std::mt19937_64& rng) {
  std::normal_distribution<double> normal;
  const double df = 1.0 / (double(n) * dt);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
  std::vector<Index> bins;
  for (Index k = 1; 2 * k < n; ++k) {
    const double f = double(k) * df;
    if (f >= low_hz && f <= high_hz) bins.push_back(k);
  }
  if (bins.empty()) fail("synth: series of length " + std::to_string(n) + " has no frequency bin in band");
  for (Index k : bins) {
    const double re = normal(rng);
    const double im = normal(rng);
    const double w = 2 * std::numbers::pi * double(k) / double(n);
    for (Index t = 0; t < n; ++t) x[t] += re * std::cos(w * double(t)) + im * std::sin(w * double(t));
  }
  return zscore(x);
}

SynthEncoding make_encoding(const SynthConfig& cfg) {
  auto rng = stream(cfg.effective_encoding_seed(), 0xE17C0D1Eu, 0);
  std::normal_distribution<double> normal;
  std::uniform_int_distribution<int> length(1, cfg.lag_max);
  SynthEncoding enc;
  enc.rv_gain.resize(cfg.n_roi);
  enc.hr_gain.resize(cfg.n_roi);
  auto kernel = [&] {
    Eigen::VectorXd h(length(rng));
    for (auto& v : h) v = normal(rng);
    h /= h.norm();
    Eigen::VectorXd shifted = Eigen::VectorXd::Zero(h.size() + cfg.kernel_shift);
    shifted.tail(h.size()) = h;
    return shifted;
  };
  for (int i = 0; i < cfg.n_roi; ++i) {
    enc.rv_gain[i] = normal(rng);
    enc.hr_gain[i] = normal(rng);
    enc.rv_kernel.push_back(kernel());
    enc.hr_kernel.push_back(kernel());
  }
  return enc;
}

SynthScan synth_scan(const SynthConfig& cfg, const SynthEncoding& enc, std::size_t index, Index n,
                     double dt) {
  auto rng = stream(cfg.seed, index, 0x5CA4u);
  // Burn-in so the causal kernels see history from the first kept sample.
  const Index burn = cfg.lag_max + cfg.kernel_shift;
  const Eigen::VectorXd rv_full = bandlimited_noise(n + burn, dt, kLowHz, kHighHz, rng);
  const Eigen::VectorXd hr_full = bandlimited_noise(n + burn, dt, kLowHz, kHighHz, rng);
  std::normal_distribution<double> normal;

  SynthScan s;
  s.rv = zscore(rv_full.tail(n));
  s.hr = zscore(hr_full.tail(n));
  s.roi.resize(n, cfg.n_roi);
  for (int i = 0; i < cfg.n_roi; ++i) {
    const Eigen::VectorXd signal = (enc.rv_gain[i] * causal_filter(rv_full, enc.rv_kernel[std::size_t(i)]) +
                                    enc.hr_gain[i] * causal_filter(hr_full, enc.hr_kernel[std::size_t(i)]))
                                       .tail(n);
    const double power = (signal.array() - signal.mean()).square().mean();
    const double sigma = std::sqrt(std::max(power, 1e-12) / cfg.snr);
    Eigen::VectorXd col = signal;
    for (auto& v : col) v += sigma * normal(rng);
    s.roi.col(i) = zscore(col);
  }
  return s;
}

PrepSettings synth_prep_settings(const SynthConfig& cfg) {
  PrepSettings p;
  p.target_dt = cfg.dt;
  return p;
}

Manifest generate_dataset(const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  const SynthEncoding enc = make_encoding(cfg);
  auto age_rng = stream(cfg.seed, 0xA6Eu, 1);
  std::uniform_real_distribution<double> age_dist(cfg.age_min, cfg.age_max);

  Manifest m;
  m.dataset_name = cfg.dataset_name;
  m.tr_seconds = cfg.raw_mode ? cfg.raw_tr : cfg.dt;
  m.physio_hz = cfg.physio_hz;
  if (!cfg.raw_mode) m.preprocessing_hash = synth_prep_settings(cfg).hash();

  // Raw grid long enough to resample to exactly T samples at dt.
  const Index n_raw = cfg.raw_mode
                          ? static_cast<Index>(std::ceil(double(cfg.T - 1) * cfg.dt / cfg.raw_tr - 1e-9)) + 1
                          : cfg.T;
  const double grid_dt = cfg.raw_mode ? cfg.raw_tr : cfg.dt;

  std::vector<std::string> names;
  for (int i = 0; i < cfg.n_roi; ++i) names.push_back("roi" + std::to_string(i));

  std::size_t index = 0;
  char sub[32];
  for (int s = 0; s < cfg.n_subjects; ++s) {
    std::snprintf(sub, sizeof sub, "sub-%03d", s);
    const double age = std::round(age_dist(age_rng) * 10.0) / 10.0;
    for (int r = 0; r < cfg.scans_per_subject; ++r, ++index) {
      const std::string id = std::string(sub) + "_run-" + std::to_string(r + 1);
      const SynthScan scan = synth_scan(cfg, enc, index, n_raw, grid_dt);
      ScanEntry e;
      e.scan_id = id;
      e.subject_id = sub;
      e.age = age;
      e.roi_path = out_dir / (id + "_roi.csv");
      write_csv(e.roi_path, names, scan.roi);
      if (!cfg.raw_mode) {
        e.rv_path = out_dir / (id + "_rv.csv");
        e.hr_path = out_dir / (id + "_hr.csv");
        write_csv(e.rv_path, {"rv"}, scan.rv);
        write_csv(e.hr_path, {"hr"}, scan.hr);
      } else {
        // Respiration: 0.3 Hz carrier whose amplitude follows exp(0.3 * rv).
        const double fs = cfg.physio_hz;
        const auto n_resp = static_cast<Index>(std::ceil(double(n_raw) * cfg.raw_tr * fs));
        Eigen::VectorXd resp(n_resp);
        for (Index i = 0; i < n_resp; ++i) {
          const double t = double(i) / fs;
          resp[i] = std::exp(0.3 * interp(scan.rv, cfg.raw_tr, t)) * std::sin(2 * std::numbers::pi * 0.3 * t);
        }
        e.resp_path = out_dir / (id + "_resp.csv");
        write_csv(e.resp_path, {"resp"}, resp);

        // Beats: integrate the instantaneous rate 60 + 8 * hr (bpm) and emit a
        // beat at every whole cycle.
        std::vector<double> beats;
        const double step = 1.0 / fs;
        const double duration = double(n_resp) / fs;
        double phase = 0.0;
        for (double t = 0.0; t < duration; t += step) {
          const double rate_hz = (60.0 + 8.0 * interp(scan.hr, cfg.raw_tr, t)) / 60.0;
          const double next = phase + rate_hz * step;
          if (std::floor(next) > std::floor(phase)) {
            beats.push_back(t + step * (std::floor(next) - phase) / (next - phase));
          }
          phase = next;
        }
        e.beats_path = out_dir / (id + "_beats.csv");
        write_csv(e.beats_path, {"time"}, Eigen::Map<const Eigen::VectorXd>(beats.data(), Index(beats.size())));
      }
      m.scans.push_back(std::move(e));
    }
  }
  save_manifest(m, out_dir / "manifest.json");

  nlohmann::json side{{"generator", "physio-recon synth"},
                      {"dataset_name", cfg.dataset_name},
                      {"n_subjects", cfg.n_subjects},
                      {"scans_per_subject", cfg.scans_per_subject},
                      {"n_roi", cfg.n_roi},
                      {"T", cfg.T},
                      {"dt", cfg.dt},
                      {"snr", cfg.snr},
                      {"lag_max", cfg.lag_max},
                      {"age_range", {cfg.age_min, cfg.age_max}},
                      {"seed", cfg.seed},
                      {"encoding_seed", cfg.effective_encoding_seed()},
                      {"kernel_shift", cfg.kernel_shift},
                      {"raw_mode", cfg.raw_mode}};
  if (cfg.raw_mode) {
    side["raw_tr"] = cfg.raw_tr;
    side["physio_hz"] = cfg.physio_hz;
  }
  std::ofstream(out_dir / "synth.json") << side.dump(2) << "\n";
  return load_manifest(out_dir / "manifest.json");
}

LinearOracle LinearOracle::fit(const std::vector<const Eigen::MatrixXd*>& rois,
                               const std::vector<const Eigen::VectorXd*>& targets) {
  if (rois.empty() || rois.size() != targets.size()) fail("oracle: need matching non-empty inputs");
  const Index r = rois.front()->cols();
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(r + 1, r + 1);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(r + 1);
  for (std::size_t s = 0; s < rois.size(); ++s) {
    Eigen::MatrixXd x(rois[s]->rows(), r + 1);
    x.col(0).setOnes();
    x.rightCols(r) = *rois[s];
    gram += x.transpose() * x;
    rhs += x.transpose() * *targets[s];
  }
  return {gram.ldlt().solve(rhs)};
}

Eigen::VectorXd LinearOracle::predict(const Eigen::MatrixXd& roi) const {
  return (roi * coef.tail(coef.size() - 1)).array() + coef[0];
}

}  // namespace physio
