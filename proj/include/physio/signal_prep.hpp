#pragma once

#include <Eigen/Dense>

#include <array>
#include <string>
#include <vector>

namespace physio {

/// Uniformly sampled 1-D signal. Sample i sits at time t0 + i * dt.
struct SampledSeries {
  Eigen::VectorXd values;
  double dt = 1.0;
  double t0 = 0.0;

  Eigen::Index size() const { return values.size(); }
  double time(Eigen::Index i) const { return t0 + static_cast<double>(i) * dt; }
};

/// Heartbeat event times in seconds, strictly increasing.
struct BeatTrain {
  std::vector<double> timestamps;
};

struct FilterSpec {
  double low_hz = 0.01;
  double high_hz = 0.15;
  int order = 2;
};

/// fMRI acquisition grid. Volume k is acquired at k * tr_seconds.
struct TrGrid {
  double tr_seconds = 0.8;
  Eigen::Index n_volumes = 2;
};

/// Digital IIR filter in transfer-function form, a[0] == 1.
struct IirFilter {
  std::vector<double> b;
  std::vector<double> a;
};

/// Population standard deviation of respiration in a window centred on each TR.
SampledSeries compute_rv(const SampledSeries& resp, const TrGrid& grid, double window_s = 6.0);

/// Heart rate in beats per minute: 60 / mean inter-beat interval in a window
/// centred on each TR. Windows holding fewer than two beats copy the nearest
/// valid estimate.
SampledSeries compute_hr(const BeatTrain& beats, const TrGrid& grid, double window_s = 6.0);

/// Removes the least-squares best-fit line.
SampledSeries detrend_linear(const SampledSeries& x);

/// Butterworth band-pass design matching the usual bilinear-transform recipe
/// (prewarped edges, low-pass prototype of `order` poles mapped to a band-pass
/// of 2 * order poles).
IirFilter design_butter_bandpass(const FilterSpec& spec, double fs);

/// Direct-form II transposed filtering with optional initial state.
Eigen::VectorXd lfilter(const IirFilter& f, const Eigen::VectorXd& x,
                        const Eigen::VectorXd* zi = nullptr);

/// Steady-state initial conditions for a unit step input.
Eigen::VectorXd lfilter_zi(const IirFilter& f);

/// Number of samples reflected onto each end before forward-backward filtering.
inline Eigen::Index filtfilt_padding(int order) { return 3 * (2 * order + 1); }

/// Zero-phase forward-backward band-pass over an odd-reflection-padded copy.
SampledSeries bandpass(const SampledSeries& x, const FilterSpec& spec);

/// Output length for linear resampling onto a grid of step dst_dt.
Eigen::Index resampled_length(Eigen::Index n, double dt, double dst_dt);

SampledSeries resample_linear(const SampledSeries& x, double dst_dt);

SampledSeries znorm(const SampledSeries& x);

/// detrend -> bandpass -> resample -> znorm. Stage failures are rethrown with
/// the stage name prefixed.
SampledSeries preprocess_chain(const SampledSeries& x, const FilterSpec& spec, double dst_dt);

double population_std(const Eigen::Ref<const Eigen::VectorXd>& x);

}  // namespace physio
