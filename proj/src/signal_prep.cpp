#include "physio/signal_prep.hpp"

#include "physio/error.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

namespace physio {

namespace {

constexpr double kTimeTol = 1e-9;

void require_finite(const Eigen::VectorXd& v, const char* what) {
  if (!v.allFinite()) fail(std::string(what) + ": input contains non-finite values");
}

std::vector<double> poly_from_roots(const std::vector<std::complex<double>>& roots) {
  std::vector<std::complex<double>> c{1.0};
  for (const auto& r : roots) {
    std::vector<std::complex<double>> next(c.size() + 1, 0.0);
    for (std::size_t i = 0; i < c.size(); ++i) {
      next[i] += c[i];
      next[i + 1] -= c[i] * r;
    }
    c = std::move(next);
  }
  std::vector<double> out(c.size());
  std::transform(c.begin(), c.end(), out.begin(), [](auto z) { return z.real(); });
  return out;
}

// Inclusive sample index range of [lo, hi] on the grid t0 + i*dt, clamped.
std::pair<Eigen::Index, Eigen::Index> index_span(double lo, double hi, double t0, double dt,
                                                 Eigen::Index n) {
  auto first = static_cast<Eigen::Index>(std::ceil((lo - t0) / dt - kTimeTol));
  auto last = static_cast<Eigen::Index>(std::floor((hi - t0) / dt + kTimeTol));
  return {std::max<Eigen::Index>(first, 0), std::min<Eigen::Index>(last, n - 1)};
}

}  // namespace

double population_std(const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double mean = x.mean();
  return std::sqrt((x.array() - mean).square().mean());
}

SampledSeries compute_rv(const SampledSeries& resp, const TrGrid& grid, double window_s) {
  if (window_s <= 0) fail("compute_rv: window must be positive");
  if (resp.dt <= 0) fail("compute_rv: sampling interval must be positive");
  if (grid.tr_seconds <= 0 || grid.n_volumes < 2) fail("compute_rv: invalid TR grid");
  require_finite(resp.values, "compute_rv");

  SampledSeries out{Eigen::VectorXd(grid.n_volumes), grid.tr_seconds, 0.0};
  const double half = window_s / 2;
  for (Eigen::Index k = 0; k < grid.n_volumes; ++k) {
    const double tk = static_cast<double>(k) * grid.tr_seconds;
    auto [first, last] = index_span(tk - half, tk + half, resp.t0, resp.dt, resp.size());
    const Eigen::Index count = last - first + 1;
    if (count < 2) {
      fail("compute_rv: window at TR index " + std::to_string(k) + " holds fewer than 2 samples");
    }
    out.values[k] = population_std(resp.values.segment(first, count));
  }
  return out;
}

SampledSeries compute_hr(const BeatTrain& beats, const TrGrid& grid, double window_s) {
  if (window_s <= 0) fail("compute_hr: window must be positive");
  if (grid.tr_seconds <= 0 || grid.n_volumes < 2) fail("compute_hr: invalid TR grid");
  const auto& ts = beats.timestamps;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!std::isfinite(ts[i])) fail("compute_hr: non-finite beat timestamp");
    if (i > 0 && !(ts[i] > ts[i - 1])) {
      fail("compute_hr: beat timestamps not strictly increasing at index " + std::to_string(i));
    }
  }

  const double half = window_s / 2;
  std::vector<double> hr(static_cast<std::size_t>(grid.n_volumes), 0.0);
  std::vector<bool> valid(hr.size(), false);
  for (Eigen::Index k = 0; k < grid.n_volumes; ++k) {
    const double tk = static_cast<double>(k) * grid.tr_seconds;
    auto lo = std::lower_bound(ts.begin(), ts.end(), tk - half - kTimeTol);
    auto hi = std::upper_bound(ts.begin(), ts.end(), tk + half + kTimeTol);
    const auto n = std::distance(lo, hi);
    if (n < 2) continue;
    // Mean of consecutive differences telescopes to the span over (n - 1).
    const double mean_ibi = (*(hi - 1) - *lo) / static_cast<double>(n - 1);
    hr[static_cast<std::size_t>(k)] = 60.0 / mean_ibi;
    valid[static_cast<std::size_t>(k)] = true;
  }

  std::vector<std::size_t> valid_idx;
  for (std::size_t k = 0; k < valid.size(); ++k)
    if (valid[k]) valid_idx.push_back(k);
  if (valid_idx.empty()) fail("compute_hr: no window contains two or more beats");

  SampledSeries out{Eigen::VectorXd(grid.n_volumes), grid.tr_seconds, 0.0};
  for (std::size_t k = 0; k < hr.size(); ++k) {
    if (valid[k]) {
      out.values[static_cast<Eigen::Index>(k)] = hr[k];
      continue;
    }
    // Nearest valid neighbour, earlier index on ties.
    auto it = std::lower_bound(valid_idx.begin(), valid_idx.end(), k);
    std::size_t pick;
    if (it == valid_idx.end()) {
      pick = valid_idx.back();
    } else if (it == valid_idx.begin()) {
      pick = *it;
    } else {
      const std::size_t after = *it, before = *(it - 1);
      pick = (k - before <= after - k) ? before : after;
    }
    out.values[static_cast<Eigen::Index>(k)] = hr[pick];
  }
  return out;
}

SampledSeries detrend_linear(const SampledSeries& x) {
  const Eigen::Index n = x.size();
  if (n < 2) fail("detrend: series needs at least 2 samples");
  require_finite(x.values, "detrend");
  // Centred abscissa keeps the 2x2 normal equations diagonal.
  const Eigen::VectorXd t =
      Eigen::VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1)).array() - (n - 1) / 2.0;
  const double mean = x.values.mean();
  const double slope = t.dot(x.values) / t.squaredNorm();
  SampledSeries out = x;
  out.values = (x.values.array() - mean - slope * t.array()).matrix();
  return out;
}

IirFilter design_butter_bandpass(const FilterSpec& spec, double fs) {
  const double nyq = fs / 2;
  if (spec.order < 1) fail("bandpass: order must be positive");
  if (!(spec.low_hz > 0 && spec.low_hz < spec.high_hz)) fail("bandpass: need 0 < low < high");
  if (spec.high_hz >= nyq) {
    fail("bandpass: band edge " + std::to_string(spec.high_hz) + " Hz is not below Nyquist " +
         std::to_string(nyq) + " Hz");
  }

  using cd = std::complex<double>;
  const int n = spec.order;
  const double pi = std::numbers::pi;
  // Prewarped analog band edges.
  const double w_lo = 2 * fs * std::tan(pi * spec.low_hz / fs);
  const double w_hi = 2 * fs * std::tan(pi * spec.high_hz / fs);
  const double bw = w_hi - w_lo;
  const double w0 = std::sqrt(w_lo * w_hi);

  std::vector<cd> poles;
  for (int k = 1; k <= n; ++k) {
    const cd p = std::polar(1.0, pi * (2.0 * k + n - 1) / (2.0 * n));
    const cd half = p * bw / 2.0;
    const cd disc = std::sqrt(half * half - w0 * w0);
    poles.push_back(half + disc);
    poles.push_back(half - disc);
  }

  // Bilinear transform. Analog zeros: n at s = 0 (-> z = 1), n at infinity (-> z = -1).
  const double fs2 = 2 * fs;
  std::vector<cd> zpoles, zzeros;
  cd denom = 1.0;
  for (const auto& p : poles) {
    zpoles.push_back((fs2 + p) / (fs2 - p));
    denom *= (fs2 - p);
  }
  for (int i = 0; i < n; ++i) zzeros.push_back(1.0);
  for (int i = 0; i < n; ++i) zzeros.push_back(-1.0);
  const double gain = (std::pow(bw, n) * std::pow(fs2, n) / denom).real();

  IirFilter f;
  f.b = poly_from_roots(zzeros);
  for (auto& c : f.b) c *= gain;
  f.a = poly_from_roots(zpoles);
  return f;
}

Eigen::VectorXd lfilter(const IirFilter& f, const Eigen::VectorXd& x, const Eigen::VectorXd* zi) {
  const std::size_t order = std::max(f.a.size(), f.b.size()) - 1;
  std::vector<double> b(order + 1, 0.0), a(order + 1, 0.0);
  std::copy(f.b.begin(), f.b.end(), b.begin());
  std::copy(f.a.begin(), f.a.end(), a.begin());

  Eigen::VectorXd z = zi ? *zi : Eigen::VectorXd::Zero(static_cast<Eigen::Index>(order));
  Eigen::VectorXd y(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    const double yi = b[0] * xi + (order > 0 ? z[0] : 0.0);
    for (std::size_t j = 1; j < order; ++j) {
      z[static_cast<Eigen::Index>(j - 1)] =
          b[j] * xi + z[static_cast<Eigen::Index>(j)] - a[j] * yi;
    }
    if (order > 0) z[static_cast<Eigen::Index>(order - 1)] = b[order] * xi - a[order] * yi;
    y[i] = yi;
  }
  return y;
}

Eigen::VectorXd lfilter_zi(const IirFilter& f) {
  const auto n = static_cast<Eigen::Index>(f.a.size()) - 1;
  // (I - A^T) zi = b[1:] - a[1:] * b[0], A the companion matrix of a.
  Eigen::MatrixXd companion = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) companion(0, j) = -f.a[static_cast<std::size_t>(j + 1)];
  for (Eigen::Index i = 1; i < n; ++i) companion(i, i - 1) = 1.0;
  const Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(n, n) - companion.transpose();
  Eigen::VectorXd rhs(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto k = static_cast<std::size_t>(i + 1);
    rhs[i] = f.b[k] - f.a[k] * f.b[0];
  }
  return lhs.partialPivLu().solve(rhs);
}

SampledSeries bandpass(const SampledSeries& x, const FilterSpec& spec) {
  if (x.dt <= 0) fail("bandpass: sampling interval must be positive");
  require_finite(x.values, "bandpass");
  const IirFilter f = design_butter_bandpass(spec, 1.0 / x.dt);
  const Eigen::Index pad = filtfilt_padding(spec.order);
  const Eigen::Index n = x.size();
  if (n <= pad) {
    fail("bandpass: series of length " + std::to_string(n) + " too short for padding of " +
         std::to_string(pad));
  }

  // Odd reflection about each endpoint.
  Eigen::VectorXd ext(n + 2 * pad);
  for (Eigen::Index i = 0; i < pad; ++i) {
    ext[i] = 2 * x.values[0] - x.values[pad - i];
    ext[n + pad + i] = 2 * x.values[n - 1] - x.values[n - 2 - i];
  }
  ext.segment(pad, n) = x.values;

  const Eigen::VectorXd zi = lfilter_zi(f);
  Eigen::VectorXd z0 = zi * ext[0];
  Eigen::VectorXd fwd = lfilter(f, ext, &z0);
  Eigen::VectorXd rev = fwd.reverse();
  Eigen::VectorXd z1 = zi * rev[0];
  Eigen::VectorXd back = lfilter(f, rev, &z1).reverse();

  SampledSeries out = x;
  out.values = back.segment(pad, n);
  return out;
}

Eigen::Index resampled_length(Eigen::Index n, double dt, double dst_dt) {
  const double span = static_cast<double>(n - 1) * dt;
  // Relative tolerance absorbs representation error in products like 486 * 0.8.
  return static_cast<Eigen::Index>(std::floor(span / dst_dt * (1 + 1e-12) + 1e-9)) + 1;
}

SampledSeries resample_linear(const SampledSeries& x, double dst_dt) {
  if (!(dst_dt > 0)) fail("resample: destination interval must be positive");
  if (x.size() < 2) fail("resample: series needs at least 2 samples");
  require_finite(x.values, "resample");
  const Eigen::Index n = x.size();
  const Eigen::Index m = resampled_length(n, x.dt, dst_dt);

  SampledSeries out{Eigen::VectorXd(m), dst_dt, x.t0};
  const double ratio = dst_dt / x.dt;
  for (Eigen::Index k = 0; k < m; ++k) {
    const double pos = static_cast<double>(k) * ratio;
    auto i = static_cast<Eigen::Index>(std::floor(pos));
    double frac = pos - static_cast<double>(i);
    if (i >= n - 1) {
      i = n - 2;
      frac = 1.0;
    }
    out.values[k] = frac == 0.0 ? x.values[i]
                                : (1 - frac) * x.values[i] + frac * x.values[i + 1];
  }
  return out;
}

SampledSeries znorm(const SampledSeries& x) {
  if (x.size() < 1) fail("znorm: empty series");
  require_finite(x.values, "znorm");
  const double sd = population_std(x.values);
  if (!(sd > 1e-12)) fail("znorm: series is constant (std " + std::to_string(sd) + ")");
  SampledSeries out = x;
  out.values = ((x.values.array() - x.values.mean()) / sd).matrix();
  return out;
}

SampledSeries preprocess_chain(const SampledSeries& x, const FilterSpec& spec, double dst_dt) {
  const char* stage = "detrend";
  try {
    SampledSeries s = detrend_linear(x);
    stage = "bandpass";
    s = bandpass(s, spec);
    stage = "resample";
    s = resample_linear(s, dst_dt);
    stage = "znorm";
    return znorm(s);
  } catch (const Error& e) {
    throw Error(e.kind(), std::string("[") + stage + "] " + e.what());
  }
}

}  // namespace physio
