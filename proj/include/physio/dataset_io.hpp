#pragma once

#include "physio/signal_prep.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace physio {

namespace fs = std::filesystem;

/// One scan as listed in a manifest. Optional paths are empty when absent.
/// Paths are absolute after load_manifest.
struct ScanEntry {
  std::string scan_id;
  std::string subject_id;
  double age = 0.0;
  fs::path roi_path;
  fs::path rv_path;
  fs::path hr_path;
  fs::path resp_path;
  fs::path beats_path;
};

struct Manifest {
  std::string dataset_name;
  double tr_seconds = 0.0;
  double physio_hz = 0.0;
  std::vector<ScanEntry> scans;
  /// Non-empty for a preprocessed cache: series are already on the common
  /// grid and this is the settings hash they were produced with.
  std::string preprocessing_hash;
};

/// Settings of the conditioning chain. Their hash guards cached data.
struct PrepSettings {
  FilterSpec filter;
  double target_dt = 1.44;
  double rv_window_s = 6.0;
  double hr_window_s = 6.0;

  /// Canonical JSON text with every real written in exact hexadecimal form.
  std::string canonical() const;
  std::string hash() const;
};

/// A loaded, preprocessed scan. roi is [T x R]; rv and hr have length T.
struct Scan {
  std::string scan_id;
  std::string subject_id;
  double age = 0.0;
  Eigen::MatrixXd roi;
  Eigen::VectorXd rv;
  Eigen::VectorXd hr;
  double dt = 1.44;
  Eigen::Index length() const { return roi.rows(); }
};

/// A CSV with a header row and numeric columns.
struct CsvTable {
  std::vector<std::string> header;
  Eigen::MatrixXd data;  // rows x columns
};

CsvTable read_csv(const fs::path& path);
/// Writes values with 17 significant digits, so a read gives back the same doubles.
void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const Eigen::Ref<const Eigen::MatrixXd>& data);
/// Single-column CSV as a vector.
Eigen::VectorXd read_series_csv(const fs::path& path);

Manifest load_manifest(const fs::path& path);
void save_manifest(const Manifest& manifest, const fs::path& path);
/// Hash of the raw file bytes, for provenance.
std::string file_hash(const fs::path& path);

/// Reads one scan and brings ROI columns, RV and HR onto the common grid.
/// For a cache manifest the chain is skipped after verifying the settings
/// hash (ErrorKind::hash_mismatch on disagreement).
Scan load_scan(const ScanEntry& entry, const Manifest& manifest, const PrepSettings& prep);
std::vector<Scan> load_all_scans(const Manifest& manifest, const PrepSettings& prep);

struct PreprocessOutcome {
  std::string scan_id;
  bool skipped = false;  // an up-to-date cache entry existed
  std::string error;     // empty on success
};

/// Preprocesses every scan into out_dir (`<id>_roi.csv`, `<id>_rv.csv`,
/// `<id>_hr.csv`, sidecar `<id>.json`) and writes out_dir/manifest.json.
/// Scans whose sidecar already matches the settings and inputs are skipped.
/// Without keep_going the first failure is rethrown.
std::vector<PreprocessOutcome> preprocess_dataset(const Manifest& manifest, const PrepSettings& prep,
                                                  const fs::path& out_dir, bool keep_going);

struct SubjectAge {
  std::string subject_id;
  double age = 0.0;
};

struct FoldPlan {
  int k = 0;
  std::map<std::string, int> assignment;
  int fold_of(const std::string& subject_id) const;
};

/// Distinct subjects in first-appearance order.
template <typename Item>
std::vector<SubjectAge> subjects_of(const std::vector<Item>& items) {
  std::vector<SubjectAge> out;
  std::set<std::string> seen;
  for (const auto& it : items) {
    if (seen.insert(it.subject_id).second) out.push_back({it.subject_id, it.age});
  }
  return out;
}

/// Sorts subjects by age (ties in seeded random order) and deals them into k
/// folds in serpentine order 0..k-1, k-1..0, 0..k-1, ...
FoldPlan make_age_balanced_folds(std::vector<SubjectAge> subjects, int k, std::uint64_t seed);

/// Subject-level validation carve-out: subjects in seeded random order are
/// moved whole into validation until it holds at least frac of the scans.
template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> select_validation(const std::vector<Item>& items,
                                                                  double frac, std::uint64_t seed);

void require_valid_fraction(double frac);
[[noreturn]] void fail_validation_split(std::size_t n_items, std::size_t n_subjects, double frac);

template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> select_validation(const std::vector<Item>& items,
                                                                  double frac, std::uint64_t seed) {
  require_valid_fraction(frac);
  std::map<std::string, std::size_t> counts;
  for (const auto& it : items) ++counts[it.subject_id];
  std::vector<std::string> order;
  for (const auto& [id, n] : counts) order.push_back(id);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // 1e-9 absorbs the rounding in frac * n (0.15 * 100 is slightly above 15).
  const double needed = frac * static_cast<double>(items.size()) - 1e-9;
  std::set<std::string> val_subjects;
  std::size_t taken = 0;
  for (const auto& id : order) {
    if (static_cast<double>(taken) >= needed) break;
    val_subjects.insert(id);
    taken += counts[id];
  }
  if (taken == 0 || taken == items.size()) {
    fail_validation_split(items.size(), counts.size(), frac);
  }
  std::pair<std::vector<Item>, std::vector<Item>> out;
  for (const auto& it : items) {
    (val_subjects.count(it.subject_id) ? out.second : out.first).push_back(it);
  }
  return out;
}

}  // namespace physio
