#pragma once

#include "physio/training.hpp"

#include <map>
#include <string>
#include <vector>

namespace physio {

/// Plain Pearson correlation, kept independent of the loss code. Returns NaN
/// when either side has standard deviation <= 1e-12.
double pearson_r(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

struct ScanResult {
  std::string scan_id;
  std::string subject_id;
  double age = 0.0;
  std::string task;  // "RV" or "HR"
  int fold = 0;
  double r = 0.0;    // NaN for a degenerate prediction
};

/// Measured and predicted series of one scan on the aligned span.
struct PredictionTrace {
  std::string scan_id;
  std::string task;
  Eigen::VectorXd t;  // seconds
  Eigen::VectorXd measured;
  Eigen::VectorXd predicted;
};

/// Runs the model without dropout. Row k of the result predicts input time
/// prediction_offset + k.
Eigen::MatrixXd predict_scan(const WindowModel<double>& model, const Scan& scan);

/// One result per scan per output. `data_hash` is the preprocessing hash of
/// the scans; a mismatch with the checkpoint's recorded hash is an error.
/// Empty hashes on either side skip the check.
std::vector<ScanResult> evaluate_scans(const Checkpoint& ck, const std::vector<const Scan*>& scans, int fold,
                                       const std::string& data_hash, std::vector<PredictionTrace>* traces = nullptr);

/// Median with the mean-of-central-pair convention for even counts.
double median(std::vector<double> values);

struct MedianSummary {
  std::map<int, double> per_fold;
  double pooled = 0.0;
  double median_of_fold_medians = 0.0;
  int n_scans = 0;
  int excluded = 0;  // degenerate predictions
};

/// Medians of one task's results; NaN correlations are excluded and counted.
MedianSummary median_summary(const std::vector<ScanResult>& results);

struct AgeGroup {
  double age_min = 0.0;
  double age_max = 0.0;
  int n_subjects = 0;
  int n_scans = 0;
  double median = 0.0;
};

/// Equal-count age groups over subjects (sorted by age, then subject id).
/// Group g holds subjects [g * n / k, (g + 1) * n / k) of that order.
std::vector<AgeGroup> age_group_summary(const std::vector<ScanResult>& results, int n_groups = 3);

struct EvalReport {
  std::string strategy;
  std::string model;
  std::string preprocessing_hash;
  std::vector<ScanResult> results;
  std::map<std::string, MedianSummary> summary;      // by task
  std::map<std::string, std::vector<AgeGroup>> age;  // by task
};

/// Fills summary and age groups from results. Age groups are skipped for a
/// task with fewer subjects than groups.
EvalReport build_report(std::string strategy, std::string model, std::string preprocessing_hash,
                        std::vector<ScanResult> results, int n_groups = 3);

std::string report_json(const EvalReport& report);
void write_report_json(const EvalReport& report, const fs::path& path);
/// `scan_id,subject_id,age,fold,task,r`
void write_results_csv(const std::vector<ScanResult>& results, const fs::path& path);
/// `t,measured,predicted`
void write_prediction_csv(const PredictionTrace& trace, const fs::path& path);

}  // namespace physio
