#include "physio/evaluation.hpp"

#include "physio/config_io.hpp"
#include "physio/error.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace physio {

double pearson_r(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size()) {
    fail("pearson_r: lengths differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  }
  if (a.size() < 3) fail("pearson_r: need at least 3 samples");
  const double n = double(a.size());
  const double ma = a.sum() / n;
  const double mb = b.sum() / n;
  double sab = 0, saa = 0, sbb = 0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (std::sqrt(saa / n) <= kDegenerateStd || std::sqrt(sbb / n) <= kDegenerateStd) {
    return std::numeric_limits<double>::quiet_NaN();
  }
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

Eigen::MatrixXd predict_scan(const WindowModel<double>& model, const Scan& scan) {
  Rng rng(0);
  const ad::Matrix<double> roi = scan.roi;
  return model.forward(roi, false, rng).value();
}

std::vector<ScanResult> evaluate_scans(const Checkpoint& ck, const std::vector<const Scan*>& scans, int fold,
                                       const std::string& data_hash, std::vector<PredictionTrace>* traces) {
  const std::string& trained = ck.provenance.preprocessing_hash;
  if (!trained.empty() && !data_hash.empty() && trained != data_hash) {
    fail(ErrorKind::hash_mismatch, "evaluate: checkpoint was trained on data with preprocessing hash " + trained +
                                       ", evaluation data has " + data_hash);
  }
  const WindowModel<double> model(ck.model, load_params<double>(ck));
  const Task task = ck.train.task;
  std::vector<std::string> names;
  if (task == Task::rv || task == Task::joint) names.push_back("RV");
  if (task == Task::hr || task == Task::joint) names.push_back("HR");

  std::vector<ScanResult> out;
  for (const Scan* s : scans) {
    const Eigen::MatrixXd pred = predict_scan(model, *s);
    const Eigen::MatrixXd target = target_matrix(*s, task);
    const Eigen::Index offset = model.prediction_offset();
    for (std::size_t c = 0; c < names.size(); ++c) {
      const auto measured = target.col(Eigen::Index(c)).segment(offset, pred.rows());
      const Eigen::VectorXd predicted = pred.col(Eigen::Index(c));
      out.push_back({s->scan_id, s->subject_id, s->age, names[c], fold, pearson_r(predicted, measured)});
      if (traces) {
        PredictionTrace tr{s->scan_id, names[c], {}, measured, predicted};
        tr.t = Eigen::VectorXd::LinSpaced(pred.rows(), 0, double(pred.rows() - 1)).array() * s->dt +
               double(offset) * s->dt;
        traces->push_back(std::move(tr));
      }
    }
  }
  return out;
}

double median(std::vector<double> values) {
  if (values.empty()) fail("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

MedianSummary median_summary(const std::vector<ScanResult>& results) {
  if (results.empty()) fail("median_summary: no results");
  MedianSummary s;
  std::map<int, std::vector<double>> by_fold;
  std::vector<double> all;
  for (const auto& r : results) {
    if (!std::isfinite(r.r)) {
      ++s.excluded;
      continue;
    }
    by_fold[r.fold].push_back(r.r);
    all.push_back(r.r);
  }
  if (all.empty()) fail("median_summary: every prediction was degenerate");
  s.n_scans = int(all.size());
  s.pooled = median(all);
  std::vector<double> fold_medians;
  for (auto& [f, v] : by_fold) {
    s.per_fold[f] = median(v);
    fold_medians.push_back(s.per_fold[f]);
  }
  s.median_of_fold_medians = median(fold_medians);
  return s;
}

std::vector<AgeGroup> age_group_summary(const std::vector<ScanResult>& results, int n_groups) {
  if (n_groups < 2) fail(ErrorKind::usage, "age groups: need at least 2 groups");
  std::map<std::string, double> subject_age;
  for (const auto& r : results) subject_age.emplace(r.subject_id, r.age);
  if (int(subject_age.size()) < n_groups) {
    fail("age groups: " + std::to_string(subject_age.size()) + " subjects cannot fill " +
         std::to_string(n_groups) + " groups");
  }
  std::vector<std::pair<double, std::string>> order;
  for (const auto& [id, age] : subject_age) order.emplace_back(age, id);
  std::sort(order.begin(), order.end());
  const std::size_t n = order.size();
  std::map<std::string, int> group_of;
  std::vector<AgeGroup> groups(static_cast<std::size_t>(n_groups));
  for (std::size_t i = 0; i < n; ++i) {
    const int g = int(i * std::size_t(n_groups) / n);
    group_of[order[i].second] = g;
    auto& grp = groups[std::size_t(g)];
    if (grp.n_subjects == 0) grp.age_min = order[i].first;
    grp.age_max = order[i].first;
    ++grp.n_subjects;
  }
  std::vector<std::vector<double>> rs(static_cast<std::size_t>(n_groups));
  for (const auto& r : results) {
    const int g = group_of[r.subject_id];
    ++groups[std::size_t(g)].n_scans;
    if (std::isfinite(r.r)) rs[std::size_t(g)].push_back(r.r);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    groups[g].median = rs[g].empty() ? std::numeric_limits<double>::quiet_NaN() : median(rs[g]);
  }
  return groups;
}

EvalReport build_report(std::string strategy, std::string model, std::string preprocessing_hash,
                        std::vector<ScanResult> results, int n_groups) {
  EvalReport rep{std::move(strategy), std::move(model), std::move(preprocessing_hash), std::move(results), {}, {}};
  std::map<std::string, std::vector<ScanResult>> by_task;
  for (const auto& r : rep.results) by_task[r.task].push_back(r);
  for (const auto& [task, rs] : by_task) {
    rep.summary[task] = median_summary(rs);
    std::set<std::string> subjects;
    for (const auto& r : rs) subjects.insert(r.subject_id);
    if (int(subjects.size()) >= n_groups) rep.age[task] = age_group_summary(rs, n_groups);
  }
  return rep;
}

namespace {

json number_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

}  // namespace

std::string report_json(const EvalReport& rep) {
  json scans = json::array();
  for (const auto& r : rep.results) {
    scans.push_back({{"scan_id", r.scan_id},
                     {"subject_id", r.subject_id},
                     {"age", r.age},
                     {"fold", r.fold},
                     {"task", r.task},
                     {"r", number_or_null(r.r)}});
  }
  json tasks = json::object();
  for (const auto& [task, s] : rep.summary) {
    json folds = json::object();
    for (const auto& [f, m] : s.per_fold) folds[std::to_string(f)] = m;
    json groups = json::array();
    if (rep.age.count(task)) {
      for (const auto& g : rep.age.at(task)) {
        groups.push_back({{"age_min", g.age_min},
                          {"age_max", g.age_max},
                          {"n_subjects", g.n_subjects},
                          {"n_scans", g.n_scans},
                          {"median_r", number_or_null(g.median)}});
      }
    }
    tasks[task] = {{"pooled_median", s.pooled},
                   {"median_of_fold_medians", s.median_of_fold_medians},
                   {"per_fold_median", folds},
                   {"n_scans", s.n_scans},
                   {"excluded_degenerate", s.excluded},
                   {"age_groups", groups}};
  }
  const json doc{{"strategy", rep.strategy},
                 {"model", rep.model},
                 {"preprocessing_hash", rep.preprocessing_hash},
                 {"tasks", tasks},
                 {"scans", scans}};
  return doc.dump(2) + "\n";
}

void write_report_json(const EvalReport& report, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << report_json(report);
}

void write_results_csv(const std::vector<ScanResult>& results, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << "scan_id,subject_id,age,fold,task,r\n";
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof buf, "%.17g", r.r);
    out << r.scan_id << ',' << r.subject_id << ',' << r.age << ',' << r.fold << ',' << r.task << ','
        << (std::isfinite(r.r) ? buf : "nan") << '\n';
  }
}

void write_prediction_csv(const PredictionTrace& trace, const fs::path& path) {
  Eigen::MatrixXd m(trace.t.size(), 3);
  m << trace.t, trace.measured, trace.predicted;
  write_csv(path, {"t", "measured", "predicted"}, m);
}

}  // namespace physio
