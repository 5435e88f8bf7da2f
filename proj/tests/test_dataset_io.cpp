#include "doctest.h"
#include "test_util.hpp"

#include "physio/dataset_io.hpp"
#include "physio/error.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

using namespace physio;
using physio::testing::TempDir;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string error_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

// In-band random series of length n at sampling interval dt.
Eigen::VectorXd smooth_series(Eigen::Index n, double dt, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase(0, 6.283185307179586);
  Eigen::VectorXd v = Eigen::VectorXd::Zero(n);
  for (double f : {0.02, 0.045, 0.07, 0.1}) {
    const double ph = phase(rng);
    for (Eigen::Index i = 0; i < n; ++i) v[i] += std::sin(6.283185307179586 * f * double(i) * dt + ph);
  }
  return v;
}

// Writes a raw scan with ROI, RV and HR files on the TR grid.
ScanEntry write_raw_scan(const fs::path& dir, const std::string& id, Eigen::Index n, double tr, int n_roi,
                         std::uint64_t seed) {
  Eigen::MatrixXd roi(n, n_roi);
  std::vector<std::string> names;
  for (int c = 0; c < n_roi; ++c) {
    roi.col(c) = smooth_series(n, tr, seed * 31 + std::uint64_t(c));
    names.push_back("roi" + std::to_string(c));
  }
  write_csv(dir / (id + "_roi.csv"), names, roi);
  write_csv(dir / (id + "_rv.csv"), {"rv"}, smooth_series(n, tr, seed * 7 + 100));
  write_csv(dir / (id + "_hr.csv"), {"hr"}, smooth_series(n, tr, seed * 7 + 200));
  return {id, "sub-" + id, 50.0, dir / (id + "_roi.csv"), dir / (id + "_rv.csv"), dir / (id + "_hr.csv"), {}, {}};
}

struct Item {
  std::string subject_id;
  int scan = 0;
  double age = 0.0;
};

}  // namespace

TEST_CASE("csv round trip and errors") {
  TempDir dir("csv");
  Eigen::MatrixXd m(3, 2);
  m << 1.0 / 3.0, -2.5e-300, 1e300, 0.1, 7, -0.0;
  write_csv(dir / "a.csv", {"x", "y"}, m);
  const CsvTable t = read_csv(dir / "a.csv");
  CHECK(t.header == std::vector<std::string>{"x", "y"});
  CHECK(t.data == m);

  write_text(dir / "ragged.csv", "a,b\n1,2\n3\n");
  CHECK(error_of([&] { read_csv(dir / "ragged.csv"); }).find("line 3") != std::string::npos);
  write_text(dir / "nan.csv", "a,b\n1,nan\n");
  CHECK(error_of([&] { read_csv(dir / "nan.csv"); }).find("column 'b'") != std::string::npos);
  write_text(dir / "junk.csv", "a\n1x\n");
  CHECK_THROWS_AS(read_csv(dir / "junk.csv"), Error);
  CHECK_THROWS_AS(read_csv(dir / "missing.csv"), Error);
}

TEST_CASE("manifest parsing") {
  TempDir dir("manifest");
  write_text(dir / "m.json", R"({"dataset_name": "d", "tr_seconds": 0.8, "physio_hz": 400,
    "scans": [{"scan_id": "s1", "subject_id": "p1", "age": 44, "roi_path": "nope/roi.csv"}]})");
  const Manifest m = load_manifest(dir / "m.json");
  CHECK(m.scans.size() == 1);
  CHECK(m.scans[0].roi_path == dir.path() / "nope/roi.csv");
  CHECK(m.scans[0].rv_path.empty());
  CHECK(m.preprocessing_hash.empty());
  // Missing files only surface when the scan is loaded.
  CHECK(error_of([&] { load_scan(m.scans[0], m, PrepSettings{}); }).find("cannot open") != std::string::npos);

  write_text(dir / "dup.json", R"({"dataset_name": "d", "tr_seconds": 0.8, "physio_hz": 400, "scans": [
    {"scan_id": "s1", "subject_id": "p1", "age": 44, "roi_path": "a.csv"},
    {"scan_id": "s1", "subject_id": "p2", "age": 45, "roi_path": "b.csv"}]})");
  CHECK(error_of([&] { load_manifest(dir / "dup.json"); }).find("'s1'") != std::string::npos);

  write_text(dir / "missing.json", R"({"dataset_name": "d", "tr_seconds": 0.8, "physio_hz": 400, "scans": [
    {"scan_id": "s1", "age": 44, "roi_path": "a.csv"}]})");
  CHECK(error_of([&] { load_manifest(dir / "missing.json"); }).find("$.scans[0].subject_id") != std::string::npos);

  write_text(dir / "badnum.json", R"({"dataset_name": "d", "tr_seconds": "x", "physio_hz": 400, "scans": []})");
  CHECK(error_of([&] { load_manifest(dir / "badnum.json"); }).find("$.tr_seconds") != std::string::npos);
  write_text(dir / "broken.json", "{");
  CHECK_THROWS_AS(load_manifest(dir / "broken.json"), Error);

  // save -> load is stable.
  save_manifest(m, dir / "copy.json");
  const Manifest m2 = load_manifest(dir / "copy.json");
  CHECK(m2.scans[0].roi_path == m.scans[0].roi_path);
  CHECK(m2.tr_seconds == m.tr_seconds);
}

TEST_CASE("load_scan on raw data") {
  TempDir dir("load");
  Manifest m{"raw", 0.8, 400.0, {}, {}};
  m.scans.push_back(write_raw_scan(dir.path(), "a", 487, 0.8, 4, 1));
  const Scan s = load_scan(m.scans[0], m, PrepSettings{});
  CHECK(s.length() == 271);
  CHECK(s.roi.cols() == 4);
  CHECK(s.rv.size() == 271);
  CHECK(s.hr.size() == 271);
  for (Eigen::Index c = 0; c < 4; ++c) {
    CHECK(std::abs(s.roi.col(c).mean()) < 1e-9);
    CHECK(std::abs(population_std(s.roi.col(c)) - 1.0) < 1e-9);
  }
  // Deterministic to the bit.
  const Scan again = load_scan(m.scans[0], m, PrepSettings{});
  CHECK(again.roi == s.roi);
  CHECK(again.rv == s.rv);
  CHECK(again.hr == s.hr);

  SUBCASE("constant ROI column is named") {
    Eigen::MatrixXd roi = read_csv(m.scans[0].roi_path).data;
    roi.col(2).setConstant(3.0);
    write_csv(m.scans[0].roi_path, {"roi0", "roi1", "flat", "roi3"}, roi);
    const std::string msg = error_of([&] { load_scan(m.scans[0], m, PrepSettings{}); });
    CHECK(msg.find("'flat'") != std::string::npos);
    CHECK(msg.find("[znorm]") != std::string::npos);
  }
  SUBCASE("missing target sources") {
    ScanEntry e = m.scans[0];
    e.hr_path.clear();
    CHECK(error_of([&] { load_scan(e, m, PrepSettings{}); }).find("no HR source") != std::string::npos);
  }
}

TEST_CASE("preprocessed cache") {
  TempDir dir("cache");
  Manifest m{"raw", 0.8, 400.0, {}, {}};
  for (int i = 0; i < 3; ++i) m.scans.push_back(write_raw_scan(dir.path(), "s" + std::to_string(i), 200, 0.8, 3, std::uint64_t(i + 5)));
  const PrepSettings prep;
  const auto first = preprocess_dataset(m, prep, dir / "out", false);
  CHECK(first.size() == 3);
  for (const auto& o : first) CHECK_FALSE(o.skipped);
  const auto second = preprocess_dataset(m, prep, dir / "out", false);
  for (const auto& o : second) CHECK(o.skipped);

  const Manifest cache = load_manifest(dir / "out" / "manifest.json");
  CHECK(cache.preprocessing_hash == prep.hash());
  CHECK(cache.tr_seconds == prep.target_dt);
  const Scan direct = load_scan(m.scans[1], m, prep);
  const Scan cached = load_scan(cache.scans[1], cache, prep);
  CHECK(cached.roi == direct.roi);
  CHECK(cached.rv == direct.rv);
  CHECK(cached.hr == direct.hr);

  // Any settings change, down to one bit of one field, is detected.
  PrepSettings tweaked = prep;
  tweaked.filter.high_hz = std::nextafter(prep.filter.high_hz, 1.0);
  CHECK(tweaked.hash() != prep.hash());
  try {
    load_scan(cache.scans[0], cache, tweaked);
    FAIL("expected a hash mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::hash_mismatch);
  }

  // Changing an input invalidates that scan's cache entry only.
  write_raw_scan(dir.path(), "s2", 200, 0.8, 3, 99);
  const auto third = preprocess_dataset(m, prep, dir / "out", false);
  CHECK(third[0].skipped);
  CHECK(third[1].skipped);
  CHECK_FALSE(third[2].skipped);

  SUBCASE("keep_going collects failures") {
    write_text(m.scans[0].roi_path, "a,b\n1,2\n3\n");
    CHECK_THROWS_AS(preprocess_dataset(m, prep, dir / "out2", false), Error);
    const auto outcomes = preprocess_dataset(m, prep, dir / "out3", true);
    CHECK(outcomes[0].error.find("line 3") != std::string::npos);
    CHECK(outcomes[1].error.empty());
  }
}

TEST_CASE("age-balanced folds") {
  std::vector<SubjectAge> subjects;
  for (int i = 0; i < 10; ++i) subjects.push_back({"p" + std::to_string(i), 30.0 + 5.0 * i});
  const FoldPlan plan = make_age_balanced_folds(subjects, 5, 1);
  std::vector<std::vector<double>> ages(5);
  for (const auto& s : subjects) ages[std::size_t(plan.fold_of(s.subject_id))].push_back(s.age);
  for (const auto& a : ages) {
    CHECK(a.size() == 2);
    const double mean = (a[0] + a[1]) / 2;
    CHECK(mean >= 47.5);
    CHECK(mean <= 57.5);
  }
  CHECK_THROWS_AS(make_age_balanced_folds(subjects, 1, 0), Error);
  CHECK_THROWS_AS(make_age_balanced_folds({subjects.begin(), subjects.begin() + 3}, 5, 0), Error);

  SUBCASE("all scans of a subject share a fold") {
    std::vector<Item> scans;
    for (int s = 0; s < 12; ++s)
      for (int j = 0; j < 4; ++j) scans.push_back({"p" + std::to_string(s), j, 40.0 + s});
    const auto subj = subjects_of(scans);
    CHECK(subj.size() == 12);
    const FoldPlan p = make_age_balanced_folds(subj, 3, 2);
    for (int s = 0; s < 12; ++s) {
      std::set<int> folds;
      for (const auto& it : scans)
        if (it.subject_id == "p" + std::to_string(s)) folds.insert(p.fold_of(it.subject_id));
      CHECK(folds.size() == 1);
    }
  }
  SUBCASE("balance beats random subject-level splits") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> age(36, 89);
    std::vector<SubjectAge> people;
    for (int i = 0; i < 50; ++i) people.push_back({"s" + std::to_string(i), std::round(age(rng))});
    auto spread = [&](const std::map<std::string, int>& assign) {
      std::vector<double> sum(5, 0.0), n(5, 0.0);
      for (const auto& p : people) {
        sum[std::size_t(assign.at(p.subject_id))] += p.age;
        n[std::size_t(assign.at(p.subject_id))] += 1;
      }
      std::vector<double> means;
      for (int f = 0; f < 5; ++f) means.push_back(sum[std::size_t(f)] / n[std::size_t(f)]);
      return *std::max_element(means.begin(), means.end()) - *std::min_element(means.begin(), means.end());
    };
    const double balanced = spread(make_age_balanced_folds(people, 5, 9).assignment);
    std::vector<double> random_spreads;
    for (int trial = 0; trial < 1000; ++trial) {
      std::vector<int> labels;
      for (int i = 0; i < 50; ++i) labels.push_back(i % 5);
      std::shuffle(labels.begin(), labels.end(), rng);
      std::map<std::string, int> assign;
      for (int i = 0; i < 50; ++i) assign[people[std::size_t(i)].subject_id] = labels[std::size_t(i)];
      random_spreads.push_back(spread(assign));
    }
    std::sort(random_spreads.begin(), random_spreads.end());
    CHECK(balanced <= random_spreads.front());
  }
}

TEST_CASE("fold and validation split properties on random subject lists") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int n_subj = std::uniform_int_distribution<int>(5, 40)(rng);
    const int k = std::uniform_int_distribution<int>(2, 5)(rng);
    std::vector<Item> scans;
    for (int s = 0; s < n_subj; ++s) {
      const int reps = std::uniform_int_distribution<int>(1, 4)(rng);
      const double a = double(std::uniform_int_distribution<int>(36, 89)(rng));
      for (int j = 0; j < reps; ++j) scans.push_back({"x" + std::to_string(s), j, a});
    }
    const auto seed = rng();
    const FoldPlan plan = make_age_balanced_folds(subjects_of(scans), k, seed);
    CHECK(plan.assignment.size() == std::size_t(n_subj));
    std::vector<int> sizes(std::size_t(k), 0);
    for (const auto& [id, f] : plan.assignment) ++sizes[std::size_t(f)];
    CHECK(*std::max_element(sizes.begin(), sizes.end()) - *std::min_element(sizes.begin(), sizes.end()) <= 1);
    CHECK(make_age_balanced_folds(subjects_of(scans), k, seed).assignment == plan.assignment);

    for (int f = 0; f < k; ++f) {
      std::vector<Item> train, test;
      for (const auto& it : scans) (plan.fold_of(it.subject_id) == f ? test : train).push_back(it);
      std::set<std::string> train_ids, test_ids;
      for (const auto& it : train) train_ids.insert(it.subject_id);
      for (const auto& it : test) test_ids.insert(it.subject_id);
      if (train_ids.size() < 2) continue;
      const auto [tr, va] = select_validation(train, 0.15, seed + std::uint64_t(f));
      std::set<std::string> tr_ids, va_ids;
      for (const auto& it : tr) tr_ids.insert(it.subject_id);
      for (const auto& it : va) va_ids.insert(it.subject_id);
      CHECK(tr.size() + va.size() == train.size());
      CHECK(double(va.size()) >= 0.15 * double(train.size()) - 1e-9);
      for (const auto& id : va_ids) {
        CHECK(tr_ids.count(id) == 0);
        CHECK(test_ids.count(id) == 0);
      }
      for (const auto& id : tr_ids) CHECK(test_ids.count(id) == 0);
      const auto again = select_validation(train, 0.15, seed + std::uint64_t(f));
      CHECK(again.second.size() == va.size());
    }
  }
}

TEST_CASE("select_validation examples") {
  std::vector<Item> hundred;
  for (int i = 0; i < 100; ++i) hundred.push_back({"s" + std::to_string(i), 0, 50});
  CHECK(select_validation(hundred, 0.15, 4).second.size() == 15);

  std::vector<Item> twenty;
  for (int s = 0; s < 5; ++s)
    for (int j = 0; j < 4; ++j) twenty.push_back({"s" + std::to_string(s), j, 50});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto [tr, va] = select_validation(twenty, 0.15, seed);
    CHECK(va.size() == 4);
    CHECK(tr.size() == 16);
    CHECK(va.front().subject_id == va.back().subject_id);
  }
  const auto a = select_validation(twenty, 0.15, 7);
  const auto b = select_validation(twenty, 0.15, 7);
  CHECK(a.second.front().subject_id == b.second.front().subject_id);

  std::vector<Item> single{{"only", 0, 50}, {"only", 1, 50}};
  CHECK_THROWS_AS(select_validation(single, 0.15, 0), Error);
  CHECK_THROWS_AS(select_validation(twenty, 0.0, 0), Error);
}
