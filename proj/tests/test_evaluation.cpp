#include "doctest.h"
#include "test_util.hpp"

#include "physio/error.hpp"
#include "physio/evaluation.hpp"
#include "physio/pearson_loss.hpp"
#include "physio/strategy.hpp"

#include "physio/config_io.hpp"

#include <cmath>
#include <fstream>
#include <set>

using namespace physio;
using physio::testing::synth_scans;
using physio::testing::TempDir;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> v) {
  Eigen::VectorXd out(Eigen::Index(v.size()));
  Eigen::Index i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

ScanResult result(const std::string& subject, double age, double r, int fold = 0) {
  return {subject + "_run-1", subject, age, "RV", fold, r};
}

ModelConfig tiny(Architecture a, int n_roi) {
  ModelConfig c = a == Architecture::seq2one ? ModelConfig::seq2one_default(n_roi)
                                             : ModelConfig::seq2seq_default(n_roi);
  c.attention = {2, 4, 0.0, 8};
  c.block_windows = {4, 8};
  c.window = 8;
  c.init_seed = 5;
  return c;
}

// A seq2seq checkpoint whose output is exactly ROI column 0: every block is
// the identity (zero output projection), the embedding copies column 0 into
// feature 0 and the head reads feature 0 back.
Checkpoint copy_column_checkpoint(int n_roi) {
  Checkpoint ck;
  ck.model = tiny(Architecture::seq2seq, n_roi);
  auto p = init_params<double>(ck.model);
  for (auto& [name, t] : p) {
    if (name.find("attn.o.") != std::string::npos) t.node()->value.setZero();
  }
  auto& ew = p.at("embed.weight").node()->value;
  ew.setZero();
  ew(0, 0) = 1.0;
  p.at("embed.bias").node()->value.setZero();
  auto& hw = p.at("head.weight").node()->value;
  hw.setZero();
  hw(0, 0) = 1.0;
  p.at("head.bias").node()->value.setZero();
  ck.params = store_params(p);
  ck.train.task = Task::rv;
  return ck;
}

}  // namespace

TEST_CASE("pearson_r") {
  CHECK(pearson_r(vec({1, 2, 3}), vec({2, 4, 6})) == doctest::Approx(1.0));
  CHECK(pearson_r(vec({1, 2, 3}), vec({3, 2, 1})) == doctest::Approx(-1.0));
  CHECK(pearson_r(vec({1, 2, 3, 4}), vec({1, 3, 2, 4})) == doctest::Approx(0.8));
  CHECK(std::isnan(pearson_r(vec({1, 1, 1}), vec({1, 2, 3}))));
  CHECK_THROWS_AS(pearson_r(vec({1, 2}), vec({1, 2})), Error);
  CHECK_THROWS_AS(pearson_r(vec({1, 2, 3}), vec({1, 2, 3, 4})), Error);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n;
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    Eigen::VectorXd a(60), b(60);
    for (Eigen::Index i = 0; i < 60; ++i) {
      a[i] = n(rng);
      b[i] = 0.5 * a[i] + n(rng);
    }
    const double r = pearson_r(a, b);
    CHECK(pearson_r(b, a) == doctest::Approx(r).epsilon(1e-14));
    CHECK(pearson_r(Eigen::VectorXd(3.0 * a.array() + 7.0), b) == doctest::Approx(r).epsilon(1e-12));
    CHECK(pearson_r(Eigen::VectorXd(-a), b) == doctest::Approx(-r).epsilon(1e-12));
    const auto loss = pearson_loss(ad::Tensor<double>::constant(a), b);
    worst = std::max(worst, std::abs(loss.item() - (1.0 - r)));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("median and summaries") {
  CHECK(median({3, 1, 2}) == 2.0);
  CHECK(median({4, 1, 3, 2}) == 2.5);
  CHECK(median({7}) == 7.0);
  CHECK_THROWS_AS(median({}), Error);

  const double nan = std::numeric_limits<double>::quiet_NaN();
  const std::vector<ScanResult> rs{result("a", 30, 0.1, 0), result("b", 31, 0.2, 0), result("c", 32, 0.9, 0),
                                   result("d", 33, 0.5, 1), result("e", 34, nan, 1)};
  const auto s = median_summary(rs);
  CHECK(s.excluded == 1);
  CHECK(s.n_scans == 4);
  CHECK(s.pooled == doctest::Approx(0.35));
  CHECK(s.per_fold.at(0) == doctest::Approx(0.2));
  CHECK(s.per_fold.at(1) == doctest::Approx(0.5));
  CHECK(s.median_of_fold_medians == doctest::Approx(0.35));
  CHECK_THROWS_AS(median_summary({result("a", 1, nan)}), Error);
}

TEST_CASE("age groups") {
  SUBCASE("nine subjects make three groups of three") {
    std::vector<ScanResult> rs;
    for (int i = 0; i < 9; ++i) rs.push_back(result("s" + std::to_string(i), 20 + i, 0.1 * i));
    const auto g = age_group_summary(rs, 3);
    REQUIRE(g.size() == 3);
    CHECK(g[0].age_min == 20);
    CHECK(g[0].age_max == 22);
    CHECK(g[1].age_min == 23);
    CHECK(g[2].age_max == 28);
    for (const auto& grp : g) CHECK(grp.n_subjects == 3);
    CHECK(g[1].median == doctest::Approx(0.4));
  }
  SUBCASE("identical ages split by subject id") {
    std::vector<ScanResult> rs;
    for (int i = 0; i < 7; ++i) rs.push_back(result("s" + std::to_string(i), 50, 0.5));
    const auto g = age_group_summary(rs, 3);
    CHECK(g[0].n_subjects + g[1].n_subjects + g[2].n_subjects == 7);
    for (const auto& grp : g) CHECK((grp.n_subjects == 2 || grp.n_subjects == 3));
  }
  SUBCASE("multiple scans of a subject stay in one group") {
    std::vector<ScanResult> rs;
    for (int i = 0; i < 6; ++i) {
      rs.push_back(result("s" + std::to_string(i), 20 + i, 0.5));
      rs.push_back(result("s" + std::to_string(i), 20 + i, 0.6));
    }
    const auto g = age_group_summary(rs, 3);
    for (const auto& grp : g) {
      CHECK(grp.n_subjects == 2);
      CHECK(grp.n_scans == 4);
    }
  }
  SUBCASE("age-independent correlations give similar group medians") {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> n(0.7, 0.1);
    std::uniform_real_distribution<double> age(36, 89);
    std::vector<ScanResult> rs;
    for (int i = 0; i < 120; ++i) rs.push_back(result("s" + std::to_string(i), age(rng), n(rng)));
    const auto g = age_group_summary(rs, 3);
    double lo = 1, hi = -1;
    for (const auto& grp : g) {
      CHECK(grp.n_subjects >= 30);
      lo = std::min(lo, grp.median);
      hi = std::max(hi, grp.median);
    }
    CHECK(hi - lo < 0.1);
  }
  CHECK_THROWS_AS(age_group_summary({result("a", 1, 0.1), result("b", 2, 0.2)}, 3), Error);
}

TEST_CASE("evaluate_scans") {
  SUBCASE("seq2one scores the cropped span") {
    auto scans = synth_scans(1, 5, 266, 2);
    Checkpoint ck;
    ck.model = tiny(Architecture::seq2one, 5);
    ck.model.window = 32;
    ck.params = store_params(init_params<double>(ck.model));
    std::vector<PredictionTrace> traces;
    const auto rs = evaluate_scans(ck, {&scans[0]}, 0, "", &traces);
    REQUIRE(traces.size() == 1);
    CHECK(traces[0].predicted.size() == 235);
    CHECK(traces[0].measured == scans[0].rv.segment(16, 235));
    CHECK(traces[0].t[0] == doctest::Approx(16 * scans[0].dt));
    CHECK(rs[0].r == doctest::Approx(pearson_r(traces[0].predicted, traces[0].measured)));
  }
  SUBCASE("a model reproducing the target scores r = 1") {
    auto scans = synth_scans(1, 4, 100, 3);
    scans[0].roi.col(0) = scans[0].rv;
    const Checkpoint ck = copy_column_checkpoint(4);
    const auto rs = evaluate_scans(ck, {&scans[0]}, 0, "");
    REQUIRE(rs.size() == 1);
    CHECK(rs[0].task == "RV");
    CHECK(rs[0].r >= 0.999);
  }
  SUBCASE("joint checkpoints report both targets") {
    auto scans = synth_scans(2, 4, 60, 3);
    Checkpoint ck;
    ck.model = tiny(Architecture::seq2seq, 4);
    ck.model.n_outputs = 2;
    ck.train.task = Task::joint;
    ck.params = store_params(init_params<double>(ck.model));
    const auto rs = evaluate_scans(ck, {&scans[0], &scans[1]}, 3, "");
    REQUIRE(rs.size() == 4);
    CHECK(rs[0].task == "RV");
    CHECK(rs[1].task == "HR");
    CHECK(rs[3].fold == 3);
  }
  SUBCASE("preprocessing hash must match") {
    auto scans = synth_scans(1, 4, 60, 3);
    Checkpoint ck = copy_column_checkpoint(4);
    ck.provenance.preprocessing_hash = "aaaa";
    CHECK_NOTHROW(evaluate_scans(ck, {&scans[0]}, 0, "aaaa"));
    try {
      evaluate_scans(ck, {&scans[0]}, 0, "bbbb");
      FAIL("expected a hash mismatch");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::hash_mismatch);
    }
  }
}

TEST_CASE("report output") {
  std::vector<ScanResult> rs;
  for (int i = 0; i < 6; ++i) rs.push_back(result("s" + std::to_string(i), 30 + i, 0.1 * i, i % 2));
  rs.push_back(result("s9", 50, std::numeric_limits<double>::quiet_NaN(), 1));
  const auto rep = build_report("scratch", "seq2seq", "abc", rs);
  const json doc = json::parse(report_json(rep));
  CHECK(doc["strategy"] == "scratch");
  CHECK(doc["tasks"]["RV"]["excluded_degenerate"] == 1);
  CHECK(doc["tasks"]["RV"]["age_groups"].size() == 3);
  CHECK(doc["scans"].back()["r"].is_null());
  CHECK(doc["tasks"]["RV"]["pooled_median"].get<double>() == doctest::Approx(0.25));

  TempDir dir("report");
  write_results_csv(rs, dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  CHECK(header == "scan_id,subject_id,age,fold,task,r");
  CHECK(first.rfind("s0_run-1,s0,30,0,RV,", 0) == 0);
}

TEST_CASE("strategies") {
  const int R = 5;
  Dataset source("src", synth_scans(8, R, 50, 11, 5.0, "src-"));
  Dataset target("tgt", synth_scans(9, R, 50, 12, 5.0, "tgt-"));
  const std::map<std::string, const Dataset*> data{{"src", &source}, {"tgt", &target}};
  StrategyOptions opt;
  opt.model = tiny(Architecture::seq2seq, R);
  opt.train.max_epochs = 2;
  opt.train.batch_size = 4;
  opt.train.folds = 3;
  opt.train.precision = Precision::f64;
  opt.train.val_fraction = 0.2;

  SUBCASE("a missing source is a usage error") {
    for (auto kind : {StrategyKind::pretrain_only, StrategyKind::joint_scratch, StrategyKind::finetune}) {
      try {
        run_strategy({kind, "", "tgt"}, data, opt);
        FAIL("expected a usage error");
      } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::usage);
      }
    }
    CHECK_THROWS_AS(run_strategy({StrategyKind::scratch, "", "nope"}, data, opt), Error);
  }
  SUBCASE("pretrain_only never trains or validates on the target") {
    const auto res = run_strategy({StrategyKind::pretrain_only, "src", "tgt"}, data, opt);
    CHECK(target.reads(Purpose::train) == 0);
    CHECK(target.reads(Purpose::validation) == 0);
    for (std::size_t i = 0; i < target.size(); ++i) CHECK(target.reads(i, Purpose::test) == 1);
    CHECK(source.reads(Purpose::test) == 0);
    REQUIRE(res.pretrain);
    for (const auto& f : res.folds) CHECK(f.outcome.checkpoint.param_hash() == res.pretrain->checkpoint.param_hash());
    CHECK(res.report.results.size() == target.size());
  }
  SUBCASE("finetune starts from the pretrained weights at the fine-tuning rate") {
    const auto res = run_strategy({StrategyKind::finetune, "src", "tgt"}, data, opt);
    REQUIRE(res.pretrain);
    const std::string pre = res.pretrain->checkpoint.param_hash();
    for (const auto& f : res.folds) {
      CHECK(f.outcome.checkpoint.provenance.initial_param_hash == pre);
      CHECK(f.outcome.checkpoint.provenance.initial_lr == 5e-5);
      CHECK(f.outcome.log.front().lr == 5e-5);
    }
    CHECK(res.pretrain->checkpoint.provenance.initial_lr == opt.train.lr_init);
  }
  SUBCASE("scratch keeps each fold's test subjects out of training") {
    const auto res = run_strategy({StrategyKind::scratch, "", "tgt"}, data, opt);
    CHECK_FALSE(res.pretrain);
    CHECK(source.reads(Purpose::train) + source.reads(Purpose::validation) + source.reads(Purpose::test) == 0);
    std::set<std::size_t> tested;
    for (const auto& f : res.folds) {
      std::set<std::string> test_subjects;
      for (auto i : f.test_indices) {
        test_subjects.insert(target.meta(i).subject_id);
        tested.insert(i);
      }
      for (auto i : f.train_indices) CHECK(test_subjects.count(target.meta(i).subject_id) == 0);
      CHECK(f.outcome.checkpoint.provenance.initial_lr == opt.train.lr_init);
    }
    CHECK(tested.size() == target.size());
    // Each target scan is used for training or validation in k - 1 folds.
    for (std::size_t i = 0; i < target.size(); ++i) {
      CHECK(target.reads(i, Purpose::train) + target.reads(i, Purpose::validation) == 2);
      CHECK(target.reads(i, Purpose::test) == 1);
    }
  }
  SUBCASE("joint_scratch pools the source into every fold") {
    const auto res = run_strategy({StrategyKind::joint_scratch, "src", "tgt"}, data, opt);
    for (std::size_t i = 0; i < source.size(); ++i) {
      CHECK(source.reads(i, Purpose::train) + source.reads(i, Purpose::validation) == 3);
    }
    CHECK(source.reads(Purpose::test) == 0);
    CHECK(res.folds.size() == 3);
  }
  SUBCASE("threaded folds match sequential ones") {
    const auto a = run_strategy({StrategyKind::scratch, "", "tgt"}, data, opt);
    opt.threads = 3;
    const auto b = run_strategy({StrategyKind::scratch, "", "tgt"}, data, opt);
    for (std::size_t f = 0; f < a.folds.size(); ++f) {
      CHECK(a.folds[f].outcome.checkpoint.param_hash() == b.folds[f].outcome.checkpoint.param_hash());
    }
  }
}
