#include "physio/strategy.hpp"

#include "physio/error.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <mutex>
#include <thread>

namespace physio {

std::string to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::pretrain_only:
      return "pretrain_only";
    case StrategyKind::scratch:
      return "scratch";
    case StrategyKind::joint_scratch:
      return "joint_scratch";
    case StrategyKind::finetune:
      return "finetune";
  }
  return "scratch";
}

StrategyKind strategy_from_string(const std::string& s) {
  if (s == "pretrain_only") return StrategyKind::pretrain_only;
  if (s == "scratch") return StrategyKind::scratch;
  if (s == "joint_scratch") return StrategyKind::joint_scratch;
  if (s == "finetune") return StrategyKind::finetune;
  fail(ErrorKind::usage,
       "unknown strategy '" + s + "' (expected pretrain_only, scratch, joint_scratch or finetune)");
}

void StrategySpec::validate() const {
  if (target.empty()) fail(ErrorKind::usage, "strategy " + to_string(kind) + " needs a target dataset");
  if (kind != StrategyKind::scratch && source.empty()) {
    fail(ErrorKind::usage, "strategy " + to_string(kind) + " needs a source dataset (--source)");
  }
}

Dataset::Dataset(std::string name, std::vector<Scan> scans, std::string preprocessing_hash,
                 std::string manifest_hash)
    : name_(std::move(name)),
      scans_(std::move(scans)),
      preprocessing_hash_(std::move(preprocessing_hash)),
      manifest_hash_(std::move(manifest_hash)),
      counts_(new std::atomic<std::size_t>[3 * std::max<std::size_t>(1, scans_.size())]) {
  for (std::size_t i = 0; i < 3 * std::max<std::size_t>(1, scans_.size()); ++i) counts_[i] = 0;
  if (scans_.empty()) fail("dataset '" + name_ + "' has no scans");
  for (const auto& s : scans_) {
    if (s.roi.cols() != scans_.front().roi.cols()) {
      fail("dataset '" + name_ + "': scan '" + s.scan_id + "' has " + std::to_string(s.roi.cols()) +
           " ROIs, expected " + std::to_string(scans_.front().roi.cols()));
    }
  }
}

Eigen::Index Dataset::n_roi() const { return scans_.front().roi.cols(); }

Dataset::Meta Dataset::meta(std::size_t i) const {
  const Scan& s = scans_.at(i);
  return {s.scan_id, s.subject_id, s.age};
}

const Scan& Dataset::read(std::size_t i, Purpose p) const {
  const Scan& s = scans_.at(i);
  counts_[3 * i + std::size_t(p)].fetch_add(1, std::memory_order_relaxed);
  return s;
}

std::size_t Dataset::reads(std::size_t i, Purpose p) const {
  if (i >= scans_.size()) fail("dataset '" + name_ + "': scan index out of range");
  return counts_[3 * i + std::size_t(p)].load();
}

std::size_t Dataset::reads(Purpose p) const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < scans_.size(); ++i) n += reads(i, p);
  return n;
}

int thread_cap_from_env(int fallback) {
  const char* v = std::getenv("PHYSIO_RECON_THREADS");
  if (!v) return fallback;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (end == v || *end != '\0' || n < 1) return fallback;
  return int(std::min<long>(n, 256));
}

namespace {

// A scan reference carrying the subject key used for splitting. Subject ids
// are qualified with the dataset name so pooled datasets cannot collide.
struct PoolItem {
  const Dataset* ds;
  std::size_t index;
  std::string subject_id;
  double age;
};

std::vector<PoolItem> pool_of(const Dataset& ds, const std::vector<std::size_t>& indices) {
  std::vector<PoolItem> out;
  for (std::size_t i : indices) {
    const auto m = ds.meta(i);
    out.push_back({&ds, i, ds.name() + "/" + m.subject_id, m.age});
  }
  return out;
}

std::vector<std::size_t> all_indices(const Dataset& ds) {
  std::vector<std::size_t> v(ds.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = i;
  return v;
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

TrainOutcome train_on_pool(const std::vector<PoolItem>& pool, const StrategyOptions& opt, const ModelConfig& model,
                           TrainConfig cfg, std::uint64_t seed, const Checkpoint* init, double lr,
                           Provenance prov) {
  auto [train_items, val_items] = select_validation(pool, cfg.val_fraction, seed);
  TrainRequest req;
  req.model = model;
  cfg.seed = seed;
  req.train = cfg;
  req.init = init;
  req.initial_lr = lr;
  for (const auto& it : train_items) req.train_scans.push_back(&it.ds->read(it.index, Purpose::train));
  for (const auto& it : val_items) req.val_scans.push_back(&it.ds->read(it.index, Purpose::validation));
  prov.seed = seed;
  prov.created_at = timestamp();
  req.provenance = prov;
  if (opt.log) {
    opt.log(prov.strategy + " [" + prov.dataset + "]: training on " + std::to_string(req.train_scans.size()) +
            " scans, validating on " + std::to_string(req.val_scans.size()));
  }
  return train_model(req);
}

std::vector<ScanResult> test_fold(const Checkpoint& ck, const Dataset& target, const std::vector<std::size_t>& idx,
                                  int fold) {
  std::vector<const Scan*> scans;
  for (std::size_t i : idx) scans.push_back(&target.read(i, Purpose::test));
  return evaluate_scans(ck, scans, fold, target.preprocessing_hash());
}

// Runs job(f) for f in [0, n) on up to `threads` workers; the first failure
// is rethrown after all workers finish.
void parallel_for(int n, int threads, const std::function<void(int)>& job) {
  threads = std::max(1, std::min(threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (int i = next++; i < n; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace

StrategyResult run_strategy(const StrategySpec& spec, const std::map<std::string, const Dataset*>& datasets,
                            const StrategyOptions& opt) {
  spec.validate();
  opt.train.validate();
  auto find = [&](const std::string& name) -> const Dataset& {
    const auto it = datasets.find(name);
    if (it == datasets.end() || !it->second) fail(ErrorKind::usage, "strategy: unknown dataset '" + name + "'");
    return *it->second;
  };
  const Dataset& target = find(spec.target);
  const Dataset* source = spec.kind == StrategyKind::scratch ? nullptr : &find(spec.source);
  if (source) {
    if (source->n_roi() != target.n_roi()) {
      fail("strategy: source has " + std::to_string(source->n_roi()) + " ROIs, target has " +
           std::to_string(target.n_roi()));
    }
    if (!source->preprocessing_hash().empty() && !target.preprocessing_hash().empty() &&
        source->preprocessing_hash() != target.preprocessing_hash()) {
      fail(ErrorKind::hash_mismatch, "strategy: source and target were preprocessed with different settings");
    }
  }

  ModelConfig model = opt.model;
  model.n_roi = int(target.n_roi());
  model.n_outputs = task_outputs(opt.train.task);
  model.validate();
  const TrainConfig& cfg = opt.train;

  Provenance base;
  base.strategy = to_string(spec.kind);
  base.preprocessing_hash = target.preprocessing_hash();

  StrategyResult result;
  if (spec.kind == StrategyKind::pretrain_only || spec.kind == StrategyKind::finetune) {
    Provenance p = base;
    p.dataset = source->name();
    p.train_manifest_hash = source->manifest_hash();
    result.pretrain = train_on_pool(pool_of(*source, all_indices(*source)), opt, model, cfg, cfg.seed, nullptr,
                                    cfg.lr_init, p);
  }

  std::vector<SubjectAge> subjects;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const auto m = target.meta(i);
    subjects.push_back({m.subject_id, m.age});
  }
  subjects = subjects_of(subjects);
  const FoldPlan plan = make_age_balanced_folds(subjects, cfg.folds, cfg.seed);

  result.folds.resize(std::size_t(cfg.folds));
  for (int f = 0; f < cfg.folds; ++f) {
    auto& run = result.folds[std::size_t(f)];
    run.fold = f;
    for (std::size_t i = 0; i < target.size(); ++i) {
      (plan.fold_of(target.meta(i).subject_id) == f ? run.test_indices : run.train_indices).push_back(i);
    }
  }

  auto fold_job = [&](int f) {
    FoldRun& run = result.folds[std::size_t(f)];
    const std::uint64_t seed = cfg.seed + 1000u * std::uint64_t(f + 1);
    Provenance p = base;
    p.dataset = target.name();
    p.train_manifest_hash = target.manifest_hash();
    switch (spec.kind) {
      case StrategyKind::pretrain_only:
        run.outcome = *result.pretrain;
        break;
      case StrategyKind::scratch:
        run.outcome = train_on_pool(pool_of(target, run.train_indices), opt, model, cfg, seed, nullptr, cfg.lr_init, p);
        break;
      case StrategyKind::joint_scratch: {
        auto pool = pool_of(*source, all_indices(*source));
        const auto own = pool_of(target, run.train_indices);
        pool.insert(pool.end(), own.begin(), own.end());
        p.dataset = source->name() + "+" + target.name();
        run.outcome = train_on_pool(pool, opt, model, cfg, seed, nullptr, cfg.lr_init, p);
        break;
      }
      case StrategyKind::finetune:
        run.outcome = train_on_pool(pool_of(target, run.train_indices), opt, model, cfg, seed,
                                    &result.pretrain->checkpoint, cfg.lr_finetune, p);
        break;
    }
    run.results = test_fold(run.outcome.checkpoint, target, run.test_indices, f);
  };
  parallel_for(cfg.folds, opt.threads, fold_job);

  std::vector<ScanResult> all;
  for (const auto& run : result.folds) all.insert(all.end(), run.results.begin(), run.results.end());
  result.report = build_report(to_string(spec.kind), to_string(model.architecture), target.preprocessing_hash(),
                               std::move(all));
  return result;
}

}  // namespace physio
