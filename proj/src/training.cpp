#include "physio/training.hpp"

#include "physio/config_io.hpp"
#include "physio/error.hpp"
#include "physio/hashing.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace physio {

std::string to_string(Task t) {
  switch (t) {
    case Task::rv:
      return "rv";
    case Task::hr:
      return "hr";
    case Task::joint:
      return "joint";
  }
  return "rv";
}

Task task_from_string(const std::string& s) {
  if (s == "rv" || s == "RV") return Task::rv;
  if (s == "hr" || s == "HR") return Task::hr;
  if (s == "joint") return Task::joint;
  fail(ErrorKind::usage, "unknown task '" + s + "' (expected rv, hr or joint)");
}

int task_outputs(Task t) { return t == Task::joint ? 2 : 1; }

Eigen::MatrixXd target_matrix(const Scan& scan, Task task) {
  Eigen::MatrixXd y(scan.length(), task_outputs(task));
  switch (task) {
    case Task::rv:
      y.col(0) = scan.rv;
      break;
    case Task::hr:
      y.col(0) = scan.hr;
      break;
    case Task::joint:
      y.col(0) = scan.rv;
      y.col(1) = scan.hr;
      break;
  }
  return y;
}

void TrainConfig::validate() const {
  auto usage = [](const std::string& m) { fail(ErrorKind::usage, "train config: " + m); };
  if (batch_size < 1) usage("batch_size must be positive");
  if (!(lr_init > 0) || !(lr_finetune > 0)) usage("learning rates must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) usage("lr_decay must lie in (0, 1]");
  if (lr_patience < 1 || early_stop_patience < 1) usage("patience values must be positive");
  if (!(improvement_threshold >= 0)) usage("improvement_threshold must be non-negative");
  if (max_epochs < 0) usage("max_epochs must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) usage("betas must lie in [0, 1)");
  if (!(epsilon > 0)) usage("epsilon must be positive");
  if (!(val_fraction > 0 && val_fraction < 1)) usage("val_fraction must lie in (0, 1)");
  if (folds < 2) usage("folds must be at least 2");
}

double PlateauScheduler::step(double val_loss) {
  if (val_loss < best - threshold) {
    best = val_loss;
    bad_epochs = 0;
  } else if (++bad_epochs > patience) {
    lr *= factor;
    bad_epochs = 0;
  }
  return lr;
}

bool EarlyStopping::update(double val_loss, int epoch) {
  if (val_loss < best - threshold) {
    best = val_loss;
    best_epoch = epoch;
    bad_epochs = 0;
    return false;
  }
  return ++bad_epochs >= patience;
}

// ---------------------------------------------------------------------------
// Checkpoint container:
//   8 bytes  magic "PHYSCKPT"
//   8 bytes  little-endian header length
//   header   JSON (configs, provenance, tensor table with byte offsets)
//   payload  little-endian float32 blocks, row-major

namespace {

constexpr char kMagic[8] = {'P', 'H', 'Y', 'S', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void hash_tensor_map(Fnv1a& h, const std::map<std::string, StoredMatrix>& m) {
  for (const auto& [name, t] : m) {
    h.update(name);
    h.update(double(t.rows()));
    h.update(double(t.cols()));
    h.update(std::as_bytes(std::span(t.data(), std::size_t(t.size()))));
  }
}

json provenance_json(const Provenance& p) {
  return json{{"strategy", p.strategy},
              {"dataset", p.dataset},
              {"seed", p.seed},
              {"epochs_run", p.epochs_run},
              {"best_epoch", p.best_epoch},
              {"final_val_loss", std::isfinite(p.final_val_loss) ? json(p.final_val_loss) : json(nullptr)},
              {"initial_lr", p.initial_lr},
              {"initial_param_hash", p.initial_param_hash},
              {"train_manifest_hash", p.train_manifest_hash},
              {"preprocessing_hash", p.preprocessing_hash},
              {"created_at", p.created_at}};
}

Provenance provenance_from_json(const json& j) {
  Provenance p;
  p.strategy = j.value("strategy", "");
  p.dataset = j.value("dataset", "");
  p.seed = j.value("seed", std::uint64_t{0});
  p.epochs_run = j.value("epochs_run", 0);
  p.best_epoch = j.value("best_epoch", 0);
  p.final_val_loss = j.contains("final_val_loss") && j["final_val_loss"].is_number()
                         ? j["final_val_loss"].get<double>()
                         : std::numeric_limits<double>::quiet_NaN();
  p.initial_lr = j.value("initial_lr", 0.0);
  p.initial_param_hash = j.value("initial_param_hash", "");
  p.train_manifest_hash = j.value("train_manifest_hash", "");
  p.preprocessing_hash = j.value("preprocessing_hash", "");
  p.created_at = j.value("created_at", "");
  return p;
}

void append_table(json& table, std::string& payload, const std::map<std::string, StoredMatrix>& m) {
  for (const auto& [name, t] : m) {
    table.push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}, {"offset", payload.size()}});
    payload.append(reinterpret_cast<const char*>(t.data()), std::size_t(t.size()) * sizeof(float));
  }
}

std::map<std::string, StoredMatrix> read_table(const json& table, const std::string& payload,
                                               const std::string& what) {
  std::map<std::string, StoredMatrix> out;
  for (const auto& e : table) {
    const std::string name = e.at("name").get<std::string>();
    const auto rows = e.at("rows").get<Eigen::Index>();
    const auto cols = e.at("cols").get<Eigen::Index>();
    const auto offset = e.at("offset").get<std::size_t>();
    if (rows < 0 || cols < 0) fail("checkpoint: negative shape for " + what + " '" + name + "'");
    const std::size_t bytes = std::size_t(rows * cols) * sizeof(float);
    if (offset > payload.size() || bytes > payload.size() - offset) {
      fail("checkpoint: " + what + " '" + name + "' extends past the end of the file");
    }
    StoredMatrix m(rows, cols);
    std::memcpy(m.data(), payload.data() + offset, bytes);
    if (!out.emplace(name, std::move(m)).second) fail("checkpoint: duplicate " + what + " '" + name + "'");
  }
  return out;
}

}  // namespace

std::string Checkpoint::param_hash() const {
  Fnv1a h;
  hash_tensor_map(h, params);
  return h.hex();
}

void save_checkpoint(const Checkpoint& ck, const fs::path& path) {
  std::string payload;
  json tensors = json::array();
  append_table(tensors, payload, ck.params);
  json header{{"format", "physio-recon checkpoint"},
              {"version", 1},
              {"model", to_json(ck.model)},
              {"train", to_json(ck.train)},
              {"provenance", provenance_json(ck.provenance)},
              {"param_hash", ck.param_hash()},
              {"tensors", tensors}};
  if (ck.optimizer) {
    json m = json::array(), v = json::array();
    append_table(m, payload, ck.optimizer->m);
    append_table(v, payload, ck.optimizer->v);
    header["optimizer"] = {{"t", ck.optimizer->t}, {"m", m}, {"v", v}};
  }
  header["payload_hash"] = hash_hex(payload);
  const std::string head = header.dump();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write checkpoint " + path.string());
  const std::uint64_t len = head.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(head.data(), std::streamsize(head.size()));
  out.write(payload.data(), std::streamsize(payload.size()));
  if (!out) fail("write failed for checkpoint " + path.string());
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    fail(path.string() + " is not a checkpoint file");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof len);
  if (len > bytes.size() - 16) fail("checkpoint " + path.string() + ": truncated header");
  const std::string payload = bytes.substr(16 + len);
  try {
    const json header = json::parse(bytes.substr(16, len));
    if (header.contains("payload_hash") && header["payload_hash"].get<std::string>() != hash_hex(payload)) {
      fail("checkpoint " + path.string() + ": tensor data is corrupt (payload hash mismatch)");
    }
    Checkpoint ck;
    ck.model = model_config_from_json(header.at("model"), ModelConfig{});
    ck.train = train_config_from_json(header.at("train"));
    ck.provenance = provenance_from_json(header.at("provenance"));
    ck.params = read_table(header.at("tensors"), payload, "tensor");
    if (header.contains("optimizer")) {
      Checkpoint::Optimizer opt;
      opt.t = header["optimizer"].at("t").get<long>();
      opt.m = read_table(header["optimizer"].at("m"), payload, "first moment");
      opt.v = read_table(header["optimizer"].at("v"), payload, "second moment");
      ck.optimizer = std::move(opt);
    }
    if (header.value("param_hash", "") != ck.param_hash()) {
      fail("checkpoint " + path.string() + ": parameter bytes do not match the recorded hash");
    }
    // Shape validation against the configured architecture.
    (void)load_params<float>(ck);
    return ck;
  } catch (const json::exception& e) {
    fail("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

template <typename Scalar>
ad::Tensor<Scalar> column(const ad::Tensor<Scalar>& x, Eigen::Index c) {
  if (x.cols() == 1) return x;
  ad::Matrix<Scalar> pick = ad::Matrix<Scalar>::Zero(x.cols(), 1);
  pick(c, 0) = Scalar(1);
  return ad::matmul(x, ad::Tensor<Scalar>::constant(std::move(pick)));
}

/// Mean over output columns of the per-scan loss.
template <typename Scalar>
ad::Tensor<Scalar> scan_loss(const WindowModel<Scalar>& model, const ad::Matrix<Scalar>& roi,
                             const Eigen::MatrixXd& targets, bool training, Rng& rng, LossDiagnostics* diag) {
  const ad::Tensor<Scalar> pred = model.forward(roi, training, rng);
  const Eigen::Index offset = model.prediction_offset();
  std::vector<ad::Tensor<Scalar>> parts;
  for (Eigen::Index c = 0; c < targets.cols(); ++c) {
    parts.push_back(pearson_loss(column(pred, c), targets.col(c).segment(offset, pred.rows()), diag));
  }
  if (parts.size() == 1) return parts.front();
  return ad::scale(ad::sum(ad::concat(std::span<const ad::Tensor<Scalar>>(parts), 0)),
                   Scalar(1.0 / double(parts.size())));
}

struct PreparedScan {
  const Scan* scan;
  Eigen::MatrixXd targets;
};

template <typename Scalar>
double evaluate_loss(const WindowModel<Scalar>& model, const std::vector<PreparedScan>& scans,
                     std::vector<ad::Matrix<Scalar>>& rois, LossDiagnostics* diag) {
  Rng rng(0);
  double total = 0;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    total += double(scan_loss(model, rois[i], scans[i].targets, false, rng, diag).item());
  }
  return total / double(scans.size());
}

template <typename Scalar>
TrainOutcome train_impl(const TrainRequest& req) {
  const TrainConfig& cfg = req.train;
  if (req.train_scans.empty()) fail("train: no training scans");
  if (req.val_scans.empty()) fail("train: no validation scans");
  if (req.model.n_outputs != task_outputs(cfg.task)) {
    fail(ErrorKind::usage, "train: model has " + std::to_string(req.model.n_outputs) + " outputs, task " +
                               to_string(cfg.task) + " needs " + std::to_string(task_outputs(cfg.task)));
  }

  WindowModel<Scalar> model(req.model);
  if (req.init) model.params() = load_params<Scalar>(*req.init);

  auto prepare = [&](const std::vector<const Scan*>& src, std::vector<ad::Matrix<Scalar>>& rois) {
    std::vector<PreparedScan> out;
    for (const Scan* s : src) {
      if (s->roi.cols() != req.model.n_roi) {
        fail("train: scan '" + s->scan_id + "' has " + std::to_string(s->roi.cols()) + " ROIs, model expects " +
             std::to_string(req.model.n_roi));
      }
      out.push_back({s, target_matrix(*s, cfg.task)});
      rois.push_back(s->roi.template cast<Scalar>());
    }
    return out;
  };
  std::vector<ad::Matrix<Scalar>> train_rois, val_rois;
  const auto train = prepare(req.train_scans, train_rois);
  const auto val = prepare(req.val_scans, val_rois);

  const double lr0 = req.initial_lr > 0 ? req.initial_lr : cfg.lr_init;
  PlateauScheduler sched{lr0, cfg.lr_decay, cfg.lr_patience, cfg.improvement_threshold};
  EarlyStopping stop{cfg.early_stop_patience, cfg.improvement_threshold};
  AdamState<Scalar> adam;
  Rng shuffle_rng(cfg.seed);
  Rng dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ull);

  TrainOutcome out;
  out.checkpoint.model = req.model;
  out.checkpoint.train = cfg;
  out.checkpoint.provenance = req.provenance;
  out.checkpoint.provenance.initial_lr = lr0;
  out.checkpoint.params = store_params(model.params());
  out.checkpoint.provenance.initial_param_hash = out.checkpoint.param_hash();

  LossDiagnostics diag;
  double lr = lr0;
  const double train0 = evaluate_loss(model, train, train_rois, &diag);
  const double val0 = evaluate_loss(model, val, val_rois, &diag);
  out.log.push_back({0, train0, val0, lr});
  stop.update(val0, 0);
  lr = sched.step(val0);
  out.checkpoint.provenance.final_val_loss = val0;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0;
    int batch_no = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += std::size_t(cfg.batch_size), ++batch_no) {
      const std::size_t b1 = std::min(order.size(), b0 + std::size_t(cfg.batch_size));
      for (auto& [name, p] : model.params()) p.zero_grad();
      const Scalar inv = Scalar(1.0 / double(b1 - b0));
      for (std::size_t i = b0; i < b1; ++i) {
        const std::size_t k = order[i];
        const auto loss = scan_loss(model, train_rois[k], train[k].targets, true, dropout_rng, &diag);
        const double value = double(loss.item());
        if (!std::isfinite(value)) {
          fail(ErrorKind::numeric, "train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(batch_no) + " (scan '" + train[k].scan->scan_id + "')");
        }
        epoch_loss += value;
        ad::backward(ad::scale(loss, inv));
      }
      try {
        adam_step(model.params(), adam, lr, cfg);
      } catch (const Error& e) {
        fail(e.kind(), std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch_no));
      }
    }
    const double train_loss = epoch_loss / double(train.size());
    const double val_loss = evaluate_loss(model, val, val_rois, &diag);
    if (!std::isfinite(val_loss)) {
      fail(ErrorKind::numeric, "train: non-finite validation loss at epoch " + std::to_string(epoch));
    }
    out.log.push_back({epoch, train_loss, val_loss, lr});
    const bool halt = stop.update(val_loss, epoch);
    if (stop.improved()) {
      out.checkpoint.params = store_params(model.params());
      out.checkpoint.optimizer = Checkpoint::Optimizer{adam.t, store_matrices(adam.m), store_matrices(adam.v)};
      out.checkpoint.provenance.final_val_loss = val_loss;
    }
    out.checkpoint.provenance.epochs_run = epoch;
    if (halt) break;
    lr = sched.step(val_loss);
  }
  out.checkpoint.provenance.best_epoch = stop.best_epoch;
  out.degenerate_predictions = diag.degenerate_predictions;
  return out;
}

}  // namespace

TrainOutcome train_model(const TrainRequest& req) {
  req.model.validate();
  req.train.validate();
  return req.train.precision == Precision::f32 ? train_impl<float>(req) : train_impl<double>(req);
}

double mean_loss(const Checkpoint& ck, const std::vector<const Scan*>& scans, Task task) {
  if (scans.empty()) fail("mean_loss: no scans");
  WindowModel<double> model(ck.model, load_params<double>(ck));
  std::vector<PreparedScan> prepared;
  std::vector<ad::Matrix<double>> rois;
  for (const Scan* s : scans) {
    prepared.push_back({s, target_matrix(*s, task)});
    rois.push_back(s->roi);
  }
  return evaluate_loss(model, prepared, rois, nullptr);
}

void write_epoch_log(const std::vector<EpochRecord>& log, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,lr\n";
  char buf[128];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.val_loss, r.lr);
    out << buf;
  }
}

}  // namespace physio
