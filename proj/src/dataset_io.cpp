#include "physio/dataset_io.hpp"

#include "physio/error.hpp"
#include "physio/hashing.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace physio {

using json = nlohmann::json;

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write " + path.string());
  out << bytes;
  if (!out) fail("write failed for " + path.string());
}

std::vector<std::string_view> split_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  for (auto& c : cells) {
    while (!c.empty() && (c.front() == ' ' || c.front() == '\t')) c.remove_prefix(1);
    while (!c.empty() && (c.back() == ' ' || c.back() == '\t' || c.back() == '\r')) c.remove_suffix(1);
  }
  return cells;
}

// JSON field access with the location in every message.
const json& field(const json& obj, const std::string& key, const std::string& where) {
  if (!obj.is_object() || !obj.contains(key)) fail("manifest: missing field " + where + "." + key);
  return obj.at(key);
}

std::string string_field(const json& obj, const std::string& key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) fail("manifest: " + where + "." + key + " must be a string");
  return v.get<std::string>();
}

double number_field(const json& obj, const std::string& key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_number()) fail("manifest: " + where + "." + key + " must be a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail("manifest: " + where + "." + key + " is not finite");
  return x;
}

fs::path optional_path(const json& obj, const std::string& key, const std::string& where,
                       const fs::path& base) {
  if (!obj.contains(key) || obj.at(key).is_null()) return {};
  const std::string s = string_field(obj, key, where);
  if (s.empty()) return {};
  const fs::path p(s);
  return p.is_absolute() ? p : base / p;
}

std::string relative_or_absolute(const fs::path& p, const fs::path& base) {
  if (p.empty()) return {};
  const fs::path abs = fs::absolute(p).lexically_normal();
  const auto rel = abs.lexically_relative(base.lexically_normal());
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return abs.generic_string();
}

void check_finite(const Eigen::Ref<const Eigen::VectorXd>& v, const std::string& what) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) fail(what + ": non-finite value at row " + std::to_string(i));
  }
}

SampledSeries condition(const SampledSeries& x, const PrepSettings& prep, const std::string& what) {
  try {
    return preprocess_chain(x, prep.filter, prep.target_dt);
  } catch (const Error& e) {
    fail(e.kind(), what + ": " + e.what());
  }
}

json settings_json(const PrepSettings& s) {
  return json{{"low_hz", exact_repr(s.filter.low_hz)},
              {"high_hz", exact_repr(s.filter.high_hz)},
              {"order", s.filter.order},
              {"target_dt", exact_repr(s.target_dt)},
              {"rv_window_s", exact_repr(s.rv_window_s)},
              {"hr_window_s", exact_repr(s.hr_window_s)},
              {"chain", "detrend,bandpass,resample_linear,znorm"}};
}

std::string source_hash(const ScanEntry& e, const Manifest& m) {
  Fnv1a h;
  h.update(m.tr_seconds);
  h.update(m.physio_hz);
  h.update(e.subject_id);
  h.update(e.age);
  for (const fs::path* p : {&e.roi_path, &e.rv_path, &e.hr_path, &e.resp_path, &e.beats_path}) {
    h.update(p->empty() ? std::string("-") : read_file(*p));
    h.update(std::string_view("|"));
  }
  return h.hex();
}

struct CacheFiles {
  fs::path roi, rv, hr, sidecar;
};

CacheFiles cache_files(const fs::path& dir, const std::string& id) {
  return {dir / (id + "_roi.csv"), dir / (id + "_rv.csv"), dir / (id + "_hr.csv"), dir / (id + ".json")};
}

std::string content_hash(const CacheFiles& f) {
  Fnv1a h;
  for (const fs::path* p : {&f.roi, &f.rv, &f.hr}) {
    h.update(read_file(*p));
    h.update(std::string_view("|"));
  }
  return h.hex();
}

}  // namespace

std::string PrepSettings::canonical() const { return settings_json(*this).dump(); }

std::string PrepSettings::hash() const { return hash_hex(canonical()); }

CsvTable read_csv(const fs::path& path) {
  const std::string text = read_file(path);
  CsvTable table;
  std::vector<double> values;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  Eigen::Index rows = 0;
  while (pos < text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string_view line(text.data() + pos, end - pos);
    pos = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;
    const auto cells = split_line(line);
    if (table.header.empty()) {
      for (auto c : cells) table.header.emplace_back(c);
      continue;
    }
    if (cells.size() != table.header.size()) {
      fail(path.string() + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
           " fields, header has " + std::to_string(table.header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cells[c].data(), cells[c].data() + cells[c].size(), v);
      if (ec != std::errc() || ptr != cells[c].data() + cells[c].size()) {
        fail(path.string() + ": line " + std::to_string(line_no) + ", column '" + table.header[c] +
             "': cannot parse '" + std::string(cells[c]) + "'");
      }
      if (!std::isfinite(v)) {
        fail(path.string() + ": line " + std::to_string(line_no) + ", column '" + table.header[c] +
             "': non-finite value");
      }
      values.push_back(v);
    }
    ++rows;
  }
  if (table.header.empty()) fail(path.string() + ": empty CSV");
  const auto cols = static_cast<Eigen::Index>(table.header.size());
  table.data = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
      values.data(), rows, cols);
  return table;
}

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const Eigen::Ref<const Eigen::MatrixXd>& data) {
  if (static_cast<Eigen::Index>(header.size()) != data.cols()) {
    fail("write_csv: header has " + std::to_string(header.size()) + " names for " +
         std::to_string(data.cols()) + " columns");
  }
  std::string out;
  for (std::size_t c = 0; c < header.size(); ++c) out += (c ? "," : "") + header[c];
  out += '\n';
  char buf[40];
  for (Eigen::Index r = 0; r < data.rows(); ++r) {
    for (Eigen::Index c = 0; c < data.cols(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", data(r, c));
      if (c) out += ',';
      out += buf;
    }
    out += '\n';
  }
  write_file(path, out);
}

Eigen::VectorXd read_series_csv(const fs::path& path) {
  const CsvTable t = read_csv(path);
  if (t.header.size() != 1) {
    fail(path.string() + ": expected a single column, found " + std::to_string(t.header.size()));
  }
  return t.data.col(0);
}

std::string file_hash(const fs::path& path) { return hash_hex(read_file(path)); }

Manifest load_manifest(const fs::path& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    fail("manifest " + path.string() + ": " + e.what());
  }
  const fs::path base = fs::absolute(path).parent_path();
  Manifest m;
  m.dataset_name = string_field(doc, "dataset_name", "$");
  m.tr_seconds = number_field(doc, "tr_seconds", "$");
  m.physio_hz = number_field(doc, "physio_hz", "$");
  if (!(m.tr_seconds > 0)) fail("manifest: $.tr_seconds must be positive");
  if (!(m.physio_hz > 0)) fail("manifest: $.physio_hz must be positive");
  if (doc.contains("preprocessing_hash")) m.preprocessing_hash = string_field(doc, "preprocessing_hash", "$");

  const json& scans = field(doc, "scans", "$");
  if (!scans.is_array()) fail("manifest: $.scans must be an array");
  std::set<std::string> ids;
  for (std::size_t i = 0; i < scans.size(); ++i) {
    const std::string where = "$.scans[" + std::to_string(i) + "]";
    const json& s = scans[i];
    ScanEntry e;
    e.scan_id = string_field(s, "scan_id", where);
    e.subject_id = string_field(s, "subject_id", where);
    e.age = number_field(s, "age", where);
    if (e.age < 0 || e.age > 130) fail("manifest: " + where + ".age out of range [0, 130]");
    const std::string roi = string_field(s, "roi_path", where);
    e.roi_path = fs::path(roi).is_absolute() ? fs::path(roi) : base / roi;
    e.rv_path = optional_path(s, "rv_path", where, base);
    e.hr_path = optional_path(s, "hr_path", where, base);
    e.resp_path = optional_path(s, "resp_path", where, base);
    e.beats_path = optional_path(s, "beats_path", where, base);
    if (!ids.insert(e.scan_id).second) fail("manifest: duplicate scan_id '" + e.scan_id + "' at " + where);
    m.scans.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  const fs::path base = fs::absolute(path).parent_path();
  json scans = json::array();
  for (const auto& e : m.scans) {
    json s{{"scan_id", e.scan_id},
           {"subject_id", e.subject_id},
           {"age", e.age},
           {"roi_path", relative_or_absolute(e.roi_path, base)}};
    const std::pair<const char*, const fs::path*> optional[] = {
        {"rv_path", &e.rv_path}, {"hr_path", &e.hr_path}, {"resp_path", &e.resp_path}, {"beats_path", &e.beats_path}};
    for (const auto& [key, p] : optional) {
      if (!p->empty()) s[key] = relative_or_absolute(*p, base);
    }
    scans.push_back(std::move(s));
  }
  json doc{{"dataset_name", m.dataset_name},
           {"tr_seconds", m.tr_seconds},
           {"physio_hz", m.physio_hz},
           {"scans", std::move(scans)}};
  if (!m.preprocessing_hash.empty()) doc["preprocessing_hash"] = m.preprocessing_hash;
  write_file(path, doc.dump(2) + "\n");
}

Scan load_scan(const ScanEntry& entry, const Manifest& manifest, const PrepSettings& prep) {
  const std::string tag = "scan '" + entry.scan_id + "'";
  Scan scan;
  scan.scan_id = entry.scan_id;
  scan.subject_id = entry.subject_id;
  scan.age = entry.age;
  scan.dt = prep.target_dt;

  if (!manifest.preprocessing_hash.empty()) {
    if (manifest.preprocessing_hash != prep.hash()) {
      fail(ErrorKind::hash_mismatch, tag + ": cached data was preprocessed with settings hash " +
                                         manifest.preprocessing_hash + ", current settings hash is " +
                                         prep.hash());
    }
    if (entry.rv_path.empty() || entry.hr_path.empty()) {
      fail(tag + ": preprocessed scans need rv_path and hr_path");
    }
    const CsvTable roi = read_csv(entry.roi_path);
    scan.roi = roi.data;
    scan.rv = read_series_csv(entry.rv_path);
    scan.hr = read_series_csv(entry.hr_path);
  } else {
    const CsvTable roi = read_csv(entry.roi_path);
    const double tr = manifest.tr_seconds;
    const Eigen::Index n_vol = roi.data.rows();
    if (n_vol < 2) fail(tag + ": ROI file has fewer than 2 rows");
    std::vector<Eigen::VectorXd> cols;
    for (Eigen::Index c = 0; c < roi.data.cols(); ++c) {
      const std::string what = tag + ", ROI column '" + roi.header[std::size_t(c)] + "'";
      cols.push_back(condition({roi.data.col(c), tr, 0.0}, prep, what).values);
    }

    const TrGrid grid{tr, n_vol};
    SampledSeries rv_raw;
    if (!entry.rv_path.empty()) {
      rv_raw = {read_series_csv(entry.rv_path), tr, 0.0};
    } else if (!entry.resp_path.empty()) {
      const SampledSeries resp{read_series_csv(entry.resp_path), 1.0 / manifest.physio_hz, 0.0};
      try {
        rv_raw = compute_rv(resp, grid, prep.rv_window_s);
      } catch (const Error& e) {
        fail(e.kind(), tag + ", RV: [compute_rv] " + e.what());
      }
    } else {
      fail(tag + ": no RV source (rv_path or resp_path)");
    }
    SampledSeries hr_raw;
    if (!entry.hr_path.empty()) {
      hr_raw = {read_series_csv(entry.hr_path), tr, 0.0};
    } else if (!entry.beats_path.empty()) {
      const Eigen::VectorXd t = read_series_csv(entry.beats_path);
      BeatTrain beats{std::vector<double>(t.data(), t.data() + t.size())};
      try {
        hr_raw = compute_hr(beats, grid, prep.hr_window_s);
      } catch (const Error& e) {
        fail(e.kind(), tag + ", HR: [compute_hr] " + e.what());
      }
    } else {
      fail(tag + ": no HR source (hr_path or beats_path)");
    }
    scan.rv = condition(rv_raw, prep, tag + ", RV").values;
    scan.hr = condition(hr_raw, prep, tag + ", HR").values;

    Eigen::Index len = cols.empty() ? 0 : cols.front().size();
    for (const auto& c : cols) len = std::min(len, c.size());
    scan.roi.resize(len, static_cast<Eigen::Index>(cols.size()));
    for (std::size_t c = 0; c < cols.size(); ++c) scan.roi.col(Eigen::Index(c)) = cols[c].head(len);
  }

  // Common grid truncation.
  const Eigen::Index len = std::min({scan.roi.rows(), scan.rv.size(), scan.hr.size()});
  if (len < 3) fail(tag + ": fewer than 3 samples after preprocessing");
  scan.roi.conservativeResize(len, Eigen::NoChange);
  scan.rv.conservativeResize(len);
  scan.hr.conservativeResize(len);
  if (scan.roi.cols() == 0) fail(tag + ": ROI file has no columns");
  for (Eigen::Index c = 0; c < scan.roi.cols(); ++c) check_finite(scan.roi.col(c), tag + ", ROI column " + std::to_string(c));
  check_finite(scan.rv, tag + ", RV");
  check_finite(scan.hr, tag + ", HR");
  return scan;
}

std::vector<Scan> load_all_scans(const Manifest& manifest, const PrepSettings& prep) {
  std::vector<Scan> out;
  out.reserve(manifest.scans.size());
  for (const auto& e : manifest.scans) out.push_back(load_scan(e, manifest, prep));
  return out;
}

std::vector<PreprocessOutcome> preprocess_dataset(const Manifest& manifest, const PrepSettings& prep,
                                                  const fs::path& out_dir, bool keep_going) {
  if (!manifest.preprocessing_hash.empty()) {
    fail("preprocess: manifest '" + manifest.dataset_name + "' is already preprocessed");
  }
  fs::create_directories(out_dir);
  const std::string settings_hash = prep.hash();
  Manifest out;
  out.dataset_name = manifest.dataset_name;
  out.tr_seconds = prep.target_dt;
  out.physio_hz = manifest.physio_hz;
  out.preprocessing_hash = settings_hash;

  std::vector<PreprocessOutcome> outcomes;
  for (const auto& e : manifest.scans) {
    PreprocessOutcome o{e.scan_id, false, {}};
    const CacheFiles files = cache_files(out_dir, e.scan_id);
    try {
      const std::string src = source_hash(e, manifest);
      bool fresh = false;
      if (fs::exists(files.sidecar)) {
        try {
          const json side = json::parse(read_file(files.sidecar));
          fresh = side.value("settings_hash", "") == settings_hash && side.value("source_hash", "") == src &&
                  side.value("content_hash", "") == content_hash(files);
        } catch (const std::exception&) {
          fresh = false;
        }
      }
      if (!fresh) {
        const Scan s = load_scan(e, manifest, prep);
        const CsvTable header_src = read_csv(e.roi_path);
        write_csv(files.roi, header_src.header, s.roi);
        write_csv(files.rv, {"rv"}, s.rv);
        write_csv(files.hr, {"hr"}, s.hr);
        const json side{{"scan_id", e.scan_id},
                        {"settings", settings_json(prep)},
                        {"settings_hash", settings_hash},
                        {"source_hash", src},
                        {"content_hash", content_hash(files)}};
        write_file(files.sidecar, side.dump(2) + "\n");
      }
      o.skipped = fresh;
      ScanEntry entry{e.scan_id, e.subject_id, e.age, files.roi, files.rv, files.hr, {}, {}};
      out.scans.push_back(std::move(entry));
    } catch (const Error& err) {
      if (!keep_going) throw;
      o.error = err.what();
    }
    outcomes.push_back(std::move(o));
  }
  save_manifest(out, out_dir / "manifest.json");
  return outcomes;
}

int FoldPlan::fold_of(const std::string& subject_id) const {
  const auto it = assignment.find(subject_id);
  if (it == assignment.end()) fail("fold plan: unknown subject '" + subject_id + "'");
  return it->second;
}

FoldPlan make_age_balanced_folds(std::vector<SubjectAge> subjects, int k, std::uint64_t seed) {
  if (k < 2) fail(ErrorKind::usage, "folds: k must be at least 2, got " + std::to_string(k));
  std::sort(subjects.begin(), subjects.end(),
            [](const SubjectAge& a, const SubjectAge& b) { return a.subject_id < b.subject_id; });
  const auto dup = std::adjacent_find(subjects.begin(), subjects.end(), [](const auto& a, const auto& b) {
    return a.subject_id == b.subject_id;
  });
  if (dup != subjects.end()) fail("folds: subject '" + dup->subject_id + "' listed twice");
  if (static_cast<int>(subjects.size()) < k) {
    fail("folds: " + std::to_string(subjects.size()) + " subjects cannot fill " + std::to_string(k) + " folds");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(subjects.begin(), subjects.end(), rng);
  std::stable_sort(subjects.begin(), subjects.end(),
                   [](const SubjectAge& a, const SubjectAge& b) { return a.age < b.age; });
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const int round = static_cast<int>(i) / k;
    const int pos = static_cast<int>(i) % k;
    plan.assignment[subjects[i].subject_id] = round % 2 == 0 ? pos : k - 1 - pos;
  }
  return plan;
}

void require_valid_fraction(double frac) {
  if (!(frac > 0.0 && frac < 1.0)) fail(ErrorKind::usage, "validation fraction must lie in (0, 1)");
}

void fail_validation_split(std::size_t n_items, std::size_t n_subjects, double frac) {
  fail("validation split: cannot carve a non-empty fraction " + std::to_string(frac) + " from " +
       std::to_string(n_items) + " scans of " + std::to_string(n_subjects) +
       " subjects while leaving training scans");
}

}  // namespace physio
