#include "ddae/records.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "json.hpp"

#include "ddae/error.hpp"

namespace ddae {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::pretrain: return "pretrain";
    case Phase::grid: return "grid";
    case Phase::probe: return "probe";
    case Phase::finetune: return "finetune";
    case Phase::metric: return "metric";
    case Phase::sample: return "sample";
  }
  return "metric";
}

Phase phase_from_string(const std::string& s) {
  for (Phase p : {Phase::pretrain, Phase::grid, Phase::probe, Phase::finetune, Phase::metric, Phase::sample})
    if (to_string(p) == s) return p;
  throw DataError("unknown record phase '" + s + "'");
}

std::string ExperimentRecord::to_json_line() const {
  nlohmann::json j = {{"run_id", run_id}, {"config_hash", config_hash}, {"phase", to_string(phase)},
                      {"key", key},       {"step", step},               {"value", value},
                      {"wall_time", wall_time}};
  return j.dump();
}

ExperimentRecord ExperimentRecord::from_json_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  ExperimentRecord r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.phase = phase_from_string(j.at("phase").get<std::string>());
  r.key = j.at("key").get<std::string>();
  r.step = j.at("step").get<long>();
  r.value = j.at("value").is_null() ? std::nan("") : j.at("value").get<double>();
  r.wall_time = j.value("wall_time", 0.0);
  return r;
}

bool ExperimentRecord::same_content(const ExperimentRecord& o) const {
  const bool both_nan = std::isnan(value) && std::isnan(o.value);
  return run_id == o.run_id && config_hash == o.config_hash && phase == o.phase && key == o.key && step == o.step &&
         (both_nan || value == o.value);
}

void RecordCollector::write(const ExperimentRecord& r) {
  std::lock_guard lk(mu_);
  rows_.push_back(r);
}

RecordFileWriter::RecordFileWriter(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  out_.open(path, std::ios::app);
  if (!out_) throw IoError("cannot open record file '" + path.string() + "'");
}

void RecordFileWriter::write(const ExperimentRecord& r) {
  std::lock_guard lk(mu_);
  out_ << r.to_json_line() << '\n';
  out_.flush();
  if (!out_) throw IoError("write failed for record file '" + path_.string() + "'");
}

RecordEmitter::RecordEmitter(RecordSink* sink, std::string run_id, std::string config_hash)
    : sink_(sink), run_id_(std::move(run_id)), config_hash_(std::move(config_hash)) {}

void RecordEmitter::emit(Phase phase, const std::string& key, long step, double value) const {
  if (!sink_) return;
  ExperimentRecord r;
  r.run_id = run_id_;
  r.config_hash = config_hash_;
  r.phase = phase;
  r.key = prefix_ + key;
  r.step = step;
  r.value = value;
  r.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  sink_->write(r);
}

RecordEmitter RecordEmitter::with_prefix(const std::string& key_prefix) const {
  RecordEmitter e = *this;
  e.prefix_ += key_prefix;
  return e;
}

std::vector<ExperimentRecord> read_records(const std::filesystem::path& path,
                                           const std::function<void(const std::string&)>& warn) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open record file '" + path.string() + "'");
  std::vector<std::string> lines;
  for (std::string line; std::getline(f, line);)
    if (!line.empty()) lines.push_back(line);
  std::vector<ExperimentRecord> out;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      out.push_back(ExperimentRecord::from_json_line(lines[i]));
    } catch (const std::exception& e) {
      if (i + 1 == lines.size()) {
        if (warn) warn(path.string() + ": skipping truncated final line " + std::to_string(i + 1));
        break;
      }
      throw DataError(path.string() + ": malformed record on line " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  return out;
}

bool RecordFilter::matches(const ExperimentRecord& r) const {
  if (phase && r.phase != *phase) return false;
  return key_prefix.empty() || r.key.rfind(key_prefix, 0) == 0;
}

std::vector<ExperimentRecord> select(const std::vector<ExperimentRecord>& rows, const RecordFilter& f) {
  std::vector<ExperimentRecord> out;
  for (const auto& r : rows)
    if (f.matches(r)) out.push_back(r);
  return out;
}

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string fmt_double(double v, int digits = 17) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

std::string records_to_csv(const std::vector<ExperimentRecord>& rows) {
  std::string out = "phase,key,step,value\n";
  for (const auto& r : rows)
    out += to_string(r.phase) + "," + csv_field(r.key) + "," + std::to_string(r.step) + "," + fmt_double(r.value) +
           "\n";
  return out;
}

std::vector<ExperimentRecord> records_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::vector<ExperimentRecord> out;
  if (!std::getline(in, line) || line != "phase,key,step,value") throw DataError("CSV header mismatch");
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw DataError("CSV line " + std::to_string(lineno) + " has " + std::to_string(f.size()) +
                                       " fields");
    ExperimentRecord r;
    r.phase = phase_from_string(f[0]);
    r.key = f[1];
    r.step = std::stol(f[2]);
    r.value = std::stod(f[3]);
    out.push_back(r);
  }
  return out;
}

std::string records_to_svg(const std::vector<ExperimentRecord>& rows, const std::string& title) {
  constexpr double W = 720, H = 420, L = 70, R = 180, T = 40, B = 50;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : rows) {
    if (!std::isfinite(r.value)) continue;
    series[r.key].emplace_back(static_cast<double>(r.step), r.value);
    xmin = std::min(xmin, static_cast<double>(r.step));
    xmax = std::max(xmax, static_cast<double>(r.step));
    ymin = std::min(ymin, r.value);
    ymax = std::max(ymax, r.value);
  }
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
     << ' ' << H << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\">" << xml_escape(title)
                         << "</text>\n";
  if (series.empty()) {
    os << "<text x=\"" << W / 2 << "\" y=\"" << H / 2
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\">no records selected</text>\n</svg>\n";
    return os.str();
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double yv = ymin + (ymax - ymin) * i / 4.0, xv = xmin + (xmax - xmin) * i / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_double(yv, 4) << "</text>\n";
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 16
       << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt_double(xv, 4)
       << "</text>\n";
  }
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  int idx = 0;
  for (auto& [key, pts] : series) {
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    const char* col = palette[idx % 10];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) os << fmt_double(px(x), 6) << ',' << fmt_double(py(y), 6) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * idx + 10 << "\" fill=\"" << col
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << xml_escape(key) << "</text>\n";
    ++idx;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace ddae
