#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace ddae {

enum class Phase { pretrain, grid, probe, finetune, metric, sample };

std::string to_string(Phase p);
Phase phase_from_string(const std::string& s);

// One append-only JSON-lines row.
struct ExperimentRecord {
  std::string run_id;
  std::string config_hash;
  Phase phase = Phase::metric;
  std::string key;
  long step = 0;
  double value = 0.0;
  double wall_time = 0.0;  // seconds since the run started

  std::string to_json_line() const;
  static ExperimentRecord from_json_line(const std::string& line);
  // Equality ignoring wall_time, the only nondeterministic field.
  bool same_content(const ExperimentRecord& o) const;
};

class RecordSink {
 public:
  virtual ~RecordSink() = default;
  virtual void write(const ExperimentRecord& r) = 0;
};

// Keeps rows in memory.
class RecordCollector : public RecordSink {
 public:
  void write(const ExperimentRecord& r) override;
  const std::vector<ExperimentRecord>& rows() const noexcept { return rows_; }

 private:
  std::mutex mu_;
  std::vector<ExperimentRecord> rows_;
};

// Appends rows to a JSON-lines file, one writer per file, flushed per row.
class RecordFileWriter : public RecordSink {
 public:
  explicit RecordFileWriter(const std::filesystem::path& path);
  void write(const ExperimentRecord& r) override;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
  std::mutex mu_;
};

// Fans rows out to several sinks.
class RecordTee : public RecordSink {
 public:
  explicit RecordTee(std::vector<RecordSink*> sinks) : sinks_(std::move(sinks)) {}
  void write(const ExperimentRecord& r) override {
    for (auto* s : sinks_) s->write(r);
  }

 private:
  std::vector<RecordSink*> sinks_;
};

// Stamps run identity and wall time onto emitted values. A null sink drops rows.
class RecordEmitter {
 public:
  RecordEmitter() = default;
  RecordEmitter(RecordSink* sink, std::string run_id, std::string config_hash);
  void emit(Phase phase, const std::string& key, long step, double value) const;
  RecordEmitter with_prefix(const std::string& key_prefix) const;
  const std::string& run_id() const noexcept { return run_id_; }
  const std::string& config_hash() const noexcept { return config_hash_; }

 private:
  RecordSink* sink_ = nullptr;
  std::string run_id_;
  std::string config_hash_;
  std::string prefix_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// Reads a JSON-lines record file. A malformed final line (interrupted write)
// is skipped and reported through `warn`; malformed interior lines throw DataError.
std::vector<ExperimentRecord> read_records(const std::filesystem::path& path,
                                           const std::function<void(const std::string&)>& warn = {});

struct RecordFilter {
  std::optional<Phase> phase;
  std::string key_prefix;  // empty matches all keys
  bool matches(const ExperimentRecord& r) const;
};

std::vector<ExperimentRecord> select(const std::vector<ExperimentRecord>& rows, const RecordFilter& f);

// CSV with header "phase,key,step,value"; values written with 17 significant digits.
std::string records_to_csv(const std::vector<ExperimentRecord>& rows);
std::vector<ExperimentRecord> records_from_csv(const std::string& csv);
// Deterministic SVG line chart of value against step, one series per key.
std::string records_to_svg(const std::vector<ExperimentRecord>& rows, const std::string& title = "");

}  // namespace ddae
