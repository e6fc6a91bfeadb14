#pragma once

// Config / checkpoint / report serialization. JSON for structured documents
// (stable key order, round-trip-exact doubles), CSV for logs and reports.
// Report and log writes go through a temp file plus rename so failed runs
// never leave partial output.

#include <string>
#include <vector>

#include "tandem/bench.hpp"
#include "tandem/train.hpp"

namespace tandem {

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

std::string config_to_json(const Config& config);
Config config_from_json(const std::string& text);

std::string report_csv(std::span<const RunReport> rows);
std::string train_log_csv(std::span<const TrainLogRow> rows);
std::string trace_csv(std::span<const TraceRow> rows);

// Checkpoint directory layout: one model dump per checkpoint plus a manifest
// naming them, the selection outcome, and the distilled draft.
struct ManifestEntry {
  int batch = 0;
  std::string file;
  std::array<double, kNumBudgets> window_use{};
  std::array<double, kNumBudgets> lambda{};
};

struct Manifest {
  std::vector<ManifestEntry> checkpoints;
  int selected_index = -1;
  bool selection_flagged = false;
  double worst_violation = 0.0;
  std::array<double, kNumBudgets> measured_use{};
  double quality = 0.0;
  std::string selected_file;
  std::string draft_file;
};

std::string manifest_to_json(const Manifest& manifest);
Manifest manifest_from_json(const std::string& text);

}  // namespace tandem
