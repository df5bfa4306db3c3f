#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "brewlab/analysis.hpp"
#include "brewlab/gradcheck.hpp"
#include "brewlab/package.hpp"

namespace brewlab {

/// Shortest decimal text that reads back to the same double.
std::string format_double(double v);

/// CSV file whose first lines echo the effective config as "# " comments.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::string& config_echo, const std::vector<std::string>& header);

  void row(const std::vector<std::string>& fields);
  /// Flushes and throws FormatError if any write failed.
  void close();

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t columns_;
};

/// One row per victim run plus a trailing "summary" row.
void write_eval_runs_csv(const std::string& path, const EvalReport& report, const std::string& label,
                         const std::string& config_echo);

/// Per-epoch alignment series of every run that recorded one.
void write_alignment_csv(const std::string& path, const EvalReport& report, const std::string& label,
                         const std::string& config_echo);

void write_trace_csv(const std::string& path, const TrainTrace& trace, const std::string& config_echo);

void write_dp_curve_csv(const std::string& path, const std::vector<DPPoint>& curve,
                        const std::string& config_echo);

void write_filter_csv(const std::string& path, const std::vector<std::pair<std::size_t, FilterReport>>& rows,
                      const std::string& config_echo);

void write_gradcheck_csv(const std::string& path, const std::vector<GradcheckEntry>& entries,
                         const std::string& config_echo);

/// Summary document: the config echo, brew losses per package, and the
/// headline numbers of each named report.
std::string summary_json(const std::string& config_echo, const std::vector<PoisonPackage>& packages,
                         const std::vector<std::pair<std::string, const EvalReport*>>& reports);

void write_text(const std::string& path, const std::string& text);

}  // namespace brewlab
