#include "brewlab/report.hpp"

#include <charconv>
#include <sstream>

#include "brewlab/errors.hpp"
#include "json.hpp"

namespace brewlab {

namespace {

std::string opt(const std::optional<double>& v) { return v ? format_double(*v) : std::string(); }

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ";" : "") + std::to_string(v[i]);
  return s;
}

/// Replaces the characters a bare CSV field cannot hold.
std::string sanitize(std::string s) {
  for (auto& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
  }
  return s;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  return {buf, std::to_chars(buf, buf + sizeof buf, v).ptr};
}

CsvWriter::CsvWriter(const std::string& path, const std::string& config_echo,
                     const std::vector<std::string>& header)
    : path_(path), out_(path), columns_(header.size()) {
  if (!out_) throw FormatError(path + ": cannot open for writing");
  std::istringstream echo(config_echo);
  for (std::string line; std::getline(echo, line);) out_ << "# " << line << '\n';
  row(header);
}

void CsvWriter::row(const std::vector<std::string>& fields) {
  if (fields.size() != columns_) {
    throw FormatError(path_ + ": row has " + std::to_string(fields.size()) + " fields, header has " +
                      std::to_string(columns_));
  }
  for (const auto& f : fields) {
    if (f.find_first_of(",\n\"") != std::string::npos) throw FormatError(path_ + ": field needs quoting: " + f);
  }
  for (std::size_t i = 0; i < fields.size(); ++i) out_ << (i ? "," : "") << fields[i];
  out_ << '\n';
}

void CsvWriter::close() {
  out_.flush();
  if (!out_) throw FormatError(path_ + ": write failed");
  out_.close();
}

void write_eval_runs_csv(const std::string& path, const EvalReport& report, const std::string& label,
                         const std::string& config_echo) {
  CsvWriter csv(path, config_echo,
                {"label", "row", "case", "victim", "seed", "predictions", "success", "validation_accuracy",
                 "diverged", "error"});
  for (const auto& r : report.runs) {
    csv.row({label, "run", std::to_string(r.case_index), std::to_string(r.victim_index), std::to_string(r.seed),
             join_ints(r.predictions), format_double(r.success), format_double(r.validation_accuracy),
             r.diverged ? "1" : "0", sanitize(r.error)});
  }
  for (std::size_t c = 0; c < report.case_success.size(); ++c) {
    csv.row({label, "case", std::to_string(c), "", "", "", format_double(report.case_success[c]), "", "", ""});
  }
  csv.row({label, "summary", std::to_string(report.cases), std::to_string(report.victims), "",
           "se=" + format_double(report.standard_error), format_double(report.avg_success),
           format_double(report.mean_validation_accuracy), std::to_string(report.diverged_runs), ""});
  csv.close();
}

void write_alignment_csv(const std::string& path, const EvalReport& report, const std::string& label,
                         const std::string& config_echo) {
  CsvWriter csv(path, config_echo,
                {"label", "case", "victim", "epoch", "lr", "train_loss", "validation_accuracy",
                 "alignment_adversarial", "alignment_original"});
  for (const auto& r : report.runs) {
    for (const auto& e : r.epochs) {
      csv.row({label, std::to_string(r.case_index), std::to_string(r.victim_index), std::to_string(e.epoch),
               format_double(e.lr), format_double(e.train_loss), format_double(e.validation_accuracy),
               opt(e.alignment_adversarial), opt(e.alignment_original)});
    }
  }
  csv.close();
}

void write_trace_csv(const std::string& path, const TrainTrace& trace, const std::string& config_echo) {
  CsvWriter csv(path, config_echo,
                {"epoch", "lr", "train_loss", "validation_accuracy", "alignment_adversarial", "alignment_original"});
  for (const auto& e : trace.epochs) {
    csv.row({std::to_string(e.epoch), format_double(e.lr), format_double(e.train_loss),
             format_double(e.validation_accuracy), opt(e.alignment_adversarial), opt(e.alignment_original)});
  }
  csv.close();
}

void write_dp_curve_csv(const std::string& path, const std::vector<DPPoint>& curve,
                        const std::string& config_echo) {
  CsvWriter csv(path, config_echo,
                {"sigma", "avg_success", "standard_error", "validation_accuracy", "diverged_runs"});
  for (const auto& p : curve) {
    csv.row({format_double(p.sigma), format_double(p.report.avg_success), format_double(p.report.standard_error),
             format_double(p.report.mean_validation_accuracy), std::to_string(p.report.diverged_runs)});
  }
  csv.close();
}

void write_filter_csv(const std::string& path, const std::vector<std::pair<std::size_t, FilterReport>>& rows,
                      const std::string& config_echo) {
  CsvWriter csv(path, config_echo,
                {"case", "fraction", "poisons", "poison_class_clean", "poisons_removed", "clean_removed",
                 "total_removed", "random_poisons_removed", "random_clean_removed"});
  for (const auto& [c, f] : rows) {
    csv.row({std::to_string(c), format_double(f.fraction), std::to_string(f.poisons),
             std::to_string(f.poison_class_clean), std::to_string(f.poisons_removed),
             std::to_string(f.clean_removed), std::to_string(f.total_removed),
             format_double(f.random_poisons_removed), format_double(f.random_clean_removed)});
  }
  csv.close();
}

void write_gradcheck_csv(const std::string& path, const std::vector<GradcheckEntry>& entries,
                         const std::string& config_echo) {
  CsvWriter csv(path, config_echo, {"check", "points", "coordinates", "kinks", "max_rel_error", "passed"});
  for (const auto& e : entries) {
    csv.row({e.name, std::to_string(e.points), std::to_string(e.coordinates), std::to_string(e.kinks),
             format_double(e.max_rel_error), e.passed ? "1" : "0"});
  }
  csv.close();
}

std::string summary_json(const std::string& config_echo, const std::vector<PoisonPackage>& packages,
                         const std::vector<std::pair<std::string, const EvalReport*>>& reports) {
  using nlohmann::ordered_json;
  ordered_json doc;
  doc["config"] = config_echo;
  auto& brews = doc["packages"] = ordered_json::array();
  for (const auto& p : packages) {
    brews.push_back({{"case_seed", p.poison_case.seed},
                     {"target_class", p.poison_case.target_class},
                     {"adversarial_class", p.poison_case.adversarial_class},
                     {"poisons", p.poison_case.poison_count()},
                     {"epsilon_pixels", p.threat.epsilon_pixels},
                     {"chosen_restart", p.chosen},
                     {"initial_losses", p.initial_losses},
                     {"final_losses", p.final_losses}});
  }
  auto& out = doc["reports"] = ordered_json::object();
  for (const auto& [name, r] : reports) {
    ordered_json runs = ordered_json::array();
    for (const auto& v : r->runs) {
      runs.push_back({{"case", v.case_index},
                      {"victim", v.victim_index},
                      {"seed", v.seed},
                      {"predictions", v.predictions},
                      {"success", v.success},
                      {"validation_accuracy", v.validation_accuracy},
                      {"diverged", v.diverged}});
    }
    out[name] = {{"cases", r->cases},
                 {"victims", r->victims},
                 {"avg_success", r->avg_success},
                 {"standard_error", r->standard_error},
                 {"case_success", r->case_success},
                 {"mean_validation_accuracy", r->mean_validation_accuracy},
                 {"diverged_runs", r->diverged_runs},
                 {"runs", runs}};
  }
  return doc.dump(2) + "\n";
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  out.flush();
  if (!out) throw FormatError(path + ": write failed");
}

}  // namespace brewlab
