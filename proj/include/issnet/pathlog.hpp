#pragma once

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "issnet/config.hpp"
#include "issnet/diagnostics.hpp"

namespace issnet {

inline constexpr const char* kPathSchema = "issnet.path.v1";

/// Append-only JSON-lines writer. Every record is one complete line carrying
/// the schema tag and is flushed immediately, so the file stays valid up to
/// the last line after an abnormal exit.
class PathLog {
 public:
  explicit PathLog(const std::filesystem::path& path);

  void write(Json record);
  void epoch(const PathRecord& record);
  void error(const std::string& kind, const std::string& message);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

Json to_json(const GrowEvent& e);
Json to_json(const PathRecord& r);
PathRecord path_record_from_json(const Json& j);

/// Every record of a log; FormatError naming the line number on a malformed line.
std::vector<Json> read_log(const std::filesystem::path& path);
/// The epoch records only.
std::vector<PathRecord> read_path(const std::filesystem::path& path);

struct ExportSummary {
  std::vector<std::filesystem::path> files;
  std::size_t rows = 0;  // data rows per CSV (one per epoch record)
};

/// Writes into `out_dir`:
///   paths.csv            epoch, then "<layer>/<group>/w" and "<layer>/<group>/gamma" group norms
///   sparsity_accuracy.csv epoch,loss,metric,support_fraction
///   support_counts.csv   epoch, then "<layer>/supp" and "<layer>/active_groups", then total_supp
/// Columns are the union over the whole log in first-seen order; cells for
/// groups that do not exist yet (before growth) are empty.
ExportSummary export_plot_data(const std::filesystem::path& log, const std::filesystem::path& out_dir);

}  // namespace issnet
