#include "issnet/pathlog.hpp"

#include <map>
#include <sstream>

#include "issnet/errors.hpp"

namespace issnet {

PathLog::PathLog(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::trunc);
  if (!out_) throw NotFoundError("cannot write log " + path.string());
}

void PathLog::write(Json record) {
  Json line = {{"schema", kPathSchema}};
  line.update(record);
  out_ << line.dump() << '\n';
  out_.flush();
}

void PathLog::epoch(const PathRecord& record) {
  Json j = to_json(record);
  write(j);
}

void PathLog::error(const std::string& kind, const std::string& message) {
  write({{"type", "error"}, {"kind", kind}, {"message", message}});
}

Json to_json(const GrowEvent& e) {
  return {{"epoch", e.epoch}, {"layer", e.layer}, {"old_width", e.old_width}, {"new_width", e.new_width},
          {"capped", e.capped}};
}

Json to_json(const PathRecord& r) {
  Json layers = Json::array();
  for (const LayerPathStats& l : r.layers) {
    layers.push_back({{"name", l.name},
                      {"supp", l.support},
                      {"params", l.params},
                      {"groups", l.groups},
                      {"active_groups", l.active_groups},
                      {"w_norm", l.w_norm},
                      {"v_max_group_norm", l.v_max_group_norm},
                      {"w_group_norms", l.w_group_norms},
                      {"gamma_group_norms", l.gamma_group_norms}});
  }
  Json events = Json::array();
  for (const GrowEvent& e : r.events) events.push_back(to_json(e));
  return {{"type", "epoch"},   {"epoch", r.epoch},   {"loss", r.loss},
          {"metric", r.metric}, {"support_fraction", r.support_fraction()}, {"layers", layers},
          {"events", events}};
}

PathRecord path_record_from_json(const Json& j) {
  PathRecord r;
  r.epoch = j.at("epoch");
  r.loss = j.at("loss");
  r.metric = j.at("metric");
  for (const Json& l : j.at("layers")) {
    LayerPathStats s;
    s.name = l.at("name");
    s.support = l.at("supp");
    s.params = l.at("params");
    s.groups = l.at("groups");
    s.active_groups = l.at("active_groups");
    s.w_norm = l.at("w_norm");
    s.v_max_group_norm = l.at("v_max_group_norm");
    s.w_group_norms = l.at("w_group_norms").get<std::vector<double>>();
    s.gamma_group_norms = l.at("gamma_group_norms").get<std::vector<double>>();
    r.layers.push_back(std::move(s));
  }
  for (const Json& e : j.at("events"))
    r.events.push_back({e.at("epoch"), e.at("layer"), e.at("old_width"), e.at("new_width"), e.at("capped")});
  return r;
}

std::vector<Json> read_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw NotFoundError("log not found: " + path.string());
  std::vector<Json> out;
  std::string line;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    if (line.empty()) continue;
    Json j = Json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object())
      throw FormatError(path.string() + ":" + std::to_string(number) + ": not a JSON object");
    if (!j.contains("schema") || j["schema"] != kPathSchema)
      throw FormatError(path.string() + ":" + std::to_string(number) + ": missing or unknown schema tag");
    out.push_back(std::move(j));
  }
  return out;
}

std::vector<PathRecord> read_path(const std::filesystem::path& path) {
  std::vector<PathRecord> out;
  std::size_t number = 0;
  for (const Json& j : read_log(path)) {
    ++number;
    if (j.value("type", "") != "epoch") continue;
    try {
      out.push_back(path_record_from_json(j));
    } catch (const Json::exception& e) {
      throw FormatError(path.string() + ": record " + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string cell(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Columns in first-seen order with a lookup from key to position.
struct Columns {
  std::vector<std::string> names;
  std::map<std::string, std::size_t> index;
  std::size_t add(const std::string& n) {
    auto [it, inserted] = index.try_emplace(n, names.size());
    if (inserted) names.push_back(n);
    return it->second;
  }
};

void write_csv(const std::filesystem::path& file, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw NotFoundError("cannot write " + file.string());
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << (i < row.size() ? row[i] : "");
    out << '\n';
  }
}

}  // namespace

ExportSummary export_plot_data(const std::filesystem::path& log, const std::filesystem::path& out_dir) {
  const std::vector<PathRecord> path = read_path(log);
  std::filesystem::create_directories(out_dir);

  Columns norms, counts;
  norms.add("epoch");
  counts.add("epoch");
  for (const PathRecord& r : path) {
    for (const LayerPathStats& l : r.layers) {
      for (std::size_t g = 0; g < l.w_group_norms.size(); ++g) {
        norms.add(l.name + "/" + std::to_string(g) + "/w");
        norms.add(l.name + "/" + std::to_string(g) + "/gamma");
      }
      counts.add(l.name + "/supp");
      counts.add(l.name + "/active_groups");
    }
  }
  counts.add("total_supp");

  std::vector<std::vector<std::string>> norm_rows, acc_rows, count_rows;
  for (const PathRecord& r : path) {
    std::vector<std::string> nr(norms.names.size()), cr(counts.names.size());
    nr[0] = cr[0] = std::to_string(r.epoch);
    std::size_t total = 0;
    for (const LayerPathStats& l : r.layers) {
      for (std::size_t g = 0; g < l.w_group_norms.size(); ++g) {
        nr[norms.index.at(l.name + "/" + std::to_string(g) + "/w")] = cell(l.w_group_norms[g]);
        nr[norms.index.at(l.name + "/" + std::to_string(g) + "/gamma")] = cell(l.gamma_group_norms[g]);
      }
      cr[counts.index.at(l.name + "/supp")] = std::to_string(l.support);
      cr[counts.index.at(l.name + "/active_groups")] = std::to_string(l.active_groups);
      total += l.support;
    }
    cr[counts.index.at("total_supp")] = std::to_string(total);
    norm_rows.push_back(std::move(nr));
    count_rows.push_back(std::move(cr));
    acc_rows.push_back({std::to_string(r.epoch), cell(r.loss), cell(r.metric), cell(r.support_fraction())});
  }

  ExportSummary summary;
  summary.rows = path.size();
  summary.files = {out_dir / "paths.csv", out_dir / "sparsity_accuracy.csv", out_dir / "support_counts.csv"};
  write_csv(summary.files[0], norms.names, norm_rows);
  write_csv(summary.files[1], {"epoch", "loss", "metric", "support_fraction"}, acc_rows);
  write_csv(summary.files[2], counts.names, count_rows);
  return summary;
}

}  // namespace issnet
