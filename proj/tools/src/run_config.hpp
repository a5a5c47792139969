#pragma once

#include "limcast/dataprep.hpp"
#include "limcast/experiment.hpp"
#include "limcast/hybrid.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace limcast::cli {

/// Layered run configuration: built-in defaults, then an optional JSON file,
/// then `section.key=value` overrides. The defaults double as the schema, so
/// unknown keys and type changes are rejected with ConfigError.
class RunConfig {
 public:
  RunConfig();

  static nlohmann::json defaults();

  void merge_file(const std::filesystem::path& path);
  void merge(const nlohmann::json& patch, const std::string& where = "config");
  /// `path` is dotted ("train.epochs"); `value` is parsed as JSON and falls
  /// back to a plain string.
  void set(const std::string& path, const std::string& value);

  const nlohmann::json& tree() const noexcept { return j_; }
  /// Pretty-printed resolved configuration.
  std::string dump() const;

  std::uint64_t seed() const;
  hybrid::TrainConfig train() const;
  experiment::RecordConfig record() const;
  experiment::SweepConfig sweep() const;
  dataprep::SplitSpec split() const;
  dataprep::Region region() const;
  std::vector<int> n_keep() const;

 private:
  nlohmann::json j_;
};

}  // namespace limcast::cli
