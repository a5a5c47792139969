#include "run_config.hpp"

#include "limcast/error.hpp"

#include <fstream>
#include <sstream>

namespace limcast::cli {

using nlohmann::json;

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return !(a.is_number_integer() && b.is_number_float());
  return a.type() == b.type();
}

void merge_into(json& base, const json& patch, const std::string& where) {
  if (!patch.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string path = where + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, path);
    } else if (!same_kind(slot, value)) {
      throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got " +
                        std::string(value.type_name()));
    } else {
      slot = value;
    }
  }
}

template <class T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config ") + section + "." + key + ": " + e.what());
  }
}

}  // namespace

RunConfig::RunConfig() : j_(defaults()) {}

json RunConfig::defaults() {
  const hybrid::TrainConfig t;
  json train = json::parse(t.to_json());
  train["model"] = "hybrid";
  train["seeds"] = 1;
  return json{
      {"seed", 0},
      {"threads", 1},
      {"data", {{"input", ""}}},
      {"prepare",
       {{"detrend", true},
        {"zscore", true},
        {"train_fraction", 0.75},
        {"val_fraction", 0.15},
        {"test_fraction", 0.10},
        {"n_keep", {6, 4}},
        {"n_total", 20}}},
      {"lim", {{"kind", "cyclostationary"}, {"tau0", 1}, {"clip_radius", 0.0}, {"include_tendency", true}}},
      {"train", train},
      {"forecast",
       {{"split", "test"}, {"init_begin", 0}, {"init_end", -1}, {"stride", 1}, {"members", 16}, {"horizon", 24}}},
      {"evaluate",
       {{"metrics", {"acc", "rmsess", "crpss"}},
        {"reference", "climatology"},
        {"leads", {1, 3, 6, 9, 12, 18, 24}},
        {"map_lead", 12},
        {"region", {-5.0, 5.0, 160.0, 210.0}},
        {"n_boot", 200},
        {"clim_members", 16}}},
      {"oic", {{"month", 4}, {"tau", 12}, {"bands", {{0.0, 10.0}, {90.0, 100.0}}}, {"all_months", true}}},
      {"composites",
       {{"lead", 12}, {"alpha", 0.05}, {"sign_paired", true}, {"band_lower", 90.0}, {"month", 4}, {"all_months", true}}},
      {"synth",
       {{"d", 10}, {"seasonal", true}, {"c_frac", 0.3}, {"system_seed", 101}, {"data_seed", 1}, {"years", 300}}},
      {"datasweep",
       {{"lengths", {50, 100, 300, 500, 1000, 1500}},
        {"n_seeds", 5},
        {"val_years", 100},
        {"test_years", 200},
        {"lead", 12},
        {"subset_seed", 0},
        {"cache_dir", ""}}},
  };
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json patch;
  try {
    patch = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  merge(patch, "config");
}

void RunConfig::merge(const json& patch, const std::string& where) {
  json next = j_;
  merge_into(next, patch, where);
  j_ = std::move(next);
}

void RunConfig::set(const std::string& path, const std::string& value) {
  if (path.empty()) throw ConfigError("empty override key");
  json v;
  try {
    v = json::parse(value);
  } catch (const json::exception&) {
    v = value;
  }
  json patch = v;
  std::vector<std::string> keys;
  std::stringstream ss(path);
  for (std::string k; std::getline(ss, k, '.');) keys.push_back(k);
  for (auto it = keys.rbegin(); it != keys.rend(); ++it) patch = json{{*it, patch}};
  merge(patch, "config");
}

std::string RunConfig::dump() const { return j_.dump(2) + "\n"; }

std::uint64_t RunConfig::seed() const { return j_.at("seed").get<std::uint64_t>(); }

hybrid::TrainConfig RunConfig::train() const {
  json t = j_.at("train");
  t.erase("model");
  t.erase("seeds");
  return hybrid::TrainConfig::from_json(t.dump());
}

experiment::RecordConfig RunConfig::record() const {
  experiment::RecordConfig r;
  r.d = get<int>(j_, "synth", "d");
  r.seasonal = get<bool>(j_, "synth", "seasonal");
  r.c_frac = get<double>(j_, "synth", "c_frac");
  r.system_seed = get<std::uint64_t>(j_, "synth", "system_seed");
  r.data_seed = get<std::uint64_t>(j_, "synth", "data_seed");
  r.years = get<int>(j_, "synth", "years");
  if (r.d < 2) throw ConfigError("synth.d must be >= 2");
  if (r.c_frac < 0.0) throw ConfigError("synth.c_frac must be >= 0");
  if (r.years < 2) throw ConfigError("synth.years must be >= 2");
  return r;
}

experiment::SweepConfig RunConfig::sweep() const {
  experiment::SweepConfig s;
  s.lengths = get<std::vector<int>>(j_, "datasweep", "lengths");
  s.n_seeds = get<int>(j_, "datasweep", "n_seeds");
  s.val_years = get<int>(j_, "datasweep", "val_years");
  s.test_years = get<int>(j_, "datasweep", "test_years");
  s.lead = get<int>(j_, "datasweep", "lead");
  s.subset_seed = get<std::uint64_t>(j_, "datasweep", "subset_seed");
  s.cache_dir = get<std::string>(j_, "datasweep", "cache_dir");
  s.record = record();
  s.train = train();
  return s;
}

dataprep::SplitSpec RunConfig::split() const {
  dataprep::SplitSpec s;
  s.train_fraction = get<double>(j_, "prepare", "train_fraction");
  s.val_fraction = get<double>(j_, "prepare", "val_fraction");
  s.test_fraction = get<double>(j_, "prepare", "test_fraction");
  return s;
}

dataprep::Region RunConfig::region() const {
  const auto r = get<std::vector<double>>(j_, "evaluate", "region");
  if (r.size() != 4) throw ConfigError("evaluate.region must be [lat_min, lat_max, lon_min, lon_max]");
  return {r[0], r[1], r[2], r[3]};
}

std::vector<int> RunConfig::n_keep() const { return get<std::vector<int>>(j_, "prepare", "n_keep"); }

}  // namespace limcast::cli
