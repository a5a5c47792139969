#include "limcast/experiment.hpp"

#include "limcast/binary_io.hpp"
#include "limcast/error.hpp"
#include "limcast/random.hpp"
#include "limcast/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace limcast::experiment {

namespace {

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_str(std::uint64_t h, const std::string& s) { return fnv1a(h, s.data(), s.size()); }

std::uint64_t hash_matrix(std::uint64_t h, const Eigen::MatrixXd& m) {
  return fnv1a(h, m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string history_sidecar(const hybrid::TrainHistory& h) {
  std::ostringstream os;
  os.precision(17);
  os << h.best_epoch << ' ' << h.best_val << ' ' << h.early_stopped << ' ' << h.worse_than_climatology << '\n'
     << h.to_csv();
  return os.str();
}

std::optional<hybrid::TrainHistory> read_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  hybrid::TrainHistory h;
  in >> h.best_epoch >> h.best_val >> h.early_stopped >> h.worse_than_climatology;
  std::string line;
  std::getline(in, line);
  std::getline(in, line);  // csv header
  while (std::getline(in, line)) {
    hybrid::EpochRecord r;
    int best = 0;
    char c = 0;
    std::istringstream ls(line);
    ls >> r.epoch >> c >> r.train_loss >> c >> r.val_loss >> c >> r.val_reference >> c >> r.lr >> c >> r.seconds >> c >> best;
    if (ls) h.epochs.push_back(r);
  }
  if (!in.eof() || h.best_epoch < 1) return std::nullopt;
  return h;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("path", "cannot write " + path.string());
}

std::uint64_t model_key(const hybrid::TrainConfig& cfg, const Prepared& prep, const std::string& kind) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  h = hash_str(h, kind);
  h = hash_str(h, cfg.to_json());
  h = fnv1a(h, &prep.basis.id, sizeof prep.basis.id);
  h = hash_matrix(h, prep.z_train.z);
  h = hash_matrix(h, prep.z_val.z);
  return h;
}

}  // namespace

SynthRecord make_record(const RecordConfig& cfg) {
  SynthRecord r;
  r.system = synth::make_synth_system(cfg.d, cfg.seasonal, 0.0, cfg.system_seed);
  if (cfg.c_frac > 0.0) r.system = synth::with_nonlinearity(r.system, cfg.c_frac * r.system.stability_bound);
  r.truth = synth::generate(r.system, cfg.years, cfg.data_seed);
  r.observed = synth::embed(r.system, r.truth, mix_seed(cfg.data_seed ^ 0x6f6273ULL));
  return r;
}

Prepared prepare(const GriddedSeries& observed, TimeRange train, TimeRange val, TimeRange test,
                 const std::vector<int>& n_keep, int n_total) {
  for (const auto& r : {train, val, test})
    if (r.end > observed.n_time() || r.size() == 0) throw ConfigError("experiment range outside the record");
  Prepared p;
  p.train = train;
  p.val = val;
  p.test = test;
  auto trend = dataprep::detrend_linear(observed);
  auto anomalies = dataprep::remove_climatology(trend.series, train);
  p.climatology = std::move(anomalies.climatology);
  p.climatology.trend_slope = std::move(trend.slopes);
  p.climatology.trend_intercept = std::move(trend.intercepts);
  const GriddedSeries a = dataprep::zscore_normalize(anomalies.series, p.climatology, true, train);
  p.basis = eof::fit_eof(a.slice(train), n_keep, n_total, n_total);
  p.z_train = eof::project(a.slice(train), p.basis);
  p.z_val = eof::project(a.slice(val), p.basis);
  p.z_test = eof::project(a.slice(test), p.basis);
  p.fields_train = eof::stacked_fields(a.slice(train));
  p.fields_val = eof::stacked_fields(a.slice(val));
  p.fields_test = eof::stacked_fields(a.slice(test));

  const auto w = dataprep::region_weights(a, dataprep::kNino4);
  const auto nc = static_cast<Eigen::Index>(p.basis.n_valid());
  p.nino_fields = Eigen::VectorXd::Zero(nc * static_cast<Eigen::Index>(p.basis.vars.size()));
  for (Eigen::Index k = 0; k < nc; ++k) p.nino_fields(k) = w[p.basis.cell_index[static_cast<std::size_t>(k)]];
  p.nino_pc = p.basis.kept_map() * p.nino_fields;
  p.pc_scale = (p.z_train.z.colwise().squaredNorm() / static_cast<double>(p.z_train.size())).cwiseSqrt().transpose();
  return p;
}

lim::LimOperator fit_lim(const eof::PcSeries& z_train, lim::ClipReport* clip) {
  return lim::estimate_cyclostationary_lim_clipped(z_train, 0.99, clip);
}

std::vector<std::size_t> init_times(std::size_t n, int horizon, std::size_t first, std::size_t stride) {
  if (stride == 0) throw ConfigError("stride must be >= 1");
  std::vector<std::size_t> out;
  for (std::size_t t = first; t + static_cast<std::size_t>(horizon) < n; t += stride) out.push_back(t);
  return out;
}

std::vector<lim::EnsembleForecast> lim_forecasts(const lim::LimOperator& op, const eof::PcSeries& z,
                                                 std::span<const std::size_t> init, int members, int horizon,
                                                 std::uint64_t seed, double delta) {
  std::vector<lim::EnsembleForecast> out;
  out.reserve(init.size());
  for (auto t : init) {
    auto f = lim::integrate_ensemble(op, z.z.row(static_cast<Eigen::Index>(t)).transpose(), z.month[t], horizon, members,
                                     delta, mix_seed(seed + t));
    f.init_time = t;
    f.basis_id = z.basis_id;
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<lim::EnsembleForecast> hybrid_forecasts(const hybrid::HybridModel& model, const eof::PcSeries& z,
                                                    std::span<const std::size_t> init, std::uint64_t seed) {
  Eigen::MatrixXd states(static_cast<Eigen::Index>(init.size()), model.dim());
  std::vector<int> months;
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < init.size(); ++i) {
    states.row(static_cast<Eigen::Index>(i)) = z.z.row(static_cast<Eigen::Index>(init[i]));
    months.push_back(z.month[init[i]]);
    seeds.push_back(mix_seed(seed + init[i]));
  }
  auto out = hybrid::hybrid_forecast_batch(model, states, months, seeds);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].init_time = init[i];
    out[i].basis_id = z.basis_id;
  }
  return out;
}

Scores score(const std::vector<lim::EnsembleForecast>& forecasts, std::span<const std::size_t> init,
             const Eigen::MatrixXd& fields, const Prepared& prep, const std::vector<int>& leads) {
  if (forecasts.size() != init.size()) throw ConfigError("one forecast per initial time required");
  const auto n = static_cast<Eigen::Index>(init.size());
  const auto nl = static_cast<Eigen::Index>(leads.size());
  Scores s;
  s.leads = leads;
  s.grid_crps.resize(n, nl);
  s.nino_mean.resize(n, nl);
  s.nino_target.resize(n, nl);
  s.nino_crps.resize(n, nl);
  const Eigen::MatrixXd map = prep.basis.kept_map();
  const Eigen::VectorXd nino_fields = prep.nino_fields;
  const Eigen::Index k_cols = map.cols();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = forecasts[static_cast<std::size_t>(i)];
    const int m = f.n_members();
    for (Eigen::Index j = 0; j < nl; ++j) {
      const int tau = leads[static_cast<std::size_t>(j)];
      if (tau < 1 || tau > f.horizon()) throw ConfigError("lead outside the forecast horizon");
      const auto row = static_cast<Eigen::Index>(init[static_cast<std::size_t>(i)]) + tau;
      if (row >= fields.rows()) throw DataError("fields", "target record beyond the range");
      Eigen::MatrixXd ens(m, k_cols);
      for (int k = 0; k < m; ++k) ens.row(k) = f.members[static_cast<std::size_t>(k)].row(tau - 1) * map;
      const Eigen::RowVectorXd target = fields.row(row);
      double total = 0.0;
      std::vector<double> col(static_cast<std::size_t>(m));
      for (Eigen::Index c = 0; c < k_cols; ++c) {
        for (int k = 0; k < m; ++k) col[static_cast<std::size_t>(k)] = ens(k, c);
        total += verify::crps_empirical(col, target(c));
      }
      s.grid_crps(i, j) = total / static_cast<double>(k_cols);
      const Eigen::VectorXd nino = ens * nino_fields;
      s.nino_mean(i, j) = nino.mean();
      s.nino_target(i, j) = target.dot(nino_fields);
      s.nino_crps(i, j) = verify::crps_empirical(std::span<const double>(nino.data(), static_cast<std::size_t>(m)),
                                                 s.nino_target(i, j));
    }
  }
  return s;
}

Eigen::MatrixXd mean_fields(const std::vector<lim::EnsembleForecast>& forecasts, const eof::EofBasis& basis, int lead) {
  const Eigen::MatrixXd map = basis.kept_map();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(forecasts.size()), map.cols());
  for (std::size_t i = 0; i < forecasts.size(); ++i) {
    const auto& f = forecasts[i];
    Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(f.dim());
    for (const auto& m : f.members) mean += m.row(lead - 1);
    out.row(static_cast<Eigen::Index>(i)) = mean / static_cast<double>(f.n_members()) * map;
  }
  return out;
}

GrowthStates growth_states(const lim::LimOperator& op, const eof::PcSeries& z, int lead, std::optional<int> month,
                           std::size_t first) {
  if (lead < 1) throw ConfigError("growth lead must be >= 1");
  GrowthStates out;
  for (std::size_t t = first; t + static_cast<std::size_t>(lead) < z.size(); ++t) {
    const int m = z.month[t];
    if (month && m != *month) continue;
    auto it = out.structures.find(m);
    if (it == out.structures.end()) it = out.structures.emplace(m, lim::optimal_initial_condition(op, m, lead)).first;
    out.init.push_back(t);
    out.projection.push_back(lim::optimal_growth_projection(z.z.row(static_cast<Eigen::Index>(t)).transpose(), it->second));
  }
  return out;
}

AsymmetryResult asymmetry_experiment(const lim::LimOperator& op, const hybrid::HybridModel* model,
                                     const eof::PcSeries& z, const Eigen::MatrixXd& fields, const eof::EofBasis& basis,
                                     int lead, double lower_pct, std::optional<int> month, int members,
                                     std::uint64_t seed, double alpha, bool sign_paired) {
  if (static_cast<std::size_t>(fields.rows()) != z.size()) throw DataError("fields", "fields and PCs differ in length");
  if (model && model->horizon() < lead) throw ConfigError("model horizon shorter than the composite lead");
  const auto states = growth_states(op, z, lead, month);
  const auto band = verify::stratify_by_optimal_growth(states.projection, {{lower_pct, 100.0}}).front();

  AsymmetryResult out;
  out.n_states = band.size();
  const auto n = static_cast<Eigen::Index>(band.size());
  Eigen::MatrixXd target(n, fields.cols());
  std::vector<double> sign;
  std::vector<std::size_t> init;
  for (Eigen::Index i = 0; i < n; ++i) {
    const std::size_t k = band[static_cast<std::size_t>(i)];
    init.push_back(states.init[k]);
    sign.push_back(states.projection[k]);
    target.row(i) = fields.row(static_cast<Eigen::Index>(states.init[k]) + lead);
  }
  out.target = verify::asymmetry_composites(target, sign, alpha);

  // Model inits: the band states, then their negatives appended as extra records.
  eof::PcSeries zin = z;
  std::vector<std::size_t> model_init = init;
  std::vector<double> model_sign = sign;
  if (sign_paired) {
    const auto nz = z.z.rows();
    zin.z.conservativeResize(2 * nz, Eigen::NoChange);
    zin.z.bottomRows(nz) = -z.z;
    zin.month.insert(zin.month.end(), z.month.begin(), z.month.end());
    for (std::size_t i = 0; i < init.size(); ++i) {
      model_init.push_back(init[i] + z.size());
      model_sign.push_back(-sign[i]);
    }
  }
  out.lim = verify::asymmetry_composites(
      mean_fields(lim_forecasts(op, zin, model_init, members, lead, seed), basis, lead), model_sign, alpha);
  if (model)
    out.hybrid = verify::asymmetry_composites(mean_fields(hybrid_forecasts(*model, zin, model_init, seed), basis, lead),
                                              model_sign, alpha);
  return out;
}

hybrid::TrainHistory train_hybrid_cached(hybrid::HybridModel& model, const Prepared& prep,
                                         const hybrid::TrainConfig& cfg, const std::filesystem::path& cache) {
  const hybrid::TrainingData train{prep.z_train, prep.fields_train};
  const hybrid::TrainingData val{prep.z_val, prep.fields_val};
  if (cache.empty()) return hybrid::train_hybrid(model, train, val, prep.basis, cfg);
  std::filesystem::create_directories(cache);
  std::uint64_t key = model_key(cfg, prep, "hybrid");
  key = fnv1a(key, model.lim().to_section().payload.data(), model.lim().to_section().payload.size());
  const auto file = cache / ("hybrid_" + hex(key) + ".bin");
  const auto side = cache / ("hybrid_" + hex(key) + ".history");
  if (std::filesystem::exists(file))
    if (auto h = read_sidecar(side)) {
      model = hybrid::load_hybrid(file).first;
      return *h;
    }
  auto h = hybrid::train_hybrid(model, train, val, prep.basis, cfg);
  hybrid::save_hybrid(file, model, cfg);
  write_text(side, history_sidecar(h));
  return h;
}

hybrid::TrainHistory train_pc_lstm_cached(hybrid::PcLstmModel& model, const Prepared& prep,
                                          const hybrid::TrainConfig& cfg, const std::filesystem::path& cache) {
  const hybrid::TrainingData train{prep.z_train, prep.fields_train};
  const hybrid::TrainingData val{prep.z_val, prep.fields_val};
  if (cache.empty()) return hybrid::train_pc_lstm(model, train, val, prep.basis, cfg);
  std::filesystem::create_directories(cache);
  const std::uint64_t key = model_key(cfg, prep, "pc-lstm");
  const auto file = cache / ("pclstm_" + hex(key) + ".bin");
  const auto side = cache / ("pclstm_" + hex(key) + ".history");
  if (std::filesystem::exists(file))
    if (auto h = read_sidecar(side)) {
      model = hybrid::load_pc_lstm(file).first;
      return *h;
    }
  auto h = hybrid::train_pc_lstm(model, train, val, prep.basis, cfg);
  hybrid::save_pc_lstm(file, model, cfg);
  write_text(side, history_sidecar(h));
  return h;
}

std::vector<SweepRow> run_datasweep(const SweepConfig& cfg, const std::function<void(const std::string&)>& log) {
  if (cfg.lengths.empty() || cfg.n_seeds < 1) throw ConfigError("datasweep needs lengths and n_seeds >= 1");
  if (cfg.val_years < 2 || cfg.test_years < 3) throw ConfigError("datasweep needs val >= 2 and test >= 3 years");
  for (int y : cfg.lengths)
    if (y < 3) throw ConfigError("datasweep lengths must be >= 3 years");
  if (cfg.lead < 1 || cfg.lead > cfg.train.horizon) throw ConfigError("datasweep lead outside the horizon");
  cfg.train.validate();
  const int pool = *std::max_element(cfg.lengths.begin(), cfg.lengths.end());
  RecordConfig rc = cfg.record;
  rc.years = pool + cfg.val_years + cfg.test_years;
  const auto record = make_record(rc);
  const std::size_t val_begin = static_cast<std::size_t>(pool) * 12;
  const TimeRange val{val_begin, val_begin + static_cast<std::size_t>(cfg.val_years) * 12};
  const TimeRange test{val.end, val.end + static_cast<std::size_t>(cfg.test_years) * 12};
  const int na = record.system.n_ssta;
  const std::vector<int> n_keep{na, record.system.d - na};
  const std::vector<int> leads{cfg.lead};

  std::vector<SweepRow> rows;
  for (int years : cfg.lengths)
    for (int seed = 0; seed < cfg.n_seeds; ++seed) {
      SweepRow row;
      row.years = years;
      row.seed = seed;
      Rng pick = substream(cfg.subset_seed, static_cast<std::uint64_t>(years) * 1000 + static_cast<std::uint64_t>(seed));
      row.start_year = std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(pool - years))(pick);
      const TimeRange train{row.start_year * 12, (row.start_year + static_cast<std::size_t>(years)) * 12};
      const auto prep = prepare(record.observed, train, val, test, n_keep);
      lim::ClipReport clip;
      const auto op = fit_lim(prep.z_train, &clip);
      row.clipped_months = static_cast<int>(clip.months.size());

      hybrid::TrainConfig tc = cfg.train;
      tc.seed = cfg.train.seed + static_cast<std::uint64_t>(seed);
      const auto init = init_times(prep.z_test.size(), tc.horizon, static_cast<std::size_t>(tc.t_hist - 1));
      const std::uint64_t fseed = mix_seed(tc.seed ^ 0x74657374ULL);

      const auto lim_f = lim_forecasts(op, prep.z_test, init, tc.members, tc.horizon, fseed, tc.delta);
      const auto s_lim = score(lim_f, init, prep.fields_test, prep, leads);

      hybrid::HybridModel hm(op, prep.pc_scale, tc.hidden, tc.layers, tc.members, tc.horizon, tc.seed, tc.delta);
      train_hybrid_cached(hm, prep, tc, cfg.cache_dir);
      const auto s_hyb = score(hybrid_forecasts(hm, prep.z_test, init, fseed), init, prep.fields_test, prep, leads);

      hybrid::PcLstmModel pm(prep.z_train.dim(), prep.pc_scale, tc.hidden, tc.layers, tc.members, tc.horizon, tc.t_hist,
                             tc.seed);
      train_pc_lstm_cached(pm, prep, tc, cfg.cache_dir);
      auto pc_f = hybrid::pc_lstm_forecast_batch(pm, prep.z_test, init);
      const auto s_pc = score(pc_f, init, prep.fields_test, prep, leads);

      auto acc_of = [](const Scores& s) {
        return verify::acc(std::span<const double>(s.nino_mean.data(), static_cast<std::size_t>(s.nino_mean.rows())),
                           std::span<const double>(s.nino_target.data(), static_cast<std::size_t>(s.nino_target.rows())));
      };
      row.acc_lim = acc_of(s_lim);
      row.acc_hybrid = acc_of(s_hyb);
      row.acc_pc_lstm = acc_of(s_pc);
      rows.push_back(row);
      if (log) {
        std::ostringstream os;
        os.precision(4);
        os << "years=" << years << " seed=" << seed << " start=" << row.start_year << " acc lim=" << row.acc_lim
           << " hybrid=" << row.acc_hybrid << " pc-lstm=" << row.acc_pc_lstm;
        log(os.str());
      }
    }
  return rows;
}

std::string sweep_to_csv(const std::vector<SweepRow>& rows, int lead) {
  std::ostringstream os;
  os.precision(17);
  os << "years,seed,start_year,lead,acc_cs_lim,acc_hybrid,acc_pc_lstm,clipped_months\n";
  for (const auto& r : rows)
    os << r.years << ',' << r.seed << ',' << r.start_year << ',' << lead << ',' << r.acc_lim << ',' << r.acc_hybrid << ','
       << r.acc_pc_lstm << ',' << r.clipped_months << '\n';
  return os.str();
}

}  // namespace limcast::experiment
