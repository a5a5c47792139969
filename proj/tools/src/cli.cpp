#include "cli.hpp"

#include "run_config.hpp"

#include "limcast/binary_io.hpp"
#include "limcast/dataprep.hpp"
#include "limcast/eof.hpp"
#include "limcast/error.hpp"
#include "limcast/experiment.hpp"
#include "limcast/hybrid.hpp"
#include "limcast/lim.hpp"
#include "limcast/linalg.hpp"
#include "limcast/random.hpp"
#include "limcast/synth.hpp"
#include "limcast/verify.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <sstream>

namespace limcast::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Workspace files

struct Workspace {
  fs::path dir;

  fs::path anomalies() const { return dir / "anomalies.limg"; }
  fs::path climatology() const { return dir / "climatology.bin"; }
  fs::path split() const { return dir / "split.json"; }
  fs::path basis() const { return dir / "basis.eofb"; }
  fs::path pcs(const std::string& s) const { return dir / ("pcs_" + s + ".bin"); }
  fs::path lim() const { return dir / "lim.limo"; }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw DataError("path", "cannot write " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("path", "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void need(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p)) throw DataError("path", p.string() + " not found (" + hint + ")");
}

void save_pcs(const fs::path& p, const eof::PcSeries& z) { io::write_sections(p, {z.to_section()}); }
eof::PcSeries load_pcs(const fs::path& p) {
  need(p, "run prepare first");
  return eof::PcSeries::from_section(io::read_sections(p).at(0));
}

eof::EofBasis load_basis(const Workspace& ws) {
  need(ws.basis(), "run prepare first");
  return eof::EofBasis::from_section(io::find_section(io::read_sections(ws.basis()), "EOFB"));
}

lim::LimOperator load_lim(const fs::path& p) {
  need(p, "run fit-lim first");
  return lim::LimOperator::from_section(io::find_section(io::read_sections(p), "LIMO"));
}

std::map<std::string, TimeRange> load_split(const Workspace& ws) {
  need(ws.split(), "run prepare first");
  const auto j = json::parse(read_text(ws.split()));
  std::map<std::string, TimeRange> out;
  for (const char* s : {"train", "val", "test"}) {
    const auto r = j.at(s).get<std::vector<std::size_t>>();
    out[s] = {r.at(0), r.at(1)};
  }
  return out;
}

TimeRange split_range(const Workspace& ws, const std::string& split) {
  const auto all = load_split(ws);
  const auto it = all.find(split);
  if (it == all.end()) throw ConfigError("split must be train, val or test (got '" + split + "')");
  return it->second;
}

GriddedSeries load_anomalies(const Workspace& ws) {
  need(ws.anomalies(), "run prepare first");
  return dataprep::ingest_grid(ws.anomalies(), dataprep::GridFormat::flat_binary);
}

void echo_config(const Workspace& ws, const RunConfig& cfg) {
  fs::create_directories(ws.dir);
  write_text(ws.dir / "resolved_config.json", cfg.dump());
}

Eigen::MatrixXd mean_fields(const std::vector<lim::EnsembleForecast>& fc, const eof::EofBasis& basis, int lead) {
  const Eigen::MatrixXd map = basis.kept_map();
  Eigen::MatrixXd out(static_cast<Eigen::Index>(fc.size()), map.cols());
  for (std::size_t i = 0; i < fc.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = fc[i].mean().row(lead - 1) * map;
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

/// Niño-region weights on the stacked columns and as a functional on PCs.
std::pair<Eigen::VectorXd, Eigen::VectorXd> nino_functionals(const GriddedSeries& like, const eof::EofBasis& basis,
                                                             const dataprep::Region& region) {
  const auto w = dataprep::region_weights(like, region);
  const auto nc = static_cast<Eigen::Index>(basis.n_valid());
  Eigen::VectorXd fields = Eigen::VectorXd::Zero(nc * static_cast<Eigen::Index>(basis.vars.size()));
  for (Eigen::Index k = 0; k < nc; ++k) fields(k) = w[basis.cell_index[static_cast<std::size_t>(k)]];
  return {fields, basis.kept_map() * fields};
}

// ---------------------------------------------------------------------------
// Forecast CSV

std::vector<lim::EnsembleForecast> read_forecast_csv(const fs::path& path, const eof::PcSeries& z) {
  std::ifstream in(path);
  if (!in) throw DataError("forecasts", "cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("init_time,member,lead,pc_index,value", 0) != 0)
    throw DataError("forecasts", "unexpected header in " + path.string());
  struct Entry {
    std::size_t t;
    int m, tau, k;
    double v;
  };
  std::vector<Entry> entries;
  std::size_t max_t = 0;
  int max_m = 0, max_tau = 0, max_k = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    Entry e{};
    char c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    std::istringstream ls(line);
    if (!(ls >> e.t >> c1 >> e.m >> c2 >> e.tau >> c3 >> e.k >> c4 >> e.v) || c1 != ',' || c4 != ',' || e.tau < 1 ||
        e.m < 0 || e.k < 0)
      throw DataError("forecasts", "malformed row " + std::to_string(line_no));
    max_t = std::max(max_t, e.t);
    max_m = std::max(max_m, e.m);
    max_tau = std::max(max_tau, e.tau);
    max_k = std::max(max_k, e.k);
    entries.push_back(e);
  }
  if (entries.empty()) throw DataError("forecasts", "no rows in " + path.string());
  if (max_k + 1 != z.dim()) throw DataError("forecasts", "PC count differs from the basis");
  if (max_t >= z.size()) throw DataError("forecasts", "init_time beyond the split");
  std::map<std::size_t, lim::EnsembleForecast> by_t;
  for (const auto& e : entries) {
    auto& f = by_t[e.t];
    if (f.members.empty()) {
      f.init_time = e.t;
      f.init_month = z.month[e.t];
      f.basis_id = z.basis_id;
      f.members.assign(static_cast<std::size_t>(max_m + 1), Eigen::MatrixXd::Constant(max_tau, max_k + 1, kNaN));
    }
    f.members[static_cast<std::size_t>(e.m)](e.tau - 1, e.k) = e.v;
  }
  std::vector<lim::EnsembleForecast> out;
  for (auto& [t, f] : by_t) {
    for (const auto& m : f.members)
      if (!m.allFinite()) throw DataError("forecasts", "incomplete forecast for init_time " + std::to_string(t));
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct Context {
  RunConfig cfg;
  Workspace ws;
  std::ostream& out;
};

int cmd_synth_gen(Context& c) {
  const auto rc = c.cfg.record();
  const auto rec = experiment::make_record(rc);
  write_text(c.ws.dir / "synth_system.json", synth::to_json(rec.system));
  save_pcs(c.ws.dir / "truth_pcs.bin", rec.truth);
  dataprep::write_grid(c.ws.dir / "observed.limg", rec.observed, dataprep::GridFormat::flat_binary);
  io::write_sections(c.ws.dir / "truth_basis.eofb", {synth::embedding_basis(rec.system).to_section()});
  c.out << "synth-gen: d=" << rc.d << " years=" << rc.years << " c=" << rec.system.nonlin_coeff
        << " (bound " << rec.system.stability_bound << ")\n";
  return ok;
}

int cmd_prepare(Context& c) {
  const auto input = c.cfg.tree().at("data").at("input").get<std::string>();
  if (input.empty()) throw ConfigError("data.input is required (use --input)");
  GriddedSeries raw = dataprep::ingest_grid(input, dataprep::format_from_path(input));
  const auto spec = c.cfg.split();
  const auto split = dataprep::split_series(raw, spec);
  const TimeRange train = split.ranges[0];
  std::optional<dataprep::DetrendResult> trend;
  if (c.cfg.tree().at("prepare").at("detrend").get<bool>()) {
    trend = dataprep::detrend_linear(raw);
    raw = trend->series;
  }
  auto anomalies = dataprep::remove_climatology(raw, train);
  if (trend) {
    anomalies.climatology.trend_slope = trend->slopes;
    anomalies.climatology.trend_intercept = trend->intercepts;
  }
  GriddedSeries a = std::move(anomalies.series);
  if (c.cfg.tree().at("prepare").at("zscore").get<bool>())
    a = dataprep::zscore_normalize(a, anomalies.climatology, true, train);
  const int n_total = c.cfg.tree().at("prepare").at("n_total").get<int>();
  const auto basis = eof::fit_eof(a.slice(train), c.cfg.n_keep(), n_total, n_total);

  dataprep::write_grid(c.ws.anomalies(), a, dataprep::GridFormat::flat_binary);
  io::write_sections(c.ws.climatology(), {anomalies.climatology.to_section()});
  io::write_sections(c.ws.basis(), {basis.to_section()});
  const char* names[] = {"train", "val", "test"};
  json sj;
  for (int i = 0; i < 3; ++i) {
    const auto r = split.ranges[static_cast<std::size_t>(i)];
    sj[names[i]] = {r.begin, r.end};
    save_pcs(c.ws.pcs(names[i]), eof::project(a.slice(r), basis));
  }
  write_text(c.ws.split(), sj.dump(2) + "\n");
  c.out << "prepare: " << a.n_time() << " months, split years " << split.years[0] << '/' << split.years[1] << '/'
        << split.years[2] << ", " << basis.dim() << " PCs\n";
  return ok;
}

int cmd_fit_lim(Context& c, const std::string& pcs_override, const std::string& truth) {
  const auto& lj = c.cfg.tree().at("lim");
  const auto z = load_pcs(pcs_override.empty() ? c.ws.pcs("train") : fs::path(pcs_override));
  const auto kind = lj.at("kind").get<std::string>();
  const double clip = lj.at("clip_radius").get<double>();
  const bool tendency = lj.at("include_tendency").get<bool>();
  lim::LimOperator op;
  lim::ClipReport report;
  if (kind == "stationary" || kind == "st") {
    op = lim::estimate_stationary_lim(z, lj.at("tau0").get<int>());
  } else if (kind == "cyclostationary" || kind == "cs") {
    op = clip > 0.0 ? lim::estimate_cyclostationary_lim_clipped(z, clip, &report, tendency)
                    : lim::estimate_cyclostationary_lim(z, tendency);
  } else {
    throw ConfigError("lim.kind must be 'stationary' or 'cyclostationary'");
  }
  io::write_sections(c.ws.lim(), {op.to_section()});

  json rep;
  rep["kind"] = op.kind() == lim::LimKind::stationary ? "stationary" : "cyclostationary";
  rep["dim"] = op.dim();
  json months = json::array();
  for (std::size_t r = 0; r < op.n_regimes(); ++r) {
    const int m = static_cast<int>(r) + 1;
    Eigen::EigenSolver<Eigen::MatrixXd> es(op.l(m));
    json eig = json::array();
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i)
      eig.push_back({es.eigenvalues()(i).real(), es.eigenvalues()(i).imag()});
    const auto& rr = op.repairs().size() > r ? op.repairs()[r] : lim::RepairRecord{};
    months.push_back({{"month", op.kind() == lim::LimKind::stationary ? 0 : m},
                      {"max_abs_eig_g", linalg::spectral_radius(op.month_propagator(m))},
                      {"eig_l", eig},
                      {"q_negative_eigs", rr.n_negative},
                      {"q_negative_sum", rr.negative_sum},
                      {"q_trace_scale", rr.trace_scale}});
  }
  rep["regimes"] = months;
  rep["clipped_months"] = report.months;
  rep["clipped_radius_before"] = report.radius_before;
  double worst = 0.0;
  for (const auto& m : months) worst = std::max(worst, m.at("max_abs_eig_g").get<double>());
  c.out << "fit-lim: " << rep["kind"].get<std::string>() << ", d=" << op.dim() << ", max |eig(G)| = " << worst << '\n';
  if (!report.months.empty()) c.out << "fit-lim: clipped " << report.months.size() << " unstable month(s)\n";

  if (!truth.empty()) {
    const auto sys = synth::from_json(read_text(truth));
    if (sys.d != op.dim()) throw DataError("truth", "system dimension differs from the PCs");
    // PCs from `prepare` live in an EOF basis; map the true propagators into it
    // through a regression of the PCs on the true states (monthly intercepts
    // absorb the climatology removal).
    Eigen::MatrixXd to_pc = Eigen::MatrixXd::Identity(sys.d, sys.d);
    if (z.basis_id != synth::embedding_basis(sys).id) {
      const auto states = load_pcs(fs::path(truth).parent_path() / "truth_pcs.bin");
      std::size_t first = 0;
      if (states.size() != z.size()) first = split_range(c.ws, "train").begin;
      if (first + z.size() > states.size()) throw DataError("truth", "truth states do not cover the fitted PCs");
      const auto n = static_cast<Eigen::Index>(z.size());
      Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, sys.d + 12);
      x.leftCols(sys.d) = states.z.middleRows(static_cast<Eigen::Index>(first), n);
      for (Eigen::Index t = 0; t < n; ++t) x(t, sys.d + z.month[static_cast<std::size_t>(t)] - 1) = 1.0;
      to_pc = x.colPivHouseholderQr().solve(z.z).topRows(sys.d);
    }
    const Eigen::MatrixXd from_pc = to_pc.inverse();
    double err = 0.0;
    for (int m = 1; m <= 12; ++m) {
      const Eigen::MatrixXd g_true = to_pc.transpose() * synth::euler_month_map(sys, m) * from_pc.transpose();
      err = std::max(err, (op.month_propagator(m) - g_true).norm() / g_true.norm());
    }
    rep["recovery_max_rel_error"] = err;
    c.out << "fit-lim: max_j ||G_j - G_j*||_F / ||G_j*||_F = " << num(err) << '\n';
  }
  write_text(c.ws.dir / "fit_report.json", rep.dump(2) + "\n");
  return ok;
}

hybrid::TrainingData training_data(const Workspace& ws, const GriddedSeries& a, const std::string& split) {
  return {load_pcs(ws.pcs(split)), eof::stacked_fields(a.slice(split_range(ws, split)))};
}

int cmd_train(Context& c) {
  const auto model = c.cfg.tree().at("train").at("model").get<std::string>();
  const int seeds = c.cfg.tree().at("train").at("seeds").get<int>();
  if (seeds < 1) throw ConfigError("train.seeds must be >= 1");
  if (model != "hybrid" && model != "pc-lstm") throw ConfigError("train.model must be 'hybrid' or 'pc-lstm'");
  const auto base = c.cfg.train();
  const auto basis = load_basis(c.ws);
  const auto a = load_anomalies(c.ws);
  const auto train = training_data(c.ws, a, "train");
  const auto val = training_data(c.ws, a, "val");
  const Eigen::VectorXd scale =
      (train.z.z.colwise().squaredNorm() / static_cast<double>(train.z.size())).cwiseSqrt().transpose();
  std::optional<lim::LimOperator> op;
  if (model == "hybrid") op = load_lim(c.ws.lim());
  for (int s = 0; s < seeds; ++s) {
    auto cfg = base;
    cfg.seed = base.seed + static_cast<std::uint64_t>(s);
    const std::string stem = (model == "hybrid" ? "hybrid_seed" : "pclstm_seed") + std::to_string(cfg.seed);
    hybrid::TrainHistory h;
    if (model == "hybrid") {
      hybrid::HybridModel m(*op, scale, cfg.hidden, cfg.layers, cfg.members, cfg.horizon, cfg.seed, cfg.delta);
      h = hybrid::train_hybrid(m, train, val, basis, cfg);
      hybrid::save_hybrid(c.ws.dir / (stem + ".ckpt"), m, cfg);
    } else {
      hybrid::PcLstmModel m(train.z.dim(), scale, cfg.hidden, cfg.layers, cfg.members, cfg.horizon, cfg.t_hist, cfg.seed);
      h = hybrid::train_pc_lstm(m, train, val, basis, cfg);
      hybrid::save_pc_lstm(c.ws.dir / (stem + ".ckpt"), m, cfg);
    }
    write_text(c.ws.dir / ("history_" + stem + ".csv"), h.to_csv());
    c.out << "train: " << stem << " best epoch " << h.best_epoch << " val " << num(h.best_val)
          << (h.early_stopped ? " (early stop)" : "") << '\n';
    if (h.worse_than_climatology) c.out << "train: warning: " << stem << " never beat the zero-anomaly forecast\n";
  }
  return ok;
}

int cmd_forecast(Context& c, const std::string& checkpoint, const std::string& output) {
  const auto& fj = c.cfg.tree().at("forecast");
  const auto split = fj.at("split").get<std::string>();
  const auto z = load_pcs(c.ws.pcs(split));
  const fs::path ckpt = checkpoint.empty() ? c.ws.lim() : fs::path(checkpoint);
  need(ckpt, "checkpoint");
  const auto sections = io::read_sections(ckpt);
  const bool is_lim = std::any_of(sections.begin(), sections.end(), [](const io::Section& s) { return s.tag == "LIMO"; }) &&
                      std::none_of(sections.begin(), sections.end(), [](const io::Section& s) { return s.tag == "MODL"; });
  std::string kind = is_lim ? "lim" : hybrid::checkpoint_kind(ckpt);
  int horizon = fj.at("horizon").get<int>();
  std::size_t first = 0;
  std::optional<hybrid::HybridModel> hm;
  std::optional<hybrid::PcLstmModel> pm;
  if (kind == "hybrid") {
    hm = hybrid::load_hybrid(ckpt).first;
    horizon = hm->horizon();
  } else if (kind == "pc-lstm") {
    pm = hybrid::load_pc_lstm(ckpt).first;
    horizon = pm->horizon();
    first = static_cast<std::size_t>(pm->t_hist() - 1);
  }
  const auto begin = std::max<std::size_t>(first, fj.at("init_begin").get<std::size_t>());
  const long long end_cfg = fj.at("init_end").get<long long>();
  const std::size_t end = end_cfg < 0 ? z.size() : std::min<std::size_t>(z.size(), static_cast<std::size_t>(end_cfg));
  const auto stride = fj.at("stride").get<std::size_t>();
  if (stride == 0) throw ConfigError("forecast.stride must be >= 1");
  std::vector<std::size_t> init;
  for (std::size_t t = begin; t < end; t += stride) init.push_back(t);
  if (init.empty()) throw DataError("init", "no initial times in the requested range");
  const std::uint64_t seed = c.cfg.seed();
  std::vector<lim::EnsembleForecast> fc;
  if (kind == "lim")
    fc = experiment::lim_forecasts(load_lim(ckpt), z, init, fj.at("members").get<int>(), horizon, seed);
  else if (kind == "hybrid")
    fc = experiment::hybrid_forecasts(*hm, z, init, seed);
  else
    fc = hybrid::pc_lstm_forecast_batch(*pm, z, init);
  const fs::path path = output.empty() ? c.ws.dir / ("forecast_" + kind + "_" + split + ".csv") : fs::path(output);
  write_text(path, hybrid::forecasts_to_csv(fc));
  c.out << "forecast: " << kind << ", " << fc.size() << " initial times, horizon " << horizon << " -> " << path.string()
        << '\n';
  return ok;
}

struct SampleLoss {
  std::vector<double> model, reference;
};

int cmd_evaluate(Context& c, const std::string& forecasts) {
  const auto& ej = c.cfg.tree().at("evaluate");
  const auto split = c.cfg.tree().at("forecast").at("split").get<std::string>();
  const auto z = load_pcs(c.ws.pcs(split));
  const auto basis = load_basis(c.ws);
  const auto a = load_anomalies(c.ws);
  const auto range = split_range(c.ws, split);
  const Eigen::MatrixXd fields = eof::stacked_fields(a.slice(range));
  const auto [nino_f, nino_pc] = nino_functionals(a, basis, c.cfg.region());
  const fs::path fpath = forecasts.empty() ? c.ws.dir / ("forecast_lim_" + split + ".csv") : fs::path(forecasts);
  const auto fc = read_forecast_csv(fpath, z);
  const int horizon = fc.front().horizon();
  const int members = fc.front().n_members();
  for (const auto& f : fc)
    if (f.horizon() != horizon || f.n_members() != members) throw DataError("forecasts", "mixed horizons or members");

  std::vector<const lim::EnsembleForecast*> usable;
  for (const auto& f : fc)
    if (f.init_time + static_cast<std::size_t>(horizon) < z.size()) usable.push_back(&f);
  if (usable.size() < 3) throw DataError("forecasts", "fewer than 3 forecasts verify inside the split");
  const auto n = static_cast<Eigen::Index>(usable.size());

  // Niño index of targets, ensemble means and members.
  Eigen::MatrixXd mean(n, horizon), target(n, horizon), persist(n, horizon);
  std::vector<Eigen::MatrixXd> ens(static_cast<std::size_t>(horizon), Eigen::MatrixXd(n, members));
  std::vector<int> init_month;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = *usable[static_cast<std::size_t>(i)];
    init_month.push_back(f.init_month);
    const double x0 = fields.row(static_cast<Eigen::Index>(f.init_time)).dot(nino_f);
    for (int tau = 1; tau <= horizon; ++tau) {
      target(i, tau - 1) = fields.row(static_cast<Eigen::Index>(f.init_time) + tau).dot(nino_f);
      persist(i, tau - 1) = x0;
      for (int m = 0; m < members; ++m)
        ens[static_cast<std::size_t>(tau - 1)](i, m) = f.members[static_cast<std::size_t>(m)].row(tau - 1).dot(nino_pc);
      mean(i, tau - 1) = ens[static_cast<std::size_t>(tau - 1)].row(i).mean();
    }
  }
  // Climatology reference from the training split.
  const auto train_range = split_range(c.ws, "train");
  const Eigen::MatrixXd train_fields = eof::stacked_fields(a.slice(train_range));
  const Eigen::VectorXd train_nino = train_fields * nino_f;
  std::vector<int> train_months(train_range.size());
  for (std::size_t t = 0; t < train_range.size(); ++t) train_months[t] = a.month(train_range.begin + t);

  const auto ref_name = ej.at("reference").get<std::string>();
  const bool persistence = ref_name == "persistence";
  if (!persistence && ref_name != "climatology") throw ConfigError("evaluate.reference must be climatology or persistence");
  const int n_boot = ej.at("n_boot").get<int>();
  const int clim_members = ej.at("clim_members").get<int>();
  auto leads = ej.at("leads").get<std::vector<int>>();
  leads.erase(std::remove_if(leads.begin(), leads.end(), [&](int t) { return t < 1 || t > horizon; }), leads.end());
  if (leads.empty()) throw ConfigError("evaluate.leads has no lead within the forecast horizon");

  json report_json = json::array();
  std::string csv;
  for (const auto& mname : ej.at("metrics").get<std::vector<std::string>>()) {
    const auto metric = verify::parse_metric(mname);
    verify::SkillReport rep;
    rep.metric = metric;
    rep.reference = persistence ? verify::Reference::persistence : verify::Reference::climatology;
    rep.axis = "lead";
    rep.leads = leads;
    rep.values.resize(static_cast<Eigen::Index>(leads.size()), 1);
    rep.p_values = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(leads.size()), 1, kNaN);
    rep.n_samples = static_cast<std::size_t>(n);
    for (std::size_t j = 0; j < leads.size(); ++j) {
      const int tau = leads[j];
      const Eigen::VectorXd y = target.col(tau - 1);
      const Eigen::VectorXd f = mean.col(tau - 1);
      const Eigen::MatrixXd& e = ens[static_cast<std::size_t>(tau - 1)];
      std::vector<int> months(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i) months[static_cast<std::size_t>(i)] = month_of(init_month[static_cast<std::size_t>(i)], static_cast<std::size_t>(tau));
      const Eigen::MatrixXd clim = verify::climatology_ensemble(
          std::span<const double>(train_nino.data(), static_cast<std::size_t>(train_nino.size())), train_months, months,
          clim_members, c.cfg.seed() + static_cast<std::uint64_t>(tau));
      const Eigen::VectorXd ref_point = persistence ? Eigen::VectorXd(persist.col(tau - 1)) : Eigen::VectorXd::Zero(n);
      SampleLoss loss;
      double value = kNaN;
      const std::span<const double> fs_(f.data(), static_cast<std::size_t>(n)), ys(y.data(), static_cast<std::size_t>(n));
      switch (metric) {
        case verify::Metric::acc:
          value = verify::acc(fs_, ys);
          break;
        case verify::Metric::rmse:
          value = verify::rmse(fs_, ys);
          break;
        case verify::Metric::rmsess:
          for (Eigen::Index i = 0; i < n; ++i) {
            loss.model.push_back(std::pow(f(i) - y(i), 2));
            loss.reference.push_back(std::pow(ref_point(i) - y(i), 2));
          }
          if (persistence) {
            const double mr = std::accumulate(loss.reference.begin(), loss.reference.end(), 0.0);
            if (!(mr > 0.0)) throw NumericalError("persistence reference has zero error");
            value = 1.0 - std::sqrt(std::accumulate(loss.model.begin(), loss.model.end(), 0.0) / mr);
          } else {
            value = verify::rmsess(fs_, ys);
          }
          break;
        case verify::Metric::crps:
        case verify::Metric::crpss:
          for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::RowVectorXd row = e.row(i);
            loss.model.push_back(verify::crps_empirical(std::span<const double>(row.data(), static_cast<std::size_t>(members)), y(i)));
            if (persistence) {
              loss.reference.push_back(std::abs(ref_point(i) - y(i)));
            } else {
              const Eigen::RowVectorXd cr = clim.row(i);
              loss.reference.push_back(verify::crps_empirical(std::span<const double>(cr.data(), static_cast<std::size_t>(cr.size())), y(i)));
            }
          }
          {
            const double mm = std::accumulate(loss.model.begin(), loss.model.end(), 0.0) / static_cast<double>(n);
            const double mr = std::accumulate(loss.reference.begin(), loss.reference.end(), 0.0) / static_cast<double>(n);
            if (metric == verify::Metric::crps) {
              value = mm;
            } else {
              if (!(mr > 0.0)) throw NumericalError("reference CRPS is zero");
              value = 1.0 - mm / mr;
            }
          }
          break;
      }
      rep.values(static_cast<Eigen::Index>(j), 0) = value;
      if (!loss.model.empty() && n_boot > 0)
        (*rep.p_values)(static_cast<Eigen::Index>(j), 0) =
            verify::bootstrap_significance(loss.model, loss.reference, n_boot, c.cfg.seed()).p_value;
    }
    csv += csv.empty() ? rep.to_csv() : rep.to_csv().substr(rep.to_csv().find('\n') + 1);
    report_json.push_back(json::parse(rep.to_json()));
    c.out << "evaluate: " << verify::metric_name(metric);
    for (std::size_t j = 0; j < leads.size(); ++j) c.out << " tau" << leads[j] << '=' << rep.values(static_cast<Eigen::Index>(j), 0);
    c.out << '\n';
  }
  write_text(c.ws.dir / "skill_lead.csv", csv);
  write_text(c.ws.dir / "skill_lead.json", report_json.dump(2) + "\n");

  // Cellwise ACC map and CRPS significance against climatology at map_lead.
  const int map_lead = std::clamp(ej.at("map_lead").get<int>(), 1, horizon);
  const Eigen::MatrixXd map = basis.kept_map();
  const auto k_cols = map.cols();
  Eigen::MatrixXd mean_f(n, k_cols), tgt_f(n, k_cols);
  Eigen::MatrixXd crps_model(n, k_cols), crps_clim(n, k_cols);
  Eigen::MatrixXd train_stack = train_fields;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& f = *usable[static_cast<std::size_t>(i)];
    Eigen::MatrixXd e(members, k_cols);
    for (int m = 0; m < members; ++m) e.row(m) = f.members[static_cast<std::size_t>(m)].row(map_lead - 1) * map;
    mean_f.row(i) = e.colwise().mean();
    tgt_f.row(i) = fields.row(static_cast<Eigen::Index>(f.init_time) + map_lead);
    const int vm = month_of(f.init_month, static_cast<std::size_t>(map_lead));
    for (Eigen::Index k = 0; k < k_cols; ++k) {
      const Eigen::VectorXd col = e.col(k);
      crps_model(i, k) = verify::crps_empirical(std::span<const double>(col.data(), static_cast<std::size_t>(members)), tgt_f(i, k));
    }
    // Climatology members: training values of the verified month at fixed seeded draws.
    Rng rng = substream(c.cfg.seed() + 17, static_cast<std::uint64_t>(i));
    std::vector<Eigen::Index> rows_m;
    for (std::size_t t = 0; t < train_months.size(); ++t)
      if (train_months[t] == vm) rows_m.push_back(static_cast<Eigen::Index>(t));
    std::uniform_int_distribution<std::size_t> pick(0, rows_m.size() - 1);
    Eigen::MatrixXd ce(clim_members, k_cols);
    for (int m = 0; m < clim_members; ++m) ce.row(m) = train_stack.row(rows_m[pick(rng)]);
    for (Eigen::Index k = 0; k < k_cols; ++k) {
      const Eigen::VectorXd col = ce.col(k);
      crps_clim(i, k) = verify::crps_empirical(std::span<const double>(col.data(), static_cast<std::size_t>(clim_members)), tgt_f(i, k));
    }
  }
  verify::SkillReport cells;
  cells.metric = verify::Metric::acc;
  cells.axis = "cell";
  cells.leads = {map_lead};
  cells.n_samples = static_cast<std::size_t>(n);
  cells.values = verify::skill_map(mean_f, tgt_f, verify::Metric::acc).transpose();
  const auto nc = static_cast<Eigen::Index>(basis.n_valid());
  std::vector<std::vector<std::uint8_t>> masks(basis.vars.size(), std::vector<std::uint8_t>(a.n_cells(), 0));
  std::ostringstream sig;
  sig.precision(17);
  sig << "lead,cell,crps_model,crps_climatology,p_value,significant\n";
  for (Eigen::Index k = 0; k < k_cols; ++k) {
    const Eigen::VectorXd cm = crps_model.col(k), cc = crps_clim.col(k);
    const auto b = verify::bootstrap_significance(std::vector<double>(cm.data(), cm.data() + n),
                                                  std::vector<double>(cc.data(), cc.data() + n), std::max(n_boot, 2),
                                                  c.cfg.seed() + static_cast<std::uint64_t>(k));
    const bool better = b.p_value < 0.05 && b.mean_a < b.mean_b;
    masks[static_cast<std::size_t>(k / nc)][basis.cell_index[static_cast<std::size_t>(k % nc)]] = better ? 1 : 0;
    sig << map_lead << ',' << k << ',' << cm.mean() << ',' << cc.mean() << ',' << b.p_value << ',' << int(better) << '\n';
  }
  write_text(c.ws.dir / "significance_map.csv", sig.str());
  write_text(c.ws.dir / "skill_map.csv", cells.to_csv());
  dataprep::write_grid(c.ws.dir / "significance_mask.limg", verify::mask_grid(a, masks), dataprep::GridFormat::flat_binary);

  verify::LeadForecasts lf{mean, target, init_month};
  verify::SkillReport seasonal;
  seasonal.metric = verify::Metric::acc;
  seasonal.axis = "month";
  seasonal.n_samples = static_cast<std::size_t>(n);
  seasonal.values = verify::seasonal_skill_table(lf, verify::Metric::acc);
  write_text(c.ws.dir / "skill_seasonal.csv", seasonal.to_csv());
  return ok;
}

int cmd_oic(Context& c, const std::string& checkpoint) {
  const auto& oj = c.cfg.tree().at("oic");
  const int month = oj.at("month").get<int>();
  const int tau = oj.at("tau").get<int>();
  const bool all_months = oj.at("all_months").get<bool>();
  std::vector<std::pair<double, double>> bands;
  for (const auto& b : oj.at("bands")) bands.emplace_back(b.at(0).get<double>(), b.at(1).get<double>());
  const auto op = load_lim(c.ws.lim());
  const auto basis = load_basis(c.ws);
  std::optional<hybrid::HybridModel> model;
  if (!checkpoint.empty()) {
    model = hybrid::load_hybrid(checkpoint).first;
    if (model->horizon() < tau) throw ConfigError("hybrid horizon shorter than oic.tau");
  }
  const auto s = lim::optimal_initial_condition(op, month, tau);
  const Eigen::MatrixXd g = lim::propagator(op, month, tau);
  const double sigma_svd = Eigen::JacobiSVD<Eigen::MatrixXd>(g).singularValues()(0);
  c.out << "oic: month " << month << " tau " << tau << " sigma1 = " << num(s.sigma1) << " (SVD " << num(sigma_svd)
        << ")" << (s.degenerate ? " degenerate" : "") << '\n';
  {
    std::ostringstream os;
    os.precision(17);
    os << "pc_index,oic,evolved\n";
    for (Eigen::Index k = 0; k < s.oic.size(); ++k) os << k << ',' << s.oic(k) << ',' << s.evolved(k) << '\n';
    write_text(c.ws.dir / "oic.csv", os.str());
  }
  const auto a = load_anomalies(c.ws);
  Eigen::MatrixXd pattern(2, s.oic.size());
  pattern.row(0) = s.oic.transpose();
  pattern.row(1) = s.evolved.transpose();
  const Eigen::MatrixXd stacked = pattern * basis.kept_map();
  dataprep::write_grid(c.ws.dir / "oic_pattern.limg", eof::unstack_fields(stacked, basis, 1, month),
                       dataprep::GridFormat::flat_binary);

  // Stratified skill on the test split.
  const auto z = load_pcs(c.ws.pcs("test"));
  const auto range = split_range(c.ws, "test");
  const Eigen::MatrixXd fields = eof::stacked_fields(a.slice(range));
  const auto [nino_f, nino_pc] = nino_functionals(a, basis, c.cfg.region());
  const auto states =
      experiment::growth_states(op, z, tau, all_months ? std::nullopt : std::optional<int>(month));
  const auto& init = states.init;
  const auto& proj = states.projection;
  const auto groups = verify::stratify_by_optimal_growth(proj, bands);
  const int members = c.cfg.tree().at("forecast").at("members").get<int>();
  const auto lim_fc = experiment::lim_forecasts(op, z, init, members, tau, c.cfg.seed());
  std::vector<lim::EnsembleForecast> hyb_fc;
  if (model) hyb_fc = experiment::hybrid_forecasts(*model, z, init, c.cfg.seed());
  auto band_acc = [&](const std::vector<lim::EnsembleForecast>& fc, const std::vector<std::size_t>& idx) {
    std::vector<double> f, y;
    for (auto i : idx) {
      f.push_back(fc[i].mean().row(tau - 1).dot(nino_pc));
      y.push_back(fields.row(static_cast<Eigen::Index>(init[i]) + tau).dot(nino_f));
    }
    return verify::acc(f, y);
  };
  std::ostringstream os;
  os.precision(17);
  os << "band_lo,band_hi,n,acc_lim" << (hyb_fc.empty() ? "" : ",acc_hybrid") << '\n';
  for (std::size_t b = 0; b < bands.size(); ++b) {
    os << bands[b].first << ',' << bands[b].second << ',' << groups[b].size() << ',' << band_acc(lim_fc, groups[b]);
    if (!hyb_fc.empty()) os << ',' << band_acc(hyb_fc, groups[b]);
    os << '\n';
    c.out << "oic: band [" << bands[b].first << ", " << bands[b].second << ") n=" << groups[b].size()
          << " ACC(LIM)=" << band_acc(lim_fc, groups[b]) << '\n';
  }
  write_text(c.ws.dir / "fig6_oic_bands.csv", os.str());
  json j{{"month", month}, {"tau", tau}, {"sigma1", s.sigma1}, {"sigma1_svd", sigma_svd}, {"degenerate", s.degenerate}};
  write_text(c.ws.dir / "oic.json", j.dump(2) + "\n");
  return ok;
}

int cmd_composites(Context& c, const std::string& checkpoint) {
  const auto& cj = c.cfg.tree().at("composites");
  const int lead = cj.at("lead").get<int>();
  if (lead < 1) throw ConfigError("composites.lead must be >= 1");
  const auto op = load_lim(c.ws.lim());
  const auto basis = load_basis(c.ws);
  const auto a = load_anomalies(c.ws);
  const auto z = load_pcs(c.ws.pcs("test"));
  const Eigen::MatrixXd fields = eof::stacked_fields(a.slice(split_range(c.ws, "test")));
  std::optional<hybrid::HybridModel> hm;
  if (!checkpoint.empty()) hm = hybrid::load_hybrid(checkpoint).first;
  const std::optional<int> month =
      cj.at("all_months").get<bool>() ? std::nullopt : std::optional<int>(cj.at("month").get<int>());
  const auto r = experiment::asymmetry_experiment(op, hm ? &*hm : nullptr, z, fields, basis, lead,
                                                  cj.at("band_lower").get<double>(), month,
                                                  c.cfg.tree().at("forecast").at("members").get<int>(), c.cfg.seed(),
                                                  cj.at("alpha").get<double>(), cj.at("sign_paired").get<bool>());
  std::vector<std::pair<std::string, const verify::CompositePair*>> sources{{"target", &r.target}, {"cs_lim", &r.lim}};
  if (r.hybrid) sources.emplace_back("hybrid", &*r.hybrid);

  std::ostringstream os;
  os.precision(17);
  os << "source,var,lat,lon,wc_minus,wc_plus,sig_minus,sig_plus\n";
  const auto nc = static_cast<Eigen::Index>(basis.n_valid());
  for (const auto& [name, comp] : sources) {
    int sig_plus = 0;
    for (Eigen::Index k = 0; k < comp->wc_plus.size(); ++k) {
      const auto cell = basis.cell_index[static_cast<std::size_t>(k % nc)];
      const auto v = static_cast<std::size_t>(k / nc);
      os << name << ',' << basis.vars[v].name << ',' << a.lat[cell / a.n_lon()] << ',' << a.lon[cell % a.n_lon()] << ','
         << comp->wc_minus(k) << ',' << comp->wc_plus(k) << ',' << int(comp->mask_minus[static_cast<std::size_t>(k)])
         << ',' << int(comp->mask_plus[static_cast<std::size_t>(k)]) << '\n';
      sig_plus += comp->mask_plus[static_cast<std::size_t>(k)];
    }
    dataprep::write_grid(c.ws.dir / ("composite_" + name + "_wc_plus.limg"),
                         eof::unstack_fields(comp->wc_plus.transpose(), basis, 1, 1), dataprep::GridFormat::flat_binary);
    dataprep::write_grid(c.ws.dir / ("composite_" + name + "_wc_minus.limg"),
                         eof::unstack_fields(comp->wc_minus.transpose(), basis, 1, 1), dataprep::GridFormat::flat_binary);
    c.out << "composites: " << name << " warm=" << comp->n_warm << " cold=" << comp->n_cold << " W+C significant in "
          << sig_plus << '/' << comp->wc_plus.size() << " cells\n";
  }
  write_text(c.ws.dir / "fig7_composites.csv", os.str());
  return ok;
}

int cmd_datasweep(Context& c) {
  auto sc = c.cfg.sweep();
  if (sc.cache_dir.empty()) sc.cache_dir = c.ws.dir / "datasweep_cache";
  const auto rows = experiment::run_datasweep(sc, [&](const std::string& line) { c.out << "datasweep: " << line << '\n' << std::flush; });
  write_text(c.ws.dir / "fig1_datasweep.csv", experiment::sweep_to_csv(rows, sc.lead));
  return ok;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"limcast: hybrid LIM-LSTM forecasting pipeline", "limcast"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir = ".";
  std::optional<std::uint64_t> seed;
  int threads = 1;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "Global seed");
  app.add_option("--out-dir", out_dir, "Workspace directory");
  app.add_option("--threads", threads, "Worker threads (recorded; kernels are single-threaded)")->check(CLI::PositiveNumber);
  app.add_option("--set", sets, "Override any config field: section.key=value");

  std::map<std::string, std::string> flags;  // dotted key -> raw value
  auto flag = [&](CLI::App* sub, const std::string& name, const std::string& key, const std::string& help) {
    sub->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
  };
  std::string checkpoint, output, forecasts, pcs, truth;

  auto* synth_gen = app.add_subcommand("synth-gen", "Generate a synthetic record");
  flag(synth_gen, "--years", "synth.years", "Record length in years");
  flag(synth_gen, "--c-frac", "synth.c_frac", "Nonlinearity as a fraction of the stability bound");
  flag(synth_gen, "--dim", "synth.d", "State dimension");
  auto* prepare = app.add_subcommand("prepare", "Detrend, remove climatology, split and fit EOFs");
  flag(prepare, "--input", "data.input", "Input grid (.limg or .csv)");
  auto* fit = app.add_subcommand("fit-lim", "Estimate a LIM from training PCs");
  flag(fit, "--kind", "lim.kind", "stationary or cyclostationary");
  flag(fit, "--clip-radius", "lim.clip_radius", "Clip unstable monthly propagators to this radius (0 = off)");
  fit->add_option("--pcs", pcs, "PC file to fit instead of pcs_train.bin");
  fit->add_option("--truth", truth, "synth_system.json for a recovery-error report");
  auto* train = app.add_subcommand("train", "Train hybrid or pc-lstm models");
  flag(train, "--model", "train.model", "hybrid or pc-lstm");
  flag(train, "--seeds", "train.seeds", "Number of seeds");
  flag(train, "--epochs", "train.epochs", "Epochs");
  auto* forecast = app.add_subcommand("forecast", "Ensemble forecasts from a checkpoint or LIM");
  forecast->add_option("--checkpoint", checkpoint, "Model checkpoint or LIM file (default lim.limo)");
  forecast->add_option("--output", output, "Output CSV");
  flag(forecast, "--split", "forecast.split", "train, val or test");
  flag(forecast, "--init-begin", "forecast.init_begin", "First initial index");
  flag(forecast, "--init-end", "forecast.init_end", "End initial index (-1 = all)");
  flag(forecast, "--stride", "forecast.stride", "Initial-time stride");
  auto* evaluate = app.add_subcommand("evaluate", "Skill reports for a forecast file");
  evaluate->add_option("--forecasts", forecasts, "Forecast CSV");
  flag(evaluate, "--split", "forecast.split", "Split the forecasts were made on");
  flag(evaluate, "--reference", "evaluate.reference", "climatology or persistence");
  auto* oic = app.add_subcommand("oic", "Optimal initial condition and stratified skill");
  flag(oic, "--month", "oic.month", "Initial month");
  flag(oic, "--tau", "oic.tau", "Lead in months");
  oic->add_option("--checkpoint", checkpoint, "Hybrid checkpoint to score alongside the LIM");
  auto* comp = app.add_subcommand("composites", "Warm/cold composites of targets and forecasts");
  flag(comp, "--lead", "composites.lead", "Lead in months");
  comp->add_option("--checkpoint", checkpoint, "Hybrid checkpoint");
  auto* sweep = app.add_subcommand("datasweep", "Skill against training length");
  flag(sweep, "--n-seeds", "datasweep.n_seeds", "Seeds per length");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return config_error;
  }

  try {
    Context c{RunConfig{}, Workspace{out_dir}, out};
    if (!config_path.empty()) c.cfg.merge_file(config_path);
    for (const auto& [k, v] : flags) c.cfg.set(k, v);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      c.cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) c.cfg.set("seed", std::to_string(*seed));
    c.cfg.set("threads", std::to_string(threads));
    (void)c.cfg.train();  // validates the train section for every command
    echo_config(c.ws, c.cfg);

    const auto* sub = app.get_subcommands().front();
    const auto name = sub->get_name();
    if (name == "synth-gen") return cmd_synth_gen(c);
    if (name == "prepare") return cmd_prepare(c);
    if (name == "fit-lim") return cmd_fit_lim(c, pcs, truth);
    if (name == "train") return cmd_train(c);
    if (name == "forecast") return cmd_forecast(c, checkpoint, output);
    if (name == "evaluate") return cmd_evaluate(c, forecasts);
    if (name == "oic") return cmd_oic(c, checkpoint);
    if (name == "composites") return cmd_composites(c, checkpoint);
    if (name == "datasweep") return cmd_datasweep(c);
    err << "error: unknown subcommand " << name << '\n';
    return config_error;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return config_error;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return numerical_error;
  } catch (const nlohmann::json::exception& e) {
    err << "data error: " << e.what() << '\n';
    return data_error;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return failure;
  }
}

}  // namespace limcast::cli
