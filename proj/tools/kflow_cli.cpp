// kflow: train CFM fields and Koopman generators on 2D tasks, sample, evaluate.
//
// Exit codes: 0 success, 2 usage, 3 data/IO, 4 numerical failure.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "kflow/kflow.hpp"

using namespace kflow;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4 };

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

// ---------------------------------------------------------------------------

struct TrainCfmArgs {
  std::string prior = "gauss";
  std::string target;
  std::string path = "ot";
  double sigma = -1.0;
  std::size_t steps = 20000;
  std::size_t batch = 256;
  double lr = 1e-3;
  std::size_t hidden = 64;
  std::size_t depth = 3;
  std::uint64_t seed = 1;
  std::size_t log_every = 1000;
  std::string out;
};

int run_train_cfm(const TrainCfmArgs& a) {
  CfmTrainConfig cfg;
  cfg.prior = Distribution2D::standard(dist_kind_from_string(a.prior));
  cfg.target = Distribution2D::standard(dist_kind_from_string(a.target));
  cfg.path = ConditionalPath::standard(path_kind_from_string(a.path));
  if (a.sigma >= 0) cfg.path.sigma = a.sigma;
  cfg.spec = MlpSpec{3, a.hidden, a.depth, 2};
  cfg.steps = a.steps;
  cfg.batch = a.batch;
  cfg.lr = a.lr;
  cfg.seed = a.seed;
  cfg.spec.validate();

  const auto t0 = clock_type::now();
  double window = 0.0, last = 0.0;
  std::size_t window_n = 0;
  const VectorFieldModel model = train_cfm(cfg, nullptr, [&](std::size_t step, double loss) {
    window += loss;
    last = loss;
    if (++window_n == a.log_every) {
      std::fprintf(stderr, "step %zu  cfm_loss %.6g\n", step + 1, window / static_cast<double>(window_n));
      window = 0.0;
      window_n = 0;
    }
  });
  TaskInfo task{cfg.prior, cfg.target, cfg.path, cfg.seed};
  save_checkpoint(a.out, to_checkpoint(model, task));
  std::printf("final_loss %s\nelapsed_s %.3f\ncheckpoint %s\n", fmt_double(last).c_str(), seconds_since(t0),
              a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainKoopmanArgs {
  std::string cfm;
  std::string out;
  std::size_t p_learned = 28;
  std::size_t hidden = 64;
  std::size_t depth = 3;
  std::string losses = "generator,consistency";
  double w_generator = 1.0;
  double w_consistency = 1.0;
  double w_prediction = 1.0;
  std::string schedule = "reverse";
  double ramp = 0.5;
  std::size_t steps = 10000;
  std::size_t batch = 256;
  std::size_t consistency_batch = 256;
  double lr_encoder = 1e-3;
  double lr_operator = 1e-4;
  double operator_init_std = 1e-3;
  std::string source = "uniform";
  std::size_t n_uniform = 200000;
  std::size_t n_trajectories = 4096;
  std::string trajectories;
  std::string save_trajectories;
  std::uint64_t seed = 1;
  std::size_t log_every = 1000;
};

int run_train_koopman(const TrainKoopmanArgs& a) {
  TaskInfo task;
  const Checkpoint cfm_ck = load_checkpoint(a.cfm);
  const VectorFieldModel vf = vector_field_from_checkpoint(cfm_ck, &task);
  const std::uint32_t vf_sum = cfm_ck.meta.at("checksum").get<std::uint32_t>();

  KoopmanTrainConfig cfg;
  cfg.prior = task.prior;
  cfg.p_learned = a.p_learned;
  cfg.encoder = MlpSpec{3, a.hidden, a.depth, std::max<std::size_t>(a.p_learned, 1)};
  cfg.weights = {0.0, 0.0, 0.0};
  for (const auto& name : split_list(a.losses)) {
    if (name == "generator") cfg.weights.generator = a.w_generator;
    else if (name == "consistency") cfg.weights.consistency = a.w_consistency;
    else if (name == "prediction") cfg.weights.prediction = a.w_prediction;
    else throw ContractViolation("unknown loss '" + name + "' (generator, consistency, prediction)");
  }
  if (cfg.weights.generator == 0.0 && cfg.weights.consistency == 0.0 && cfg.weights.prediction == 0.0)
    throw ContractViolation("--losses selects no loss term");
  cfg.schedule.mode = schedule_mode_from_string(a.schedule);
  cfg.schedule.ramp = a.ramp;
  cfg.steps = a.steps;
  cfg.batch = a.batch;
  cfg.consistency_batch = a.consistency_batch;
  cfg.lr_encoder = a.lr_encoder;
  cfg.lr_operator = a.lr_operator;
  cfg.operator_init_std = a.operator_init_std;
  cfg.source = data_source_from_string(a.source);
  cfg.n_uniform = a.n_uniform;
  cfg.n_trajectories = a.n_trajectories;
  cfg.seed = a.seed;
  cfg.log_every = a.log_every;

  const auto t0 = clock_type::now();
  std::optional<TrajectorySet> traj;
  if (!a.trajectories.empty()) {
    std::uint32_t stored = 0;
    traj = load_trajectories(a.trajectories, &stored);
    if (stored != vf_sum)
      throw IoError(a.trajectories + ": trajectories were generated by a different vector field checkpoint");
  } else if (!a.save_trajectories.empty() || cfg.weights.consistency != 0.0 || cfg.source == DataSource::Trajectories) {
    traj = generate_trajectories(vf, cfg.prior, cfg.n_trajectories, Rng::derive(cfg.seed, 21).next());
  }
  if (traj && !a.save_trajectories.empty()) save_trajectories(a.save_trajectories, *traj, vf_sum);

  KoopmanTrainReport report;
  const KoopmanModel model =
      train_koopman(vf, cfg, traj ? &*traj : nullptr, &report, [](std::size_t step, const LossComponents& l) {
        std::fprintf(stderr, "step %zu  generator %.6g  consistency %.6g  prediction %.6g  total %.6g\n", step,
                     l.generator, l.consistency, l.prediction, l.total);
      });
  task.seed = a.seed;
  save_checkpoint(a.out, to_checkpoint(model, task, vf_sum));
  std::printf("val_generator_loss %s -> %s\np_total %zu\nelapsed_s %.3f\ncheckpoint %s\n",
              fmt_double(report.initial_val_generator).c_str(), fmt_double(report.final_val_generator).c_str(),
              model.p_total(), seconds_since(t0), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string model;
  std::size_t n = 2048;
  std::vector<double> t{1.0};
  std::uint64_t seed = 0;
  std::string out;
};

int run_sample(const SampleArgs& a) {
  TaskInfo task;
  const KoopmanModel model = koopman_from_checkpoint(load_checkpoint(a.model), &task);
  const SampleRun run = koopman_sample(model, task.prior, a.n, a.t, a.seed);
  CsvWriter w(a.out, {"t", "x", "y", "sample_id"});
  for (std::size_t q = 0; q < run.t_query.size(); ++q)
    for (std::size_t i = 0; i < run.n; ++i) w.row(run.t_query[q], run.states(i, q, 0), run.states(i, q, 1), i);
  w.close();
  std::printf("samples %zu\ntimes %zu\nwall_ns %lld\n", run.n, run.t_query.size(),
              static_cast<long long>(run.timings.total_ns()));
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalMmdArgs {
  std::string a, b;
  double bandwidth = 0.0;
  double t = -1.0;
};

int run_eval_mmd(const EvalMmdArgs& a) {
  std::optional<double> t;
  if (a.t >= 0) t = a.t;
  const Tensor pa = read_points_csv(a.a, t);
  const Tensor pb = read_points_csv(a.b, t);
  std::optional<double> h;
  if (a.bandwidth > 0) h = a.bandwidth;
  const MmdResult r = mmd(pa, pb, h);
  std::printf("mmd2 %s\nbandwidth %s\nn_a %zu\nn_b %zu\nestimator %s\n", fmt_double(r.value).c_str(),
              fmt_double(r.kernel_bandwidth).c_str(), r.n_a, r.n_b, r.estimator.c_str());
  if (r.degenerate) std::printf("degenerate 1\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  std::string koopman, cfm;
  std::size_t n = 2048;
  std::string steps = "1,5,10,20,50,100";
  std::size_t repetitions = 3;
  bool rk4 = false;
  std::uint64_t seed = 7;
  std::string out, json_out;
};

int run_bench(const BenchArgs& a) {
  TaskInfo task;
  const KoopmanModel koop = koopman_from_checkpoint(load_checkpoint(a.koopman), &task);
  const VectorFieldModel vf = vector_field_from_checkpoint(load_checkpoint(a.cfm));
  BenchConfig cfg;
  cfg.prior = task.prior;
  cfg.target = task.target;
  cfg.n = a.n;
  cfg.step_grid.clear();
  for (const auto& s : split_list(a.steps)) cfg.step_grid.push_back(std::stoul(s));
  cfg.repetitions = a.repetitions;
  cfg.include_rk4 = a.rk4;
  cfg.seed = a.seed;
  const auto rows = bench_sampling(koop, vf.field(), cfg);

  std::printf("method,steps,wall_ns,samples_per_sec,mmd\n");
  std::optional<CsvWriter> w;
  if (!a.out.empty()) w.emplace(a.out, std::vector<std::string>{"method", "steps", "wall_ns", "samples_per_sec", "mmd"});
  json summary = {{"n", cfg.n}, {"seed", cfg.seed}, {"repetitions", cfg.repetitions}, {"rows", json::array()}};
  std::int64_t koop_ns = 0, euler100_ns = 0;
  for (const auto& r : rows) {
    std::printf("%s,%zu,%lld,%s,%s\n", r.method.c_str(), r.steps, static_cast<long long>(r.wall_ns),
                fmt_double(r.samples_per_sec).c_str(), fmt_double(r.mmd).c_str());
    if (w) w->row(r.method, r.steps, r.wall_ns, r.samples_per_sec, r.mmd);
    summary["rows"].push_back({{"method", r.method},
                               {"steps", r.steps},
                               {"wall_ns", r.wall_ns},
                               {"samples_per_sec", r.samples_per_sec},
                               {"mmd", r.mmd},
                               {"repetitions_ns", r.repetitions_ns}});
    if (r.method == "koopman") koop_ns = r.wall_ns;
    if (r.method == "euler" && r.steps == 100) euler100_ns = r.wall_ns;
  }
  if (w) w->close();
  if (koop_ns > 0 && euler100_ns > 0)
    summary["speedup_vs_euler100"] = static_cast<double>(euler100_ns) / static_cast<double>(koop_ns);
  if (!a.json_out.empty()) write_file(a.json_out, summary.dump(2) + "\n");
  return kOk;
}

// ---------------------------------------------------------------------------

struct SpectrumArgs {
  std::string model;
  std::size_t top = 0;
  std::uint64_t seed = 0;
  std::vector<double> x0;
  std::string out;
};

int run_spectrum(const SpectrumArgs& a) {
  TaskInfo task;
  const KoopmanModel model = koopman_from_checkpoint(load_checkpoint(a.model), &task);
  Tensor x0;
  if (!a.x0.empty()) {
    if (a.x0.size() != 2) throw ContractViolation("--x0 takes exactly two values");
    x0 = Tensor({1, 2}, std::vector<double>(a.x0));
  } else {
    x0 = sample(task.prior, 1, a.seed);
  }
  const Tensor z0 = encode(model, x0, Tensor({1}, 0.0));
  const SpectralDecomposition d = spectral_decompose(model.generator, z0.reshaped({model.p_total()}));
  const std::size_t top = a.top == 0 ? d.alphas.size() : std::min(a.top, d.alphas.size());

  std::vector<std::string> lines;
  for (std::size_t i = 0; i < top; ++i) {
    const Complex l = d.pairs.values[i], al = d.alphas[i];
    lines.push_back(std::to_string(i) + "," + fmt_double(l.real()) + "," + fmt_double(l.imag()) + "," +
                    fmt_double(al.real()) + "," + fmt_double(al.imag()));
  }
  if (a.out.empty()) {
    std::printf("index,re,im,alpha_re,alpha_im\n");
    for (const auto& l : lines) std::printf("%s\n", l.c_str());
  } else {
    std::string text = "index,re,im,alpha_re,alpha_im\n";
    for (const auto& l : lines) text += l + "\n";
    write_file(a.out, text);
    std::printf("modes %zu\ncondition %s\n", top, fmt_double(d.condition).c_str());
  }
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrajCompareArgs {
  std::string koopman, cfm;
  std::size_t n = 16;
  std::size_t points = kTrajectorySteps + 1;
  std::uint64_t seed = 0;
  std::string out;
};

int run_traj_compare(const TrajCompareArgs& a) {
  TaskInfo task;
  const KoopmanModel koop = koopman_from_checkpoint(load_checkpoint(a.koopman), &task);
  const VectorFieldModel vf = vector_field_from_checkpoint(load_checkpoint(a.cfm));
  require(a.points >= 2 && a.points <= kReferenceSteps + 1 && kReferenceSteps % (a.points - 1) == 0,
          "--points must be k+1 for some divisor k of 100");
  const Tensor x0 = sample(task.prior, a.n, a.seed);
  std::vector<double> times(a.points);
  for (std::size_t q = 0; q < a.points; ++q) times[q] = static_cast<double>(q) / static_cast<double>(a.points - 1);
  const SampleRun koop_run = koopman_sample_from(koop, x0, times);
  const Tensor ref = integrate(vf, x0, kReferenceSteps, Integrator::RK4);
  const std::size_t stride = kReferenceSteps / (a.points - 1);

  CsvWriter w(a.out, {"traj_id", "t", "koop_x", "koop_y", "cfm_x", "cfm_y"});
  for (std::size_t i = 0; i < a.n; ++i)
    for (std::size_t q = 0; q < a.points; ++q)
      w.row(i, times[q], koop_run.states(i, q, 0), koop_run.states(i, q, 1), ref(i, q * stride, 0),
            ref(i, q * stride, 1));
  w.close();
  std::printf("trajectories %zu\npoints %zu\n", a.n, a.points);
  return kOk;
}

// ---------------------------------------------------------------------------

struct DatasetArgs {
  std::string dist;
  std::size_t n = 2048;
  std::uint64_t seed = 0;
  std::string out;
};

int run_dataset(const DatasetArgs& a) {
  write_points_csv(a.out, sample(Distribution2D::standard(dist_kind_from_string(a.dist)), a.n, a.seed));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Koopman-accelerated flow matching on 2D tasks"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value configuration file; flags on the command line take precedence");
  app.allow_config_extras(false);

  int status = kOk;
  std::function<int()> action;

  TrainCfmArgs tc;
  auto* c_tc = app.add_subcommand("train-cfm", "Train a CFM vector field and write its checkpoint");
  c_tc->add_option("--prior", tc.prior, "Prior distribution (gauss, 8g, moons, swissroll)")->capture_default_str();
  c_tc->add_option("--target", tc.target, "Target distribution")->required();
  c_tc->add_option("--path", tc.path, "Conditional path (ot, gauss)")->capture_default_str();
  c_tc->add_option("--sigma", tc.sigma, "Path noise level (default: 0.01 for ot, 0.1 for gauss)");
  c_tc->add_option("--steps", tc.steps)->capture_default_str();
  c_tc->add_option("--batch", tc.batch)->capture_default_str();
  c_tc->add_option("--lr", tc.lr)->capture_default_str();
  c_tc->add_option("--hidden", tc.hidden, "Hidden width")->capture_default_str();
  c_tc->add_option("--depth", tc.depth, "Number of hidden layers")->capture_default_str();
  c_tc->add_option("--seed", tc.seed)->capture_default_str();
  c_tc->add_option("--log-every", tc.log_every)->capture_default_str()->check(CLI::PositiveNumber);
  c_tc->add_option("--out", tc.out, "Checkpoint path")->required();
  c_tc->callback([&] { action = [&] { return run_train_cfm(tc); }; });

  TrainKoopmanArgs tk;
  auto* c_tk = app.add_subcommand("train-koopman", "Learn a Koopman generator for a trained CFM field");
  c_tk->add_option("--cfm", tk.cfm, "Vector field checkpoint")->required();
  c_tk->add_option("--out", tk.out, "Checkpoint path")->required();
  c_tk->add_option("--p-learned", tk.p_learned, "Number of learned observables")->capture_default_str();
  c_tk->add_option("--hidden", tk.hidden)->capture_default_str();
  c_tk->add_option("--depth", tk.depth)->capture_default_str();
  c_tk->add_option("--losses", tk.losses, "Comma list of generator, consistency, prediction")->capture_default_str();
  c_tk->add_option("--w-generator", tk.w_generator)->capture_default_str();
  c_tk->add_option("--w-consistency", tk.w_consistency)->capture_default_str();
  c_tk->add_option("--w-prediction", tk.w_prediction)->capture_default_str();
  c_tk->add_option("--schedule", tk.schedule, "Consistency start-time schedule (reverse, forward, random)")
      ->capture_default_str();
  c_tk->add_option("--ramp", tk.ramp, "Fraction of steps over which the schedule moves")->capture_default_str();
  c_tk->add_option("--steps", tk.steps)->capture_default_str();
  c_tk->add_option("--batch", tk.batch)->capture_default_str();
  c_tk->add_option("--consistency-batch", tk.consistency_batch)->capture_default_str();
  c_tk->add_option("--lr-encoder", tk.lr_encoder)->capture_default_str();
  c_tk->add_option("--lr-operator", tk.lr_operator)->capture_default_str();
  c_tk->add_option("--operator-init-std", tk.operator_init_std)->capture_default_str();
  c_tk->add_option("--source", tk.source, "Generator-loss samples (uniform, trajectories)")->capture_default_str();
  c_tk->add_option("--n-uniform", tk.n_uniform)->capture_default_str();
  c_tk->add_option("--n-trajectories", tk.n_trajectories)->capture_default_str();
  c_tk->add_option("--trajectories", tk.trajectories, "Load a trajectory corpus (<base>.json + <base>.bin)");
  c_tk->add_option("--save-trajectories", tk.save_trajectories, "Write the trajectory corpus used for training");
  c_tk->add_option("--seed", tk.seed)->capture_default_str();
  c_tk->add_option("--log-every", tk.log_every)->capture_default_str()->check(CLI::PositiveNumber);
  c_tk->callback([&] { action = [&] { return run_train_koopman(tk); }; });

  SampleArgs sa;
  auto* c_sa = app.add_subcommand("sample", "One-step Koopman sampling to CSV (t,x,y,sample_id)");
  c_sa->add_option("--model", sa.model, "Koopman checkpoint")->required();
  c_sa->add_option("--n", sa.n)->capture_default_str()->check(CLI::PositiveNumber);
  c_sa->add_option("--t", sa.t, "Query times in [0,1], ascending")->delimiter(',')->capture_default_str();
  c_sa->add_option("--seed", sa.seed)->capture_default_str();
  c_sa->add_option("--out", sa.out)->required();
  c_sa->callback([&] { action = [&] { return run_sample(sa); }; });

  EvalMmdArgs em;
  auto* c_em = app.add_subcommand("eval-mmd", "Biased RBF MMD^2 between two point CSVs");
  c_em->add_option("--a", em.a)->required();
  c_em->add_option("--b", em.b)->required();
  c_em->add_option("--bandwidth", em.bandwidth, "Kernel bandwidth (default: median heuristic)");
  c_em->add_option("--t", em.t, "Row filter for files with a t column (default: largest t)");
  c_em->callback([&] { action = [&] { return run_eval_mmd(em); }; });

  BenchArgs be;
  auto* c_be = app.add_subcommand("bench", "Koopman one-step vs Euler/RK4 sampling throughput");
  c_be->add_option("--koopman", be.koopman)->required();
  c_be->add_option("--cfm", be.cfm)->required();
  c_be->add_option("--n", be.n)->capture_default_str()->check(CLI::PositiveNumber);
  c_be->add_option("--steps", be.steps, "Comma list of ODE step counts")->capture_default_str();
  c_be->add_option("--repetitions", be.repetitions)->capture_default_str();
  c_be->add_flag("--rk4", be.rk4, "Also time RK4");
  c_be->add_option("--seed", be.seed)->capture_default_str();
  c_be->add_option("--out", be.out, "CSV output");
  c_be->add_option("--json", be.json_out, "JSON summary output");
  c_be->callback([&] { action = [&] { return run_bench(be); }; });

  SpectrumArgs sp;
  auto* c_sp = app.add_subcommand("spectrum", "Eigenvalues of L and modal coefficients of one encoded prior draw");
  c_sp->add_option("--model", sp.model)->required();
  c_sp->add_option("--top", sp.top, "Number of leading modes (0 = all)")->capture_default_str();
  c_sp->add_option("--seed", sp.seed, "Seed of the prior draw")->capture_default_str();
  c_sp->add_option("--x0", sp.x0, "Explicit initial state x,y")->delimiter(',')->expected(2);
  c_sp->add_option("--out", sp.out, "CSV output (default: stdout)");
  c_sp->callback([&] { action = [&] { return run_spectrum(sp); }; });

  TrajCompareArgs tr;
  auto* c_tr = app.add_subcommand("traj-compare", "Paired Koopman and RK4 CFM trajectories to CSV");
  c_tr->add_option("--koopman", tr.koopman)->required();
  c_tr->add_option("--cfm", tr.cfm)->required();
  c_tr->add_option("--n", tr.n)->capture_default_str()->check(CLI::PositiveNumber);
  c_tr->add_option("--points", tr.points, "Time points per trajectory")->capture_default_str();
  c_tr->add_option("--seed", tr.seed)->capture_default_str();
  c_tr->add_option("--out", tr.out)->required();
  c_tr->callback([&] { action = [&] { return run_traj_compare(tr); }; });

  DatasetArgs ds;
  auto* c_ds = app.add_subcommand("dataset", "Draw reference samples of a distribution to CSV (x,y)");
  c_ds->add_option("--dist", ds.dist)->required();
  c_ds->add_option("--n", ds.n)->capture_default_str()->check(CLI::PositiveNumber);
  c_ds->add_option("--seed", ds.seed)->capture_default_str();
  c_ds->add_option("--out", ds.out)->required();
  c_ds->callback([&] { action = [&] { return run_dataset(ds); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return kUsage;
  }

  try {
    status = action();
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const UnsupportedOp& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumerical;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: bad value: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return status;
}
