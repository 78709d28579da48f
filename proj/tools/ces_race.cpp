#include <iostream>

#include "CLI11.hpp"
#include "cesrace/cli.hpp"

using namespace cesrace;
using namespace cesrace::cli;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::uint64_t seed = 1;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key = value config file");
  sub->add_option("--set", c.sets, "config override KEY=VALUE (repeatable)");
  sub->add_option("--seed", c.seed, "random seed");
}

void add_inputs(CLI::App* sub, InputPaths& in) {
  sub->add_option("--panel", in.panel, "panel.csv")->required();
  sub->add_option("--groups", in.groups, "groups.csv for composition adjustment");
  sub->add_option("--cpi", in.cpi, "cpi.csv for the external return rate");
}

// Flag values land in the config under `key` only when given on the command
// line, so they override the file without masking it.
template <class T>
void flag(CLI::App* sub, const std::string& name, const std::string& key, std::vector<std::function<void(Config&)>>& f,
          std::shared_ptr<T> store, const std::string& help) {
  auto* opt = sub->add_option(name, *store, help);
  f.push_back([opt, store, key](Config& c) {
    if (opt->count() == 0) return;
    std::ostringstream os;
    os << *store;
    c.set(key, os.str());
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ces_race: nested CES estimation and decomposition pipeline"};
  app.require_subcommand(1);
  Common common;
  std::vector<std::function<void(Config&)>> flags;

  SimulateArgs sim;
  auto* s_sim = app.add_subcommand("simulate", "write a synthetic panel");
  add_common(s_sim, common);
  s_sim->add_option("--spec", sim.spec, "simulation config");
  s_sim->add_option("--countries", sim.countries, "number of countries");
  s_sim->add_option("--years", sim.years, "number of years");
  s_sim->add_option("--out", sim.out, "output panel.csv");

  IngestArgs ing;
  auto* s_ing = app.add_subcommand("ingest", "validate, adjust and price a panel");
  add_common(s_ing, common);
  add_inputs(s_ing, ing.in);
  s_ing->add_option("--out", ing.out, "output panel csv");
  flag(s_ing, "--horizon", "diff_horizon", flags, std::make_shared<int>(5), "difference horizon for bartik.csv");
  auto deflate_flag = s_ing->add_flag("--deflate", "divide monetary columns by the output deflator");

  EstimateArgs est;
  auto* s_est = app.add_subcommand("estimate", "GMM estimates of the substitution parameters");
  add_common(s_est, common);
  add_inputs(s_est, est.in);
  s_est->add_option("--institutions", est.in.institutions, "institutions.csv");
  s_est->add_option("--out", est.out, "output results.csv");
  flag(s_est, "--sector", "sector", flags, std::make_shared<std::string>(), "goods|service|both");
  flag(s_est, "--moments", "moments", flags, std::make_shared<std::string>(), "most-relevant|full");
  flag(s_est, "--horizon", "diff_horizon", flags, std::make_shared<int>(5), "5|10");
  flag(s_est, "--robustness", "robustness", flags, std::make_shared<std::string>(),
       "none|institutions|external-return|trends");

  ElasticitiesArgs ela;
  auto* s_ela = app.add_subcommand("elasticities", "aggregate Morishima elasticities");
  add_common(s_ela, common);
  add_inputs(s_ela, ela.in);
  s_ela->add_option("--out", ela.out, "output elasticities.csv");
  flag(s_ela, "--side", "side", flags, std::make_shared<std::string>(), "production|cost|both");
  flag(s_ela, "--bootstrap", "bootstrap", flags, std::make_shared<int>(0), "cluster bootstrap replications");
  flag(s_ela, "--horizon", "diff_horizon", flags, std::make_shared<int>(5), "5|10");

  DecomposeArgs dec;
  auto* s_dec = app.add_subcommand("decompose", "decompose changes over a window");
  add_common(s_dec, common);
  add_inputs(s_dec, dec.in);
  s_dec->add_option("--out", dec.out, "output decomp.csv");
  flag(s_dec, "--target", "target", flags, std::make_shared<std::string>(), "wages|demand|shares|labor-share");
  flag(s_dec, "--window", "window", flags, std::make_shared<std::string>(), "FROM:TO");
  flag(s_dec, "--bootstrap", "bootstrap", flags, std::make_shared<int>(0), "cluster bootstrap replications");
  flag(s_dec, "--horizon", "diff_horizon", flags, std::make_shared<int>(5), "5|10");

  ReportArgs rep;
  auto* s_rep = app.add_subcommand("report", "render tables from a results directory");
  add_common(s_rep, common);
  s_rep->add_option("dir", rep.dir, "results directory")->required();
  s_rep->add_option("--out", rep.out, "output markdown (default <dir>/report.md)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitSchema;
  }

  RunContext ctx;
  ctx.subcommand = app.get_subcommands().front()->get_name();
  ctx.seed = common.seed;
  try {
    if (!common.config.empty()) {
      ctx.track_input(common.config);
      ctx.config = Config::load(common.config);
    }
    for (const auto& kv : common.sets) {
      auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + kv + "'");
      ctx.config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    for (auto& f : flags) f(ctx.config);
    if (deflate_flag->count()) ctx.config.set("deflate", "true");

    if (ctx.subcommand == "simulate") run_simulate(sim, ctx);
    else if (ctx.subcommand == "ingest") run_ingest(ing, ctx);
    else if (ctx.subcommand == "estimate") run_estimate(est, ctx);
    else if (ctx.subcommand == "elasticities") run_elasticities(ela, ctx);
    else if (ctx.subcommand == "decompose") run_decompose(dec, ctx);
    else run_report(rep, ctx);
  } catch (...) {
    return exit_code_for(std::current_exception());
  }
  return kExitOk;
}
