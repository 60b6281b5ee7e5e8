// coopdrive: episode generation, training, evaluation, reporting and replay.
#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "coopdrive/errors.hpp"
#include "coopdrive/eval.hpp"
#include "coopdrive/ppo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace coopdrive;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot read '" + p.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << text;
}

std::string hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const fs::path& p) { return hex(fnv1a(read_file(p))); }

// Manifests carry no timestamps or absolute paths so reruns are byte-identical.
void write_manifest(const fs::path& dir, const std::string& command, const json& config, const json& seeds,
                    const json& inputs, const std::vector<fs::path>& outputs) {
  json files = json::object();
  for (const auto& p : outputs) files[p.filename().string()] = file_hash(p);
  json m = {{"command", command},
            {"version", kVersion},
            {"config", config},
            {"config_hash", hex(fnv1a(config.dump()))},
            {"seeds", seeds},
            {"inputs", inputs},
            {"outputs", files}};
  write_file(dir / "manifest.json", m.dump(2) + "\n");
}

std::string demand_tag(double d) { return std::to_string(static_cast<long long>(std::llround(d))); }

// ---------------------------------------------------------------------------------------------

struct GenArgs {
  std::string map;
  int count = 20;
  std::uint64_t seed = 1000;
  std::vector<double> demands;
  double penetration = 0.2;
  std::string profile = "normal";
  double duration = 1200.0;
  double variation = 0.5;
  std::string out_dir;
};

int cmd_gen(const GenArgs& a) {
  const MapName map = parse_map_name(a.map);
  if (a.count <= 0) throw ConfigError("--count must be positive");
  const RoadNetwork net = build_map(map);
  const auto routes = routes_for(net);
  const std::vector<double> demands = a.demands.empty() ? demand_levels(map) : a.demands;
  GenerationConfig g;
  g.penetration = a.penetration;
  g.av_profile = parse_profile_set(a.profile);
  g.duration = a.duration;
  g.variation = a.variation;
  fs::create_directories(a.out_dir);
  std::vector<fs::path> outputs;
  json seeds = json::array();
  for (int k = 0; k < a.count; ++k) seeds.push_back(a.seed + static_cast<std::uint64_t>(k));
  for (double d : demands) {
    g.demand_vph = d;
    for (int k = 0; k < a.count; ++k) {
      const EpisodeSpec spec = generate_episode(net, routes, g, a.seed + static_cast<std::uint64_t>(k));
      char name[96];
      std::snprintf(name, sizeof name, "%s_%s_%03d.json", a.map.c_str(), demand_tag(d).c_str(), k);
      const fs::path p = fs::path(a.out_dir) / name;
      write_file(p, episode_to_json(spec).dump() + "\n");
      outputs.push_back(p);
    }
  }
  const json config = {{"map", a.map},       {"count", a.count},       {"seed", a.seed},
                       {"demands", demands}, {"penetration", a.penetration}, {"av_profile", a.profile},
                       {"duration", a.duration}, {"variation", a.variation}};
  write_manifest(a.out_dir, "gen-episodes", config, seeds, json::object(), outputs);
  std::cout << "wrote " << outputs.size() << " episodes to " << a.out_dir << "\n";
  return 0;
}

// ---------------------------------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string out_dir;
  bool resume = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  const std::string text = read_file(a.config);
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError("run config is not valid JSON: " + std::string(e.what()));
  }
  if (!a.out_dir.empty()) j["out_dir"] = a.out_dir;
  const RunConfig cfg = run_config_from_json(j);
  fs::create_directories(cfg.out_dir);
  write_file(fs::path(cfg.out_dir) / "config.json", text);
  write_manifest(cfg.out_dir, "train", run_config_to_json(cfg), json::array({cfg.train.seed, cfg.pool.seed}),
                 {{"config.json", hex(fnv1a(text))}}, {});
  train(cfg, a.resume, a.quiet ? nullptr : &std::cerr);
  return 0;
}

// ---------------------------------------------------------------------------------------------

struct EvalArgs {
  std::string map;
  std::string controller;
  std::string episodes;
  std::vector<double> demands;
  std::string out_dir;
  int jobs = 1;
  bool save_actions = false;
  double sensing_range = -1.0;
  AlineaConfig alinea;
};

struct LoadedEpisode {
  std::string file;
  std::string hash;
  EpisodeSpec spec;
};

std::vector<LoadedEpisode> load_episodes(const std::string& dir, MapName map, const std::vector<double>& demands) {
  if (!fs::is_directory(dir)) throw ConfigError("episode directory '" + dir + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json" && e.path().filename() != "manifest.json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<LoadedEpisode> out;
  for (const auto& f : files) {
    const std::string text = read_file(f);
    EpisodeSpec spec = episode_from_json(json::parse(text));
    if (spec.map != map) continue;
    if (!demands.empty() &&
        std::none_of(demands.begin(), demands.end(), [&](double d) { return std::abs(d - spec.nominal_demand_vph) < 1e-9; }))
      continue;
    out.push_back({f.filename().string(), hex(fnv1a(text)), std::move(spec)});
  }
  if (out.empty()) throw ConfigError("no matching episodes in '" + dir + "'");
  return out;
}

json release_json(const std::string& episode, const ReleaseRecord& r) {
  return {{"episode", episode},
          {"id", r.id},
          {"category", std::string(to_string(r.category))},
          {"route", r.route},
          {"group", r.group},
          {"scheduled_entry", r.scheduled_entry},
          {"entry_time", r.entry_time},
          {"exit_time", r.exit_time},
          {"travel_time", r.travel_time}};
}

int cmd_eval(const EvalArgs& a) {
  const MapName map = parse_map_name(a.map);
  const RoadNetwork net = build_map(map);
  const auto routes = routes_for(net);
  const auto episodes = load_episodes(a.episodes, map, a.demands);

  std::string label;
  json controller_config;
  std::optional<LoadedPolicy> policy;
  EnvConfig env;
  json inputs = json::object();
  if (a.controller == "nc") {
    label = "NC";
    controller_config = {{"kind", "nc"}};
  } else if (a.controller == "alinea") {
    label = "ALINEA";
    controller_config = {{"kind", "alinea"},
                         {"gain", a.alinea.gain},
                         {"target_occupancy", a.alinea.target_occupancy},
                         {"period", a.alinea.period},
                         {"min_rate", a.alinea.min_rate},
                         {"max_rate", a.alinea.max_rate},
                         {"initial_rate", a.alinea.initial_rate},
                         {"edge", a.alinea.edge}};
  } else if (a.controller.rfind("policy:", 0) == 0) {
    const std::string path = a.controller.substr(7);
    policy = load_policy(path);
    if (policy->card.value("map", a.map) != a.map)
      throw ConfigError("checkpoint was trained on map '" + policy->card.value("map", std::string()) + "', not '" + a.map + "'");
    env = env_config_from_card(policy->card);
    if (a.sensing_range >= 0.0) env.sensing_range = a.sensing_range;
    label = policy->card.value("name", std::string(to_string(policy->config.variant)));
    controller_config = {{"kind", "policy"},
                         {"name", label},
                         {"policy", policy_config_to_json(policy->config)},
                         {"sensing_range", env.sensing_range},
                         {"max_active", env.max_active},
                         {"greedy", true}};
    inputs["checkpoint"] = file_hash(path);
  } else {
    throw ConfigError("unknown controller '" + a.controller + "' (expected nc, alinea or policy:<checkpoint>)");
  }

  std::vector<EpisodeOutcome> outcomes(episodes.size());
  std::vector<std::vector<std::vector<int>>> actions(episodes.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(std::max(1, a.jobs)));
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t k; (k = next++) < episodes.size();) {
        const EpisodeSpec& spec = episodes[k].spec;
        if (policy)
          outcomes[k] = run_policy(net, routes, spec, policy->snapshot, policy->config, env, ActMode::greedy, 0,
                                   a.save_actions ? &actions[k] : nullptr);
        else if (a.controller == "alinea")
          outcomes[k] = run_alinea(net, routes, spec, a.alinea);
        else
          outcomes[k] = run_nc(net, routes, spec);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (a.jobs <= 1) {
    work(0);
  } else {
    std::vector<std::thread> threads;
    for (int w = 0; w < a.jobs; ++w) threads.emplace_back(work, static_cast<std::size_t>(w));
    for (auto& t : threads) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  fs::create_directories(a.out_dir);
  std::vector<double> levels;
  for (const auto& e : episodes)
    if (std::find(levels.begin(), levels.end(), e.spec.nominal_demand_vph) == levels.end())
      levels.push_back(e.spec.nominal_demand_vph);
  std::sort(levels.begin(), levels.end());
  json reports = json::array();
  for (double d : levels) {
    std::vector<EpisodeOutcome> group;
    for (std::size_t k = 0; k < episodes.size(); ++k)
      if (episodes[k].spec.nominal_demand_vph == d) group.push_back(outcomes[k]);
    reports.push_back(report_to_json(compute_metrics(group, routes, label)));
  }
  std::vector<fs::path> outputs;
  outputs.push_back(fs::path(a.out_dir) / "report.json");
  write_file(outputs.back(), reports.dump(2) + "\n");

  std::string releases;
  for (std::size_t k = 0; k < episodes.size(); ++k)
    for (const auto& r : outcomes[k].releases) releases += release_json(episodes[k].file, r).dump() + "\n";
  outputs.push_back(fs::path(a.out_dir) / "releases.jsonl");
  write_file(outputs.back(), releases);

  if (policy && a.save_actions) {
    fs::create_directories(fs::path(a.out_dir) / "actions");
    for (std::size_t k = 0; k < episodes.size(); ++k) {
      std::string lines;
      for (const auto& step : actions[k]) lines += json(step).dump() + "\n";
      const fs::path p = fs::path(a.out_dir) / "actions" / (fs::path(episodes[k].file).stem().string() + ".jsonl");
      write_file(p, lines);
      outputs.push_back(p);
    }
  }

  json seeds = json::array();
  json episode_hashes = json::object();
  for (const auto& e : episodes) {
    seeds.push_back(e.spec.seed);
    episode_hashes[e.file] = e.hash;
  }
  inputs["episodes"] = episode_hashes;
  const json config = {{"map", a.map}, {"controller", controller_config}, {"demands", a.demands}};
  write_manifest(a.out_dir, "eval", config, seeds, inputs, outputs);
  for (const auto& r : reports) {
    std::cout << label << " " << a.map << " " << r.at("demand").get<double>() << " veh/h: throughput ";
    if (r.at("throughput").is_null())
      std::cout << "N/A";
    else
      std::cout << r.at("throughput").get<double>();
    std::cout << "%, mean T_wait " << r.at("mean_wait").get<double>() << " s\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------------------------

int cmd_report(const std::vector<std::string>& dirs, const std::string& out_dir) {
  std::vector<EvalReport> reports;
  json inputs = json::object();
  for (const auto& d : dirs) {
    const fs::path p = fs::path(d) / "report.json";
    const std::string text = read_file(p);
    for (const auto& r : json::parse(text)) reports.push_back(report_from_json(r));
    inputs[p.string()] = hex(fnv1a(text));
  }
  if (reports.empty()) throw ConfigError("no reports found");
  fs::create_directories(out_dir);
  emit_tables(reports, out_dir);
  std::vector<fs::path> outputs;
  for (const auto& e : fs::directory_iterator(out_dir))
    if (e.path().extension() == ".csv") outputs.push_back(e.path());
  std::sort(outputs.begin(), outputs.end());
  write_manifest(out_dir, "report", {{"eval_dirs", dirs}}, json::array(), inputs, outputs);
  for (const auto& p : outputs) std::cout << p.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------------------------

struct ReplayArgs {
  std::string episode;
  std::string actions;
  std::string checkpoint;
  std::string out;
  double sensing_range = 100.0;
  int max_active = 16;
};

int cmd_replay(const ReplayArgs& a) {
  const EpisodeSpec spec = episode_from_json(json::parse(read_file(a.episode)));
  const RoadNetwork net = build_map(spec.map);
  const auto routes = routes_for(net);
  EnvConfig env;
  env.sensing_range = a.sensing_range;
  env.max_active = a.max_active;
  if (!a.checkpoint.empty()) env = env_config_from_card(read_checkpoint_meta(a.checkpoint).at("meta"));
  std::vector<std::vector<int>> actions;
  std::istringstream in(read_file(a.actions));
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) actions.push_back(json::parse(line).get<std::vector<int>>());
  std::ofstream out(a.out, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + a.out + "'");
  const EpisodeOutcome o = replay_actions(net, routes, spec, env, actions, &out);
  std::cout << "released " << o.releases.size() << " of " << o.arrivals.size() << " scheduled\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cooperative AV control: simulation, training and evaluation"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-episodes", "Generate a fixed pool of episode specifications");
  g->add_option("--map", gen.map, "onramp, lanedrop, threeway or fourway")->required();
  g->add_option("--count", gen.count, "Episodes per demand level")->capture_default_str();
  g->add_option("--seed", gen.seed, "Seed of the first episode; episode k uses seed + k")->capture_default_str();
  g->add_option("--demand", gen.demands, "Demand levels in veh/h (default: the map's four evaluated levels)");
  g->add_option("--penetration", gen.penetration, "AV fraction in [0, 1]")->capture_default_str();
  g->add_option("--av-profile", gen.profile, "normal or conservative")->capture_default_str();
  g->add_option("--duration", gen.duration, "Episode length in seconds")->capture_default_str();
  g->add_option("--variation", gen.variation, "Per-period demand jitter half-width")->capture_default_str();
  g->add_option("--out-dir", gen.out_dir, "Output directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a policy from a run configuration");
  t->add_option("--config", tr.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  t->add_option("--out-dir", tr.out_dir, "Override the configured run directory");
  t->add_flag("--resume", tr.resume, "Continue from <out-dir>/latest.ckpt");
  t->add_flag("--quiet", tr.quiet, "Do not echo the training log");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a controller over an episode pool");
  e->add_option("--map", ev.map, "Map name")->required();
  e->add_option("--controller", ev.controller, "nc, alinea or policy:<checkpoint>")->required();
  e->add_option("--episodes", ev.episodes, "Directory of episode files")->required();
  e->add_option("--demand", ev.demands, "Only evaluate these demand levels");
  e->add_option("--out-dir", ev.out_dir, "Output directory")->required();
  e->add_option("--jobs", ev.jobs, "Parallel episode simulations")->capture_default_str();
  e->add_flag("--save-actions", ev.save_actions, "Write per-episode action logs for replay");
  e->add_option("--sensing-range", ev.sensing_range, "Override the checkpoint's sensing range (m)");
  e->add_option("--alinea-gain", ev.alinea.gain, "ALINEA K_R, veh/h per occupancy percent")->capture_default_str();
  e->add_option("--alinea-target", ev.alinea.target_occupancy, "ALINEA target occupancy, percent")->capture_default_str();
  e->add_option("--alinea-period", ev.alinea.period, "ALINEA control period, s")->capture_default_str();
  e->add_option("--alinea-min", ev.alinea.min_rate, "Lower rate clamp, veh/h")->capture_default_str();
  e->add_option("--alinea-max", ev.alinea.max_rate, "Upper rate clamp, veh/h")->capture_default_str();

  std::vector<std::string> report_dirs;
  std::string report_out;
  auto* r = app.add_subcommand("report", "Build tables and plot data from eval directories");
  r->add_option("--eval-dir", report_dirs, "Eval output directories")->required();
  r->add_option("--out-dir", report_out, "Output directory")->required();

  ReplayArgs rp;
  auto* p = app.add_subcommand("replay", "Replay an action log and dump trajectories");
  p->add_option("--episode", rp.episode, "Episode file")->required()->check(CLI::ExistingFile);
  p->add_option("--actions", rp.actions, "Action log (one JSON array per decision step)")->required()->check(CLI::ExistingFile);
  p->add_option("--checkpoint", rp.checkpoint, "Take environment settings from this checkpoint");
  p->add_option("--sensing-range", rp.sensing_range, "Sensing range (m)")->capture_default_str();
  p->add_option("--max-active", rp.max_active, "Activated AV limit")->capture_default_str();
  p->add_option("--out", rp.out, "Trajectory output file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*r) return cmd_report(report_dirs, report_out);
    if (*p) return cmd_replay(rp);
  } catch (const IntegrityError& ex) {
    std::cerr << "integrity error: " << ex.what() << "\n";
    return 3;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}
