// Command line front door for the neural map prior engine: city generation,
// fleet simulation, store evaluation, GRU training, gradient checking, the
// tile service, and raster inspection. Exit codes: 0 success, 1 usage
// error, 2 runtime error.

#include <nmp/config.hpp>
#include <nmp/gradcheck.hpp>
#include <nmp/render.hpp>
#include <nmp/tile_service.hpp>
#include <nmp/train.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <thread>
#include <vector>

namespace {

using namespace nmp;
using nlohmann::json;

std::string iso_now() {
    const std::time_t t =
        std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path);
    f << text;
    if (!f) throw std::runtime_error("short write to " + path);
}

// Every flag that mirrors a config key funnels through apply_config_key, so
// flag values and file values share one parser and the flag wins when both
// are present.
class MirroredFlags {
  public:
    void add(CLI::App* cmd, const std::string& flag, const std::string& key,
             const std::string& help) {
        auto holder = std::make_shared<std::string>();
        CLI::Option* opt =
            cmd->add_option(flag, *holder, help + " [" + key + "]");
        flags_.push_back({opt, key, holder});
    }

    void apply(RunConfig& cfg) const {
        for (const Entry& e : flags_)
            if (e.opt->count() > 0) apply_config_key(cfg, e.key, *e.holder);
    }

  private:
    struct Entry {
        CLI::Option* opt;
        std::string key;
        std::shared_ptr<std::string> holder;
    };
    std::vector<Entry> flags_;
};

// Config resolution order: defaults, then --config file, then flags.
RunConfig resolve_config(const std::string& config_path,
                         const MirroredFlags& flags) {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    flags.apply(cfg);
    cfg.validate();
    return cfg;
}

struct Scenario {
    CityMap city;
    GridSpec spec;
    Condition cond;
    std::vector<TripPlan> trips;
    WeightSet weights;
    RunOptions opt;
};

Scenario build_scenario(const RunConfig& cfg) {
    Scenario s;
    s.city = generate_city(cfg.city_seed, cfg.city_extent_m,
                           cfg.grid_resolution_m);
    s.spec = bev_preset(cfg.eval_bev_preset, cfg.grid_resolution_m,
                        cfg.grid_channels);
    s.cond = cfg.resolved_condition();
    s.trips = plan_trips(s.city, s.spec, cfg.trips_count, cfg.trips_frames,
                         cfg.trips_spacing_m, s.cond, cfg.trips_route_seed,
                         cfg.trips_route_mode == "same", cfg.run_seed);
    if (cfg.weights_path.empty()) {
        WeightSetParams wp;
        wp.channels = cfg.grid_channels;
        wp.bev_rows = s.spec.bev_rows;
        wp.bev_cols = s.spec.bev_cols;
        s.weights = make_weight_set(wp, cfg.weights_seed);
    } else {
        s.weights = load_weights(cfg.weights_path);
    }
    s.opt.strategy = parse_strategy(cfg.fusion_strategy);
    s.opt.alpha = cfg.fusion_alpha;
    s.opt.mode = parse_mode(cfg.fusion_mode);
    s.opt.freeze_store = cfg.store_freeze;
    return s;
}

std::unique_ptr<PriorStore> make_store(const RunConfig& cfg,
                                       const GridSpec& spec, bool remote) {
    if (remote) {
        const std::string addr = resolved_service_address(cfg.service_addr);
        if (addr.empty())
            throw std::invalid_argument(
                "remote mode needs service.addr or NMP_ADDR");
        return std::make_unique<RemotePriorStore>(
            spec, addr, static_cast<uint32_t>(cfg.run_seed),
            cfg.store_resolution_m);
    }
    return std::make_unique<TileStore>(spec, cfg.store_dir,
                                       static_cast<size_t>(cfg.store_capacity),
                                       cfg.store_resolution_m);
}

// ---------------------------------------------------------------- gen-city

int run_gen_city(const RunConfig& cfg, const std::string& render_path,
                 const std::string& json_path) {
    const CityMap city = generate_city(cfg.city_seed, cfg.city_extent_m,
                                       cfg.grid_resolution_m);
    size_t road_cells = 0;
    for (uint8_t v : city.gt.labels) road_cells += v != 0;
    json j{
        {"seed", city.seed},
        {"extent_m", city.extent_m},
        {"resolution_m", city.resolution},
        {"rows", city.gt.rows},
        {"cols", city.gt.cols},
        {"roads", city.roads.size()},
        {"crossings", city.crossings.size()},
        {"road_class_fraction",
         static_cast<double>(road_cells) / city.gt.labels.size()},
    };
    if (!render_path.empty()) {
        save_png(render_path, render_semantic(city.gt));
        j["render"] = render_path;
    }
    if (!json_path.empty()) write_text(json_path, j.dump(2) + "\n");
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

// ---------------------------------------------------------------- simulate

int run_simulate(const RunConfig& cfg, bool remote, const std::string& out,
                 const std::string& render_dir) {
    Scenario s = build_scenario(cfg);
    std::unique_ptr<PriorStore> store = make_store(cfg, s.spec, remote);

    const RunReport rep =
        run_fleet(s.city, s.spec, s.trips, s.opt, s.weights, *store);
    if (!cfg.store_dir.empty())
        if (auto* ts = dynamic_cast<TileStore*>(store.get())) ts->flush();

    json j = rep.to_json();
    j["resolved_config"] = cfg.to_json();  // file-key form, feed it back in
    j["generated_at"] = iso_now();
    write_text(out, j.dump(2) + "\n");

    if (!render_dir.empty()) {
        std::filesystem::create_directories(render_dir);
        const auto in_dir = [&](const char* name) {
            return (std::filesystem::path(render_dir) / name).string();
        };
        save_png(in_dir("city.png"), render_semantic(s.city.gt));
        const EgoPose& pose = s.trips.front().poses.front();
        const FeatureMap prior = store->query_region(pose);
        save_png(in_dir("prior.png"),
                 render_features(prior, s.weights.embedding));
        if (s.opt.strategy == FuseStrategy::gru ||
            s.opt.strategy == FuseStrategy::gru_ca) {
            const FeatureMap obs =
                observe(s.city, s.spec, s.weights.embedding, pose, s.cond,
                        derive_seed(s.trips.front().obs_seed, 0));
            const FuseResult fr =
                fuse(s.opt.strategy, obs, prior, s.weights, s.opt.alpha);
            if (fr.gate) save_png(in_dir("gate.png"), render_gate(*fr.gate));
        }
    }

    if (rep.aborted) {
        std::fprintf(stderr, "simulate: aborted: %s\n", rep.error.c_str());
        return 2;
    }
    std::printf("simulate: strategy=%s trips=%zu miou=%s report=%s\n",
                rep.strategy.c_str(), rep.trips.size(),
                rep.miou ? std::to_string(*rep.miou).c_str() : "undefined",
                out.c_str());
    return 0;
}

// ---------------------------------------------------------------- evaluate

// Scores the accumulated prior on its own: no fresh observations, just
// decode(query_region(pose)) against ground truth over the configured trip
// poses. Uncovered cells decode to background via the bias.
int run_evaluate(const RunConfig& cfg, const std::string& out) {
    Scenario s = build_scenario(cfg);
    std::unique_ptr<PriorStore> store = make_store(cfg, s.spec, false);

    detail::IouCounts counts;
    double coverage = 0.0;
    int poses = 0;
    for (const TripPlan& trip : s.trips)
        for (const EgoPose& pose : trip.poses) {
            const FeatureMap prior = store->query_region(pose);
            counts.add(decode(prior, s.weights.embedding),
                       gt_crop(s.city, s.spec, pose));
            size_t covered = 0;
            for (int r = 0; r < prior.rows; ++r)
                for (int c = 0; c < prior.cols; ++c)
                    covered += prior.covered_at(r, c);
            coverage += static_cast<double>(covered) /
                        (static_cast<double>(prior.rows) * prior.cols);
            ++poses;
        }

    const ClassIou iou = counts.finish();
    json per_class;
    for (int c = 0; c < kNumClasses; ++c)
        per_class[road_class_name(static_cast<RoadClass>(c))] =
            iou.defined[c] ? json(iou.iou[c]) : json();
    json j{
        {"config", cfg.to_json()},
        {"poses", poses},
        {"prior_coverage_mean", poses ? coverage / poses : 0.0},
        {"iou", per_class},
        {"miou", iou.miou ? json(*iou.miou) : json()},
        {"generated_at", iso_now()},
    };
    if (!out.empty()) write_text(out, j.dump(2) + "\n");
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

// ---------------------------------------------------------------- train-gru

int run_train(const RunConfig& cfg, const TrainConfig& tc,
              const std::string& out, const std::string& loss_csv) {
    const TrainResult tr = train_gru(tc);

    if (!loss_csv.empty()) save_loss_csv(loss_csv, tr.history);

    const GridSpec spec = bev_preset(cfg.eval_bev_preset,
                                     cfg.grid_resolution_m, cfg.grid_channels);
    WeightSetParams wp;
    wp.channels = cfg.grid_channels;
    wp.bev_rows = spec.bev_rows;
    wp.bev_cols = spec.bev_cols;
    WeightSet w = make_weight_set(wp, cfg.weights_seed);
    w.gru = tr.weights;
    save_weights(out, w);

    std::printf(
        "train-gru: steps=%d lr=%g seed=%llu holdout initial=%.6g "
        "final=%.6g ma=%.6g ratio=%.3f checkpoint=%s\n",
        tc.steps, tc.lr, static_cast<unsigned long long>(tc.seed),
        tr.holdout_mse_initial, tr.holdout_mse_final, tr.holdout_mse_ma,
        tr.holdout_mse_final / tr.holdout_mse_ma, out.c_str());
    if (tr.aborted) {
        std::fprintf(stderr, "train-gru: %s\n", tr.error.c_str());
        return 2;
    }
    return 0;
}

// ---------------------------------------------------------------- gradcheck

int run_gradcheck_cmd(uint64_t seed, int seeds, int rows, int cols,
                      int channels, double tol) {
    std::map<std::string, double> worst;
    double overall = 0.0;
    for (int i = 0; i < seeds; ++i) {
        const GradCheckReport rep =
            run_gradcheck(derive_seed(seed, static_cast<uint64_t>(i)), rows,
                          cols, channels);
        for (const auto& [block, err] : rep.block_err)
            worst[block] = std::max(worst[block], err);
        overall = std::max(overall, rep.max_rel_err);
    }
    for (const auto& [block, err] : worst)
        std::printf("gradcheck: %-8s max rel err %.3e\n", block.c_str(), err);
    std::printf("gradcheck: overall  max rel err %.3e over %d seeds (%dx%dx%d)\n",
                overall, seeds, rows, cols, channels);
    if (overall > tol) {
        std::fprintf(stderr, "gradcheck: FAILED tolerance %.1e\n", tol);
        return 2;
    }
    return 0;
}

// ---------------------------------------------------------------- serve

std::atomic<bool> g_stop{false};

void handle_stop_signal(int) { g_stop.store(true); }

int run_serve(const RunConfig& cfg) {
    const GridSpec spec = bev_preset(cfg.eval_bev_preset,
                                     cfg.grid_resolution_m, cfg.grid_channels);
    TileStore store(spec, cfg.store_dir,
                    static_cast<size_t>(cfg.store_capacity),
                    cfg.store_resolution_m);
    const std::string addr = resolved_service_address(cfg.service_addr);
    if (addr.empty())
        throw std::invalid_argument("serve needs service.addr or NMP_ADDR");
    TileServer server(store, addr);
    std::printf("serve: listening on %s (store dir '%s')\n",
                server.address().c_str(), cfg.store_dir.c_str());
    std::fflush(stdout);

    std::signal(SIGINT, handle_stop_signal);
    std::signal(SIGTERM, handle_stop_signal);
    while (!g_stop.load())
        std::this_thread::sleep_for(std::chrono::milliseconds(100));
    std::printf("serve: shutting down\n");
    server.stop();
    store.flush();
    return 0;
}

// ---------------------------------------------------------------- inspect

int run_inspect_tile(const std::string& file, const std::string& store_dir,
                     int32_t ix, int32_t iy, bool have_ixy) {
    std::string path = file;
    if (path.empty()) {
        if (store_dir.empty() || !have_ixy)
            throw std::invalid_argument(
                "inspect-tile needs --file or --store-dir with --ix/--iy");
        path = (std::filesystem::path(store_dir) /
                tile_filename(TileKey{ix, iy}))
                   .string();
    }
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open tile file " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    const MapTile tile = load_tile(bytes);  // validates magic and checksum

    float wmin = 0.0f, wmax = 0.0f;
    bool first = true;
    for (float w : tile.weight) {
        if (w <= 0.0f) continue;
        wmin = first ? w : std::min(wmin, w);
        wmax = first ? w : std::max(wmax, w);
        first = false;
    }
    std::printf("file:            %s (%zu bytes, checksum ok)\n", path.c_str(),
                bytes.size());
    std::printf("tile:            (%lld, %lld)\n",
                static_cast<long long>(tile.key.ix),
                static_cast<long long>(tile.key.iy));
    std::printf("edge x channels: %d x %d\n", tile.tile_edge, tile.channels);
    std::printf("version:         %llu\n",
                static_cast<unsigned long long>(tile.version));
    std::printf("traversals:      %u\n", tile.traversal_count);
    std::printf("last updated:    %lld\n",
                static_cast<long long>(tile.last_updated));
    std::printf("covered cells:   %zu of %d\n", tile.covered_cells(),
                tile.tile_edge * tile.tile_edge);
    if (!first)
        std::printf("weight range:    [%g, %g]\n", wmin, wmax);
    return 0;
}

// ---------------------------------------------------------------- bench

int run_bench_memory(const RunConfig& cfg, double max_ratio) {
    Scenario s = build_scenario(cfg);
    std::unique_ptr<PriorStore> store = make_store(cfg, s.spec, false);
    const RunReport rep =
        run_fleet(s.city, s.spec, s.trips, s.opt, s.weights, *store);
    if (rep.aborted)
        throw std::runtime_error("bench-memory: run aborted: " + rep.error);
    std::printf(
        "bench-memory: resident=%llu dense=%llu ratio=%.4f (limit %.2f)\n",
        static_cast<unsigned long long>(rep.memory.resident_bytes),
        static_cast<unsigned long long>(rep.memory.dense_equivalent_bytes),
        rep.memory.ratio, max_ratio);
    if (rep.memory.ratio > max_ratio) {
        std::fprintf(stderr, "bench-memory: ratio above limit\n");
        return 2;
    }
    return 0;
}

// ---------------------------------------------------------------- render

int run_render(const RunConfig& cfg, const std::string& out, double x,
               double y, double yaw, bool have_pose) {
    const CityMap city = generate_city(cfg.city_seed, cfg.city_extent_m,
                                       cfg.grid_resolution_m);
    save_png(out, render_semantic(city.gt));
    std::printf("render: city -> %s\n", out.c_str());

    if (!cfg.store_dir.empty()) {
        const GridSpec spec = bev_preset(
            cfg.eval_bev_preset, cfg.grid_resolution_m, cfg.grid_channels);
        TileStore store(spec, cfg.store_dir,
                        static_cast<size_t>(cfg.store_capacity),
                        cfg.store_resolution_m);
        const EgoPose pose = have_pose
                                 ? EgoPose(x, y, yaw)
                                 : EgoPose(cfg.city_extent_m / 2,
                                           cfg.city_extent_m / 2, 0.0);
        const FeatureMap prior = store.query_region(pose);
        const Matrix<float> emb = class_embedding(cfg.grid_channels);
        const std::filesystem::path base(out);
        const std::string prior_out =
            (base.parent_path() / ("prior_" + base.filename().string()))
                .string();
        save_png(prior_out, render_features(prior, emb));
        std::printf("render: prior at (%.1f, %.1f) -> %s\n", pose.x, pose.y,
                    prior_out.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "neural map prior engine: synthetic cities, fleet simulation, "
        "tile store and service, fusion training"};
    app.require_subcommand(1);

    // Shared state filled by subcommand flags.
    std::string config_path;
    MirroredFlags mirror;
    const auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path,
                        "key=value run configuration file");
    };
    const auto add_city_flags = [&](CLI::App* cmd, bool seed_is_city) {
        if (seed_is_city)
            mirror.add(cmd, "--seed,--city-seed", "city.seed", "city seed");
        else
            mirror.add(cmd, "--city-seed", "city.seed", "city seed");
        mirror.add(cmd, "--city-extent", "city.extent_m", "city edge, meters");
        mirror.add(cmd, "--resolution", "grid.resolution_m",
                   "grid cell size, meters");
        mirror.add(cmd, "--channels", "grid.channels", "feature channels");
    };
    const auto add_run_flags = [&](CLI::App* cmd) {
        add_city_flags(cmd, false);
        mirror.add(cmd, "--seed", "run.seed", "run seed (observation noise)");
        mirror.add(cmd, "--strategy", "fusion.strategy",
                   "none | ma | gru | gru_ca");
        mirror.add(cmd, "--alpha", "fusion.alpha", "moving-average weight");
        mirror.add(cmd, "--mode", "fusion.mode", "inter | intra");
        mirror.add(cmd, "--trips", "trips.count", "trips per run");
        mirror.add(cmd, "--frames", "trips.frames", "frames per trip");
        mirror.add(cmd, "--spacing", "trips.spacing_m", "pose spacing, meters");
        mirror.add(cmd, "--condition", "trips.condition",
                   "normal | rain | night | night_rain");
        mirror.add(cmd, "--route-mode", "trips.route_mode", "same | varied");
        mirror.add(cmd, "--route-seed", "trips.route_seed", "route seed");
        mirror.add(cmd, "--sigma", "condition.noise_sigma",
                   "override preset noise sigma");
        mirror.add(cmd, "--occlusion", "condition.occlusion_rate",
                   "override preset occlusion rate");
        mirror.add(cmd, "--decay", "condition.range_decay",
                   "override preset range decay");
        mirror.add(cmd, "--bev-preset", "eval.bev_preset",
                   "near | mid | far");
        mirror.add(cmd, "--store-dir", "store.dir", "tile spill directory");
        mirror.add(cmd, "--store-resolution", "store.resolution_m",
                   "global store cell size, meters");
        mirror.add(cmd, "--store-capacity", "store.capacity",
                   "resident tile limit");
        mirror.add(cmd, "--freeze-store", "store.freeze",
                   "skip write-back (true/false)");
        mirror.add(cmd, "--addr", "service.addr", "tile service host:port");
        mirror.add(cmd, "--weights", "weights.path", "NMPW checkpoint");
        mirror.add(cmd, "--weights-seed", "weights.seed",
                   "seeded weight init");
    };

    // gen-city
    CLI::App* gen = app.add_subcommand(
        "gen-city", "generate a synthetic city and print its stats");
    add_common(gen);
    add_city_flags(gen, true);
    std::string gen_render, gen_json;
    gen->add_option("--render", gen_render, "write the map as a PNG");
    gen->add_option("--json", gen_json, "also write the stats as JSON");

    // simulate
    CLI::App* sim = app.add_subcommand(
        "simulate", "run a fleet over the city and write a report");
    add_common(sim);
    add_run_flags(sim);
    std::string sim_out = "report.json", sim_render_dir;
    bool sim_remote = false;
    sim->add_option("--out", sim_out, "report path (JSON)");
    sim->add_option("--render-dir", sim_render_dir,
                    "write city/prior/gate PNGs here");
    sim->add_flag("--remote", sim_remote,
                  "route the prior store through the tile service");

    // evaluate
    CLI::App* eval = app.add_subcommand(
        "evaluate", "score the stored prior against ground truth, no new "
                    "observations");
    add_common(eval);
    add_run_flags(eval);
    std::string eval_out;
    eval->add_option("--out", eval_out, "also write the result JSON here");

    // train-gru
    CLI::App* train = app.add_subcommand(
        "train-gru", "fit the fusion GRU with plain SGD, save a checkpoint");
    add_common(train);
    add_city_flags(train, false);
    mirror.add(train, "--bev-preset", "eval.bev_preset",
               "checkpoint attention shape preset");
    mirror.add(train, "--weights-seed", "weights.seed",
               "seed for the fixed (non-GRU) weights");
    uint64_t train_seed = 7;
    int train_steps = 200;
    double train_lr = 1.0, train_polish = 0.0;
    std::string train_out = "weights.nmpw", train_csv;
    train->add_option("--seed", train_seed, "training seed");
    train->add_option("--steps,--epochs", train_steps, "SGD steps");
    train->add_option("--lr", train_lr, "learning rate");
    train->add_option("--polish", train_polish,
                      "tail fraction on the clean-heavy mixture");
    train->add_option("--out", train_out, "checkpoint path (NMPW)");
    train->add_option("--loss-csv", train_csv, "loss history CSV path");

    // gradcheck
    CLI::App* grad = app.add_subcommand(
        "gradcheck", "analytic vs central-difference GRU gradients");
    add_common(grad);
    uint64_t grad_seed = 1;
    int grad_seeds = 20, grad_rows = 6, grad_cols = 6, grad_channels = 4;
    double grad_tol = 1e-4;
    grad->add_option("--seed", grad_seed, "base seed for the sweep");
    grad->add_option("--seeds", grad_seeds, "number of random instances");
    grad->add_option("--rows", grad_rows, "instance rows");
    grad->add_option("--cols", grad_cols, "instance cols");
    grad->add_option("--channels", grad_channels, "instance channels");
    grad->add_option("--tol", grad_tol, "max relative error tolerance");

    // serve
    CLI::App* serve = app.add_subcommand(
        "serve", "run the tile service until interrupted");
    add_common(serve);
    uint64_t serve_seed = 0;
    serve->add_option("--seed", serve_seed,
                      "accepted for interface uniformity; serving has no "
                      "randomness");
    mirror.add(serve, "--addr", "service.addr", "listen address host:port");
    mirror.add(serve, "--store-dir", "store.dir", "tile spill directory");
    mirror.add(serve, "--store-capacity", "store.capacity",
               "resident tile limit");
    mirror.add(serve, "--store-resolution", "store.resolution_m",
               "global store cell size, meters");
    mirror.add(serve, "--resolution", "grid.resolution_m",
               "grid cell size, meters");
    mirror.add(serve, "--channels", "grid.channels", "feature channels");
    mirror.add(serve, "--bev-preset", "eval.bev_preset", "BEV shape preset");

    // inspect-tile
    CLI::App* inspect = app.add_subcommand(
        "inspect-tile", "print one stored tile's header and stats");
    add_common(inspect);
    uint64_t inspect_seed = 0;
    inspect->add_option("--seed", inspect_seed,
                        "accepted for interface uniformity");
    std::string inspect_file, inspect_dir;
    int32_t inspect_ix = 0, inspect_iy = 0;
    CLI::Option* oix = inspect->add_option("--ix", inspect_ix, "tile x index");
    CLI::Option* oiy = inspect->add_option("--iy", inspect_iy, "tile y index");
    inspect->add_option("--file", inspect_file, "tile file path");
    inspect->add_option("--store-dir", inspect_dir, "store directory");

    // bench-memory
    CLI::App* bench = app.add_subcommand(
        "bench-memory", "simulate the default city, report sparse/dense "
                        "memory ratio");
    add_common(bench);
    add_run_flags(bench);
    double bench_max_ratio = 0.35;
    bench->add_option("--max-ratio", bench_max_ratio,
                      "fail (exit 2) above this ratio");

    // render
    CLI::App* render = app.add_subcommand(
        "render", "write the city map (and optionally the stored prior) as "
                  "PNG");
    add_common(render);
    add_city_flags(render, true);
    mirror.add(render, "--bev-preset", "eval.bev_preset", "BEV shape preset");
    mirror.add(render, "--store-dir", "store.dir", "tile spill directory");
    mirror.add(render, "--store-resolution", "store.resolution_m",
               "global store cell size, meters");
    std::string render_out = "city.png";
    double render_x = 0, render_y = 0, render_yaw = 0;
    render->add_option("--out", render_out, "output PNG path");
    CLI::Option* ox = render->add_option("--x", render_x, "prior pose x");
    CLI::Option* oy = render->add_option("--y", render_y, "prior pose y");
    render->add_option("--yaw", render_yaw, "prior pose yaw, radians");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }

    try {
        if (*gen) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_gen_city(cfg, gen_render, gen_json);
        }
        if (*sim) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_simulate(cfg, sim_remote, sim_out, sim_render_dir);
        }
        if (*eval) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_evaluate(cfg, eval_out);
        }
        if (*train) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            TrainConfig tc;
            tc.city_seed = cfg.city_seed;
            tc.extent_m = cfg.city_extent_m;
            tc.resolution = cfg.grid_resolution_m;
            tc.channels = cfg.grid_channels;
            tc.seed = train_seed;
            tc.steps = train_steps;
            tc.lr = train_lr;
            tc.polish_frac = train_polish;
            tc.validate();
            return run_train(cfg, tc, train_out, train_csv);
        }
        if (*grad)
            return run_gradcheck_cmd(grad_seed, grad_seeds, grad_rows,
                                     grad_cols, grad_channels, grad_tol);
        if (*serve) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_serve(cfg);
        }
        if (*inspect)
            return run_inspect_tile(inspect_file, inspect_dir, inspect_ix,
                                    inspect_iy,
                                    oix->count() > 0 && oiy->count() > 0);
        if (*bench) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_bench_memory(cfg, bench_max_ratio);
        }
        if (*render) {
            const RunConfig cfg = resolve_config(config_path, mirror);
            return run_render(cfg, render_out, render_x, render_y, render_yaw,
                              ox->count() > 0 && oy->count() > 0);
        }
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 1;
}
