#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <future>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "capslab/chamfer.hpp"
#include "capslab/checkpoint.hpp"
#include "capslab/config.hpp"
#include "capslab/dataset_io.hpp"
#include "capslab/idx.hpp"
#include "capslab/train.hpp"
#include "capslab/tsne.hpp"

#ifndef CAPSLAB_VERSION
#define CAPSLAB_VERSION "unversioned"
#endif

namespace fs = std::filesystem;
using namespace capslab;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTagEmbedRestart = 0x64626d65;

std::string utc_timestamp() {
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct StopWatch {
    std::string started_utc = utc_timestamp();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

std::string hex64(std::uint64_t v) {
    std::ostringstream ss;
    ss << "0x" << std::hex << std::setfill('0') << std::setw(16) << v;
    return ss.str();
}

// ---------------------------------------------------------------------------
// run directory plumbing

fs::path prepare_run_dir(const ExperimentConfig& cfg, const std::string& run_id,
                         bool with_checkpoints = false, bool with_embeddings = false) {
    const fs::path dir = cfg.out_dir / cfg.name / run_id;
    fs::create_directories(dir);
    if (with_checkpoints) fs::create_directories(dir / "checkpoints");
    if (with_embeddings) fs::create_directories(dir / "embeddings");
    return dir;
}

json base_manifest(const std::string& command, const ExperimentConfig& cfg,
                   const std::string& run_id) {
    return json{{"command", command}, {"name", cfg.name}, {"run_id", run_id}, {"seed", cfg.seed}};
}

/// Everything run-varying (start time, wall clock) sits under the single
/// "timing" key, so re-running a command with identical inputs reproduces the
/// manifest byte for byte outside that one field.
void write_manifest(const fs::path& dir, json manifest, const StopWatch& watch) {
    manifest["version"] = CAPSLAB_VERSION;
    manifest["timing"] = {{"started_utc", watch.started_utc}, {"wall_seconds", watch.seconds()}};
    std::ofstream out(dir / "manifest.json");
    if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << "\n";
}

void write_metrics(const fs::path& dir, const MetricStream& metrics) {
    std::ofstream out(dir / "metrics.ndjson");
    if (!out) throw DataError("cannot write " + (dir / "metrics.ndjson").string());
    metrics.to_ndjson(out);
}

void require_dataset_dir(const fs::path& dir) {
    if (!fs::exists(dir / "manifest.json"))
        throw DataError("dataset manifest not found: " + (dir / "manifest.json").string());
}

TrainData load_train_data(const ExperimentConfig& cfg) {
    TrainData d;
    d.train = load_dataset(cfg.train_dir).samples;
    d.test = load_dataset(cfg.test_dir).samples;
    return d;
}

void require_sections(const ExperimentConfig& cfg, bool data, bool model) {
    if (data && !cfg.has_data) throw ConfigError("this command needs a \"data\" config section");
    if (model && !cfg.has_model) throw ConfigError("this command needs a \"model\" config section");
}

// ---------------------------------------------------------------------------
// datagen

struct DatagenOpts {
    std::string mnist_dir;
    std::string out;
    std::uint64_t seed = 7;
    std::size_t count = 6000;
    std::string source = "train";
    std::vector<int> shift_grid;  // [fixed, moving] when given
    int unit_px = 1;
    bool split_domains = false;
    std::string domains_file;
    std::string side;
    bool dry_run = false;
};

std::pair<fs::path, fs::path> source_idx_paths(const DatagenOpts& o) {
    const fs::path root = o.mnist_dir.empty() ? data_dir() / "raw" : fs::path(o.mnist_dir);
    const bool test = o.source == "test";
    const fs::path images = root / (test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte");
    const fs::path labels = root / (test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte");
    for (const auto& p : {images, labels})
        if (!fs::exists(p)) throw DataError("IDX file not found: " + p.string());
    return {images, labels};
}

std::vector<MnistDigit> load_source_digits(const DatagenOpts& o) {
    const auto [images, labels] = source_idx_paths(o);
    return read_idx(images.string(), labels.string());
}

std::set<DuplexLabel> load_domain_pairs(const std::string& file, const std::string& side) {
    std::ifstream in(file);
    if (!in) throw DataError("cannot open domain manifest " + file);
    json doc;
    try {
        in >> doc;
    } catch (const json::exception& e) {
        throw DataError("malformed domain manifest " + file + ": " + e.what());
    }
    const std::string key = "pairs_" + side;
    if (!doc.contains(key)) throw DataError("domain manifest " + file + " has no \"" + key + "\"");
    std::set<DuplexLabel> pairs;
    for (const auto& p : doc.at(key)) pairs.insert(DuplexLabel(p.at(0).get<int>(), p.at(1).get<int>()));
    return pairs;
}

int cmd_datagen(const DatagenOpts& o) {
    if (o.out.empty()) throw ConfigError("datagen needs --out");
    if (o.source != "train" && o.source != "test")
        throw ConfigError("--source must be train or test, got \"" + o.source + "\"");
    const fs::path out = o.out;

    if (o.split_domains) {
        if (o.dry_run) {
            std::cout << "plan: write domain pair split (seed " << o.seed << ") to "
                      << (out / "domains.json").string() << "\n";
            return 0;
        }
        const DomainSplit split = make_domain_split(o.seed);
        json ja = json::array(), jb = json::array();
        for (const auto& p : split.pair_classes_A) ja.push_back({p.lo, p.hi});
        for (const auto& p : split.pair_classes_B) jb.push_back({p.lo, p.hi});
        fs::create_directories(out);
        std::ofstream f(out / "domains.json");
        if (!f) throw DataError("cannot write " + (out / "domains.json").string());
        f << json{{"seed", o.seed}, {"pairs_A", ja}, {"pairs_B", jb}}.dump(2) << "\n";
        std::cout << "wrote domain split: " << ja.size() << " pairs in A, " << jb.size()
                  << " in B -> " << (out / "domains.json").string() << "\n";
        return 0;
    }

    if (!o.shift_grid.empty()) {
        if (o.shift_grid.size() != 2)
            throw ConfigError("--shift-grid takes exactly two digit classes");
        const int fd = o.shift_grid[0], md = o.shift_grid[1];
        for (int d : o.shift_grid)
            if (d < 0 || d > 9) throw ConfigError("--shift-grid classes must be digits 0-9");
        if (fd == md) throw ConfigError("--shift-grid classes must differ");
        if (o.dry_run) {
            source_idx_paths(o);
            std::cout << "plan: 81-sample shift grid, fixed " << fd << " moving " << md
                      << " (unit " << o.unit_px << "px, " << o.source << " digits) -> " << out.string()
                      << "\n";
            return 0;
        }
        const auto digits = load_source_digits(o);
        const ShiftGridSet grid =
            make_shift_grid(first_instance_of(digits, fd), first_instance_of(digits, md), o.unit_px);
        save_dataset(out, grid.samples,
                     json{{"kind", "shift_grid"},
                          {"fixed", fd},
                          {"moving", md},
                          {"unit_px", o.unit_px},
                          {"source", o.source}});
        std::cout << "wrote " << grid.samples.size() << " grid records -> " << out.string() << "\n";
        return 0;
    }

    std::optional<std::set<DuplexLabel>> allowed;
    if (!o.domains_file.empty()) {
        if (o.side != "A" && o.side != "B")
            throw ConfigError("--domains needs --side A or --side B");
        allowed = load_domain_pairs(o.domains_file, o.side);
    } else if (!o.side.empty()) {
        throw ConfigError("--side needs --domains");
    }

    if (o.dry_run) {
        source_idx_paths(o);
        std::cout << "plan: " << o.count << " overlay samples (seed " << o.seed << ", " << o.source
                  << " digits" << (allowed ? ", domain " + o.side : std::string{}) << ") -> " << out.string()
                  << "\n";
        return 0;
    }
    const auto digits = load_source_digits(o);
    const auto samples =
        synthesize_multimnist(digits, o.count, o.seed, allowed ? &*allowed : nullptr);
    json meta{{"kind", "multimnist"}, {"seed", o.seed}, {"count", o.count}, {"source", o.source}};
    if (allowed) meta["domain"] = o.side;
    save_dataset(out, samples, meta);
    std::cout << "wrote " << samples.size() << " samples -> " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainCmdOpts {
    std::string config;
    std::string run_id;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t steps = 0;
    std::string data_train, data_test;
    bool dry_run = false;
};

ExperimentConfig load_cfg_with_overrides(const TrainCmdOpts& o) {
    ExperimentConfig cfg = load_experiment_config(o.config);
    if (o.seed_set) {
        cfg.seed = o.seed;
        cfg.train.seed = o.seed;
    }
    if (o.steps > 0) cfg.train.total_steps = o.steps;
    if (!o.data_train.empty()) cfg.train_dir = o.data_train;
    if (!o.data_test.empty()) cfg.test_dir = o.data_test;
    if (!o.data_train.empty() && !o.data_test.empty()) cfg.has_data = true;
    return cfg;
}

int cmd_train(const TrainCmdOpts& o) {
    const ExperimentConfig cfg = load_cfg_with_overrides(o);
    require_sections(cfg, true, true);
    require_dataset_dir(cfg.train_dir);
    require_dataset_dir(cfg.test_dir);
    const std::string run_id = o.run_id.empty() ? "train-s" + std::to_string(cfg.seed) : o.run_id;
    const std::uint64_t hash = config_hash(cfg.family, cfg.arch, cfg.train);

    if (o.dry_run) {
        std::cout << "plan: train " << to_string(cfg.family) << " for " << cfg.train.total_steps
                  << " steps (batch " << cfg.train.batch_size << ", eval every "
                  << cfg.train.eval_every << ")\n  data   " << cfg.train_dir.string() << " / "
                  << cfg.test_dir.string() << "\n  output "
                  << (cfg.out_dir / cfg.name / run_id).string() << "\n  config " << hex64(hash)
                  << "\n";
        return 0;
    }

    const StopWatch watch;
    const TrainData data = load_train_data(cfg);
    TrainOptions opts;
    opts.run_id = run_id;
    const TrainResult result = train_model(cfg.family, cfg.arch, data, cfg.train, opts);

    const fs::path dir = prepare_run_dir(cfg, run_id, true);
    write_metrics(dir, result.metrics);
    save_checkpoint(dir / "checkpoints" / "final.ckpt", result.checkpoint);

    const EvalResult final_eval =
        evaluate_model(cfg.family, cfg.arch, result.checkpoint.params, data.test);
    json manifest = base_manifest("train", cfg, run_id);
    manifest["family"] = to_string(cfg.family);
    manifest["config_hash"] = hex64(hash);
    manifest["data"] = {{"train", cfg.train_dir.string()}, {"test", cfg.test_dir.string()}};
    manifest["outputs"] = {{"metrics", "metrics.ndjson"}, {"checkpoint", "checkpoints/final.ckpt"}};
    manifest["final"] = {{"duplex_accuracy", final_eval.duplex_accuracy},
                         {"mean_loss", final_eval.mean_loss}};
    if (final_eval.has_entropy) manifest["final"]["mean_entropy_r1"] = final_eval.mean_entropy_r1;
    write_manifest(dir, std::move(manifest), watch);

    std::cout << "trained " << to_string(cfg.family) << " to step " << result.checkpoint.step
              << ": test duplex accuracy " << final_eval.duplex_accuracy << " -> " << dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepCmdOpts {
    std::string config;
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t trials = 0;
    bool dry_run = false;
};

int cmd_sweep(const SweepCmdOpts& o) {
    ExperimentConfig cfg = load_experiment_config(o.config);
    if (o.seed_set) {
        cfg.seed = o.seed;
        cfg.train.seed = o.seed;
    }
    require_sections(cfg, true, true);
    if (!cfg.sweep) throw ConfigError("this command needs a \"sweep\" config section");
    if (cfg.family != ModelFamily::capsnet)
        throw ConfigError("routing sweeps need model.family = capsnet");
    const SweepSettings& sw = *cfg.sweep;
    const std::size_t trials = o.trials > 0 ? o.trials : sw.trials;
    require_dataset_dir(cfg.train_dir);
    require_dataset_dir(cfg.test_dir);

    std::vector<SweepCell> grid;
    for (const std::size_t n_em : sw.n_em)
        for (const Real eta : sw.eta) grid.push_back({n_em, eta});

    if (o.dry_run) {
        std::cout << "plan: routing sweep over " << grid.size() << " cells x " << trials
                  << " trials = " << grid.size() * trials << " runs of " << cfg.train.total_steps
                  << " steps\n  cells ";
        for (const auto& c : grid) std::cout << "(" << c.n_em << "," << c.eta << ") ";
        std::cout << "\n  output " << (cfg.out_dir / cfg.name).string() << "\n";
        return 0;
    }

    const StopWatch watch;
    const TrainData data = load_train_data(cfg);
    const SweepResult result = sweep_routing(grid, trials, cfg.family, cfg.arch, data, cfg.train);

    json cells = json::array();
    std::size_t failed = 0;
    for (const auto& c : result.cells) {
        for (const auto& m : c.trial_metrics) {
            const fs::path dir = prepare_run_dir(cfg, m.run_id);
            write_metrics(dir, m);
            json manifest = base_manifest("sweep", cfg, m.run_id);
            manifest["cell"] = {{"n_em", c.cell.n_em}, {"eta", c.cell.eta}};
            manifest["outputs"] = {{"metrics", "metrics.ndjson"}};
            write_manifest(dir, std::move(manifest), watch);
        }
        json jc{{"n_em", c.cell.n_em},
                {"eta", c.cell.eta},
                {"failed", c.failed},
                {"trial_seeds", c.trial_seeds},
                {"final_accuracy", c.final_accuracy},
                {"mean_final_accuracy", c.mean_final_accuracy},
                {"sd_final_accuracy", c.sd_final_accuracy},
                {"eval_steps", c.eval_steps},
                {"mean_accuracy", c.mean_accuracy},
                {"sd_accuracy", c.sd_accuracy},
                {"mean_entropy", c.mean_entropy},
                {"sd_entropy", c.sd_entropy}};
        if (c.failed) {
            jc["error"] = c.error;
            ++failed;
        }
        cells.push_back(std::move(jc));

        std::cout << "cell n_em=" << c.cell.n_em << " eta=" << c.cell.eta << ": ";
        if (c.failed)
            std::cout << "FAILED (" << c.error << ")\n";
        else
            std::cout << "final accuracy " << c.mean_final_accuracy << " +- " << c.sd_final_accuracy
                      << " over " << c.final_accuracy.size() << " trials\n";
    }

    const fs::path sdir = prepare_run_dir(cfg, "sweep-summary");
    json manifest = base_manifest("sweep", cfg, "sweep-summary");
    manifest["trials"] = trials;
    manifest["cells"] = std::move(cells);
    write_manifest(sdir, std::move(manifest), watch);
    std::cout << "summary -> " << (sdir / "manifest.json").string() << "\n";

    // A sweep with some diverged cells is still a result; only a sweep where
    // nothing trained maps to the non-finite-abort exit code.
    return failed == result.cells.size() ? 3 : 0;
}

// ---------------------------------------------------------------------------
// transfer

struct TransferCmdOpts {
    std::string config;
    std::string scheme;
    std::string pretrain;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool dry_run = false;
};

int cmd_transfer(const TransferCmdOpts& o) {
    ExperimentConfig cfg = load_experiment_config(o.config);
    if (o.seed_set) {
        cfg.seed = o.seed;
        cfg.train.seed = o.seed;
    }
    require_sections(cfg, true, true);
    std::string tag = o.scheme;
    if (tag.empty()) {
        if (!cfg.transfer) throw ConfigError("pass --scheme or add a \"transfer\" config section");
        tag = cfg.transfer->scheme;
    }
    TransferScheme scheme = TransferScheme::from_tag(tag);
    if (!cfg.arch.has_extra)
        throw ConfigError("transfer schemes need model.arch.has_extra = true so every scheme "
                          "shares one architecture");
    require_dataset_dir(cfg.train_dir);
    require_dataset_dir(cfg.test_dir);

    Checkpoint pretrain;
    if (scheme.tag != "B") {
        if (o.pretrain.empty())
            throw ConfigError("scheme " + scheme.tag +
                              " needs a phase-1 checkpoint (--pretrain); produce one with "
                              "`capslab train` on the pretraining domain");
        pretrain = load_checkpoint(o.pretrain);
        if (pretrain.family != to_string(cfg.family))
            throw ConfigError("phase-1 checkpoint holds a " + pretrain.family +
                              " model, config wants " + to_string(cfg.family));
        if (json_of(pretrain.spec) != json_of(cfg.arch))
            throw ConfigError("phase-1 checkpoint architecture differs from model.arch");
    }

    if (o.dry_run) {
        std::cout << "plan: scheme " << scheme.tag << " fine-tune of " << to_string(cfg.family)
                  << " on " << cfg.train_dir.string() << " (" << cfg.train.total_steps << " steps)\n";
        if (scheme.tag != "B")
            std::cout << "  from   " << o.pretrain << " (step " << pretrain.step << ")\n  frozen "
                      << scheme.frozen_layers << " bottom blocks + conv stem\n";
        std::cout << "  output " << (cfg.out_dir / cfg.name / (scheme.tag + "-finetune-B")).string() << "\n";
        return 0;
    }

    const StopWatch watch;
    const TrainData data = load_train_data(cfg);
    const TransferResult result = finetune_transfer(
        scheme, cfg.family, cfg.arch, scheme.tag != "B" ? &pretrain.params : nullptr, data,
        cfg.train);

    const fs::path dir = prepare_run_dir(cfg, result.finetune.run_id, true);
    write_metrics(dir, result.finetune);
    save_checkpoint(dir / "checkpoints" / "final.ckpt", result.checkpoint);

    const EvalResult final_eval =
        evaluate_model(cfg.family, cfg.arch, result.checkpoint.params, data.test);
    json manifest = base_manifest("transfer", cfg, result.finetune.run_id);
    manifest["family"] = to_string(cfg.family);
    manifest["scheme"] = scheme.tag;
    manifest["config_hash"] = hex64(config_hash(cfg.family, cfg.arch, cfg.train));
    manifest["outputs"] = {{"metrics", "metrics.ndjson"}, {"checkpoint", "checkpoints/final.ckpt"}};
    manifest["final"] = {{"duplex_accuracy", final_eval.duplex_accuracy}};
    if (scheme.tag != "B") {
        manifest["pretrain"] = {{"checkpoint", o.pretrain}, {"step", pretrain.step}};
        manifest["frozen"] = result.frozen;
        manifest["frozen_hash"] = hex64(result.frozen_hash_after);
    }
    write_manifest(dir, std::move(manifest), watch);

    std::cout << "scheme " << scheme.tag << ": test duplex accuracy " << final_eval.duplex_accuracy
              << " -> " << dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// embed

struct EmbedCmdOpts {
    std::string config;
    std::string checkpoint;
    std::string grid;
    std::string run_id;
    std::size_t restarts = 0;
    std::size_t jobs = 1;
    bool dry_run = false;
};

int cmd_embed(const EmbedCmdOpts& o) {
    const ExperimentConfig cfg = load_experiment_config(o.config);
    if (o.jobs == 0) throw ConfigError("--jobs must be >= 1");
    if (!fs::exists(o.checkpoint)) throw DataError("checkpoint not found: " + o.checkpoint);
    require_dataset_dir(o.grid);
    const std::size_t restarts = o.restarts > 0 ? o.restarts : cfg.analysis.restarts;
    const std::string run_id =
        o.run_id.empty() ? "embed-" + fs::path(o.grid).filename().string() : o.run_id;

    if (o.dry_run) {
        std::cout << "plan: embed tap of " << o.checkpoint << " over grid " << o.grid << "\n  t-SNE "
                  << cfg.analysis.iters << " iters, perplexity " << cfg.analysis.perplexity << ", "
                  << restarts << " restarts\n  output " << (cfg.out_dir / cfg.name / run_id).string() << "\n";
        return 0;
    }

    const StopWatch watch;
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const ModelFamily fam = family_from_string(ck.family);
    const LoadedDataset grid = load_dataset(o.grid);
    if (grid.samples.size() != 81)
        throw DataError("embedding grid needs 81 records (9x9 shifts), " + o.grid + " has " +
                        std::to_string(grid.samples.size()));

    const Tensor reprs = tap_representations(fam, ck.spec, ck.params, grid.samples);
    const Tensor lattice = shift_lattice();
    const fs::path dir = prepare_run_dir(cfg, run_id, false, true);

    auto one_restart = [&](std::size_t r) {
        TsneSettings st;
        st.perplexity = cfg.analysis.perplexity;
        st.iters = cfg.analysis.iters;
        st.seed = derive_seed(cfg.seed, kTagEmbedRestart, r);
        EmbeddingResult emb = tsne_embed(reprs, st, tap_name(fam));
        write_embedding_csv(dir / "embeddings" / ("restart" + std::to_string(r) + ".csv"), emb);
        return std::pair<Real, Real>{aligned_grid_cd(emb.points, lattice), emb.final_kl};
    };

    std::vector<std::pair<Real, Real>> by_restart(restarts);
    if (o.jobs <= 1) {
        for (std::size_t r = 0; r < restarts; ++r) by_restart[r] = one_restart(r);
    } else {
        for (std::size_t base = 0; base < restarts; base += o.jobs) {
            const std::size_t wave = std::min(o.jobs, restarts - base);
            std::vector<std::future<std::pair<Real, Real>>> pending;
            for (std::size_t k = 0; k < wave; ++k)
                pending.push_back(std::async(std::launch::async, one_restart, base + k));
            for (std::size_t k = 0; k < wave; ++k) by_restart[base + k] = pending[k].get();
        }
    }

    MetricStream metrics;
    metrics.run_id = run_id;
    std::vector<Real> cds;
    for (std::size_t r = 0; r < restarts; ++r) {
        metrics.add(static_cast<long>(r), "embed", "aligned_cd", by_restart[r].first);
        metrics.add(static_cast<long>(r), "embed", "final_kl", by_restart[r].second);
        cds.push_back(by_restart[r].first);
    }
    write_metrics(dir, metrics);
    const auto [mean_cd, sd_cd] = detail::mean_sd(cds);

    json manifest = base_manifest("embed", cfg, run_id);
    manifest["checkpoint"] = o.checkpoint;
    manifest["config_hash"] = hex64(ck.config_hash);
    manifest["tap"] = tap_name(fam);
    manifest["grid"] = {{"dir", o.grid}, {"meta", grid.meta}};
    manifest["tsne"] = {{"perplexity", cfg.analysis.perplexity},
                        {"iters", cfg.analysis.iters},
                        {"restarts", restarts}};
    manifest["aligned_cd"] = {{"per_restart", cds}, {"mean", mean_cd}, {"sd", sd_cd}};
    manifest["outputs"] = {{"metrics", "metrics.ndjson"}, {"embeddings", "embeddings/"}};
    write_manifest(dir, std::move(manifest), watch);

    std::cout << "tap " << tap_name(fam) << ": aligned CD " << mean_cd << " +- " << sd_cd
              << " over " << restarts << " restarts -> " << dir.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalCmdOpts {
    std::string config;
    std::string checkpoint;
    std::string data;
    std::string run_id;
    std::size_t limit = 0;
    bool dry_run = false;
};

int cmd_eval(const EvalCmdOpts& o) {
    const ExperimentConfig cfg = load_experiment_config(o.config);
    if (!fs::exists(o.checkpoint)) throw DataError("checkpoint not found: " + o.checkpoint);
    fs::path data_dir_path;
    if (!o.data.empty()) {
        data_dir_path = o.data;
    } else {
        if (!cfg.has_data) throw ConfigError("pass --data or add a \"data\" config section");
        data_dir_path = cfg.test_dir;
    }
    require_dataset_dir(data_dir_path);
    const std::string run_id =
        o.run_id.empty() ? "eval-" + data_dir_path.filename().string() : o.run_id;

    if (o.dry_run) {
        std::cout << "plan: evaluate " << o.checkpoint << " on " << data_dir_path.string()
                  << (o.limit ? " (first " + std::to_string(o.limit) + " samples)" : "")
                  << "\n  output " << (cfg.out_dir / cfg.name / run_id).string() << "\n";
        return 0;
    }

    const StopWatch watch;
    const Checkpoint ck = load_checkpoint(o.checkpoint);
    const ModelFamily fam = family_from_string(ck.family);
    const LoadedDataset data = load_dataset(data_dir_path);
    const EvalResult r = evaluate_model(fam, ck.spec, ck.params, data.samples, o.limit);

    const fs::path dir = prepare_run_dir(cfg, run_id);
    MetricStream metrics;
    metrics.run_id = run_id;
    metrics.add(ck.step, "test", "duplex_accuracy", r.duplex_accuracy);
    metrics.add(ck.step, "test", "loss", r.mean_loss);
    if (r.has_entropy) metrics.add(ck.step, "test", "mean_entropy_r1", r.mean_entropy_r1);
    write_metrics(dir, metrics);

    json manifest = base_manifest("eval", cfg, run_id);
    manifest["checkpoint"] = o.checkpoint;
    manifest["config_hash"] = hex64(ck.config_hash);
    manifest["family"] = ck.family;
    manifest["data"] = data_dir_path.string();
    manifest["outputs"] = {{"metrics", "metrics.ndjson"}};
    write_manifest(dir, std::move(manifest), watch);

    std::cout << ck.family << " @ step " << ck.step << ": duplex accuracy " << r.duplex_accuracy
              << ", mean loss " << r.mean_loss;
    if (r.has_entropy) std::cout << ", mean R1 entropy " << r.mean_entropy_r1;
    std::cout << "\n";
    return 0;
}

// ---------------------------------------------------------------------------

template <typename Fn>
int run_guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const TrainAbort& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"capsule-routing experiment platform"};
    app.set_version_flag("--version", std::string(CAPSLAB_VERSION));
    app.require_subcommand(1);

    DatagenOpts dg;
    auto* datagen = app.add_subcommand("datagen", "synthesize overlay datasets from MNIST IDX files");
    datagen->add_option("--mnist", dg.mnist_dir,
                        "IDX source directory (default $CAPSLAB_DATA_DIR/raw)");
    datagen->add_option("--out", dg.out, "dataset directory to write")->required();
    datagen->add_option("--seed", dg.seed, "generator seed");
    datagen->add_option("--count", dg.count, "sample count");
    datagen->add_option("--source", dg.source, "IDX split to draw digits from: train|test");
    datagen->add_option("--shift-grid", dg.shift_grid,
                        "write the 81-sample grid for FIXED MOVING digit classes")
        ->expected(2);
    datagen->add_option("--unit-px", dg.unit_px, "pixels per grid step");
    datagen->add_flag("--split-domains", dg.split_domains,
                      "write the domain pair split manifest instead of samples");
    datagen->add_option("--domains", dg.domains_file, "restrict pairs to one side of a split");
    datagen->add_option("--side", dg.side, "which split side to use: A|B");
    datagen->add_flag("--dry-run", dg.dry_run, "validate and print the plan only");

    TrainCmdOpts tr;
    auto* train = app.add_subcommand("train", "train one model from a config");
    train->add_option("--config", tr.config, "experiment config JSON")->required();
    train->add_option("--run-id", tr.run_id, "run directory name (default train-s<seed>)");
    auto* tr_seed = train->add_option("--seed", tr.seed, "override the config seed");
    train->add_option("--steps", tr.steps, "override train.total_steps");
    train->add_option("--data-train", tr.data_train, "override the training dataset directory");
    train->add_option("--data-test", tr.data_test, "override the test dataset directory");
    train->add_flag("--dry-run", tr.dry_run, "validate and print the plan only");

    SweepCmdOpts sw;
    auto* sweep = app.add_subcommand("sweep", "routing grid sweep: n_em x eta x trials");
    sweep->add_option("--config", sw.config, "experiment config JSON")->required();
    auto* sw_seed = sweep->add_option("--seed", sw.seed, "override the config seed");
    sweep->add_option("--trials", sw.trials, "override sweep.trials");
    sweep->add_flag("--dry-run", sw.dry_run, "validate and print the plan only");

    TransferCmdOpts tf;
    auto* transfer = app.add_subcommand("transfer", "fine-tune on domain B under a freezing scheme");
    transfer->add_option("--config", tf.config, "experiment config JSON")->required();
    transfer->add_option("--scheme", tf.scheme, "B, B1B, B2B, A1B or A2B (default from config)");
    transfer->add_option("--pretrain", tf.pretrain, "phase-1 checkpoint (required unless scheme B)");
    auto* tf_seed = transfer->add_option("--seed", tf.seed, "override the config seed");
    transfer->add_flag("--dry-run", tf.dry_run, "validate and print the plan only");

    EmbedCmdOpts em;
    auto* embed = app.add_subcommand("embed", "t-SNE embed a model's tap over a shift grid");
    embed->add_option("--config", em.config, "experiment config JSON")->required();
    embed->add_option("--checkpoint", em.checkpoint, "trained model checkpoint")->required();
    embed->add_option("--grid", em.grid, "81-sample shift-grid dataset directory")->required();
    embed->add_option("--run-id", em.run_id, "run directory name (default embed-<grid>)");
    embed->add_option("--restarts", em.restarts, "override analysis.restarts");
    embed->add_option("--jobs", em.jobs, "max concurrent embedding restarts");
    embed->add_flag("--dry-run", em.dry_run, "validate and print the plan only");

    EvalCmdOpts ev;
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval->add_option("--config", ev.config, "experiment config JSON")->required();
    eval->add_option("--checkpoint", ev.checkpoint, "trained model checkpoint")->required();
    eval->add_option("--data", ev.data, "dataset directory (default the config's test set)");
    eval->add_option("--run-id", ev.run_id, "run directory name (default eval-<dataset>)");
    eval->add_option("--limit", ev.limit, "evaluate only the first N samples (0 = all)");
    eval->add_flag("--dry-run", ev.dry_run, "validate and print the plan only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }
    tr.seed_set = tr_seed->count() > 0;
    sw.seed_set = sw_seed->count() > 0;
    tf.seed_set = tf_seed->count() > 0;

    return run_guarded([&]() -> int {
        if (app.got_subcommand(datagen)) return cmd_datagen(dg);
        if (app.got_subcommand(train)) return cmd_train(tr);
        if (app.got_subcommand(sweep)) return cmd_sweep(sw);
        if (app.got_subcommand(transfer)) return cmd_transfer(tf);
        if (app.got_subcommand(embed)) return cmd_embed(em);
        if (app.got_subcommand(eval)) return cmd_eval(ev);
        return 1;
    });
}
