#pragma once

#include <algorithm>
#include <set>
#include <sstream>
#include <tuple>

#include "capslab/checkpoint.hpp"
#include "capslab/datagen.hpp"
#include "capslab/metrics.hpp"

// Mini-batch training with periodic evaluation, multi-trial sweeps over the
// routing hyperparameters (iteration count, update rate), and two-phase
// transfer runs with bottom-block freezing.

namespace capslab {

enum class ModelFamily { capsnet, cnn };

inline std::string to_string(ModelFamily f) { return f == ModelFamily::capsnet ? "capsnet" : "cnn"; }

struct TrainConfig {
    std::size_t batch_size = 32;
    std::size_t total_steps = 3000;
    std::size_t eval_every = 100;
    AdamConfig adam;
    std::uint64_t seed = 1;
    std::size_t trials = 1;
    // Cap on test samples per periodic evaluation; 0 means the whole test set.
    std::size_t eval_subset = 0;

    void validate() const {
        if (batch_size == 0 || total_steps == 0 || eval_every == 0)
            throw std::invalid_argument("batch_size, total_steps and eval_every must be positive");
        if (trials == 0) throw std::invalid_argument("trials must be >= 1");
        adam.validate();
    }
};

inline nlohmann::json json_of(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"total_steps", c.total_steps},
            {"eval_every", c.eval_every},
            {"adam", nlohmann::json{{"lr", c.adam.lr},
                                    {"beta1", c.adam.beta1},
                                    {"beta2", c.adam.beta2},
                                    {"eps", c.adam.eps}}},
            {"seed", c.seed},
            {"trials", c.trials},
            {"eval_subset", c.eval_subset}};
}

/// Stable digest of everything that determines a run. Stored in checkpoints
/// so a resume against a different configuration is rejected.
inline std::uint64_t config_hash(ModelFamily fam, const CapsNetSpec& spec, const TrainConfig& cfg) {
    const nlohmann::json j{{"family", to_string(fam)}, {"arch", json_of(spec)}, {"train", json_of(cfg)}};
    return fnv1a64(j.dump());
}

class TrainAbort : public std::runtime_error {
public:
    TrainAbort(long step, std::string quantity)
        : std::runtime_error("training aborted at step " + std::to_string(step) + ": non-finite " +
                             quantity),
          step_(step),
          quantity_(std::move(quantity)) {}
    long step() const { return step_; }
    const std::string& quantity() const { return quantity_; }

private:
    long step_;
    std::string quantity_;
};

struct TrainData {
    std::vector<MultiMnistSample> train;
    std::vector<MultiMnistSample> test;
};

struct EvalResult {
    Real duplex_accuracy = 0;
    Real mean_entropy_r1 = 0;
    bool has_entropy = false;
    Real mean_loss = 0;
};

namespace detail {

inline constexpr std::uint64_t kTagInit = 0x74696e69;
inline constexpr std::uint64_t kTagBatch = 0x68637462;
inline constexpr std::uint64_t kTagSweep = 0x70656577;
inline constexpr std::uint64_t kTagPhase1 = 0x31687068;
inline constexpr std::uint64_t kTagPhase2 = 0x32687068;

inline Tensor as_input(const MultiMnistSample& s, std::size_t edge) {
    if (s.image.rank() != 2 || s.image.extent(0) != edge || s.image.extent(1) != edge)
        throw ShapeError("sample image is " + shape_str(s.image.shape()) + ", model expects " +
                         std::to_string(edge) + "x" + std::to_string(edge));
    return s.image.reshaped({std::size_t{1}, edge, edge});
}

inline ForwardOut forward_any(ModelFamily fam, const CapsNetSpec& spec, Tape& tape,
                              const BoundParams& bp, const ParamSet& p, const Tensor& image) {
    return fam == ModelFamily::capsnet ? capsnet_forward(spec, tape, bp, p, image)
                                       : cnn_forward(spec, tape, bp, p, image);
}

inline Var sample_loss(ModelFamily fam, const ForwardOut& out, const DuplexLabel& labels,
                       std::size_t classes) {
    if (fam == ModelFamily::capsnet) return margin_loss(out.scores, labels);
    return bce_with_logits(out.logits, two_hot(labels, classes));
}

inline std::pair<Real, Real> mean_sd(const std::vector<Real>& xs) {
    if (xs.empty()) return {0, 0};
    Real mean = 0;
    for (Real x : xs) mean += x;
    mean /= static_cast<Real>(xs.size());
    if (xs.size() < 2) return {mean, 0};
    Real ss = 0;
    for (Real x : xs) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<Real>(xs.size() - 1))};
}

}  // namespace detail

/// Duplex accuracy (both digits right), mean per-sample loss, and the mean
/// association entropy of the first routing site, over up to `limit` samples
/// (0 = all). Pure function of (params, samples).
inline EvalResult evaluate_model(ModelFamily fam, const CapsNetSpec& spec, const ParamSet& params,
                                 const std::vector<MultiMnistSample>& samples, std::size_t limit = 0) {
    if (samples.empty()) throw std::invalid_argument("evaluate_model: empty sample set");
    const std::size_t n = limit == 0 ? samples.size() : std::min(limit, samples.size());
    std::size_t correct = 0;
    Real loss_sum = 0;
    std::vector<RoutingTrace> first_site;
    first_site.reserve(fam == ModelFamily::capsnet ? n : 0);
    for (std::size_t i = 0; i < n; ++i) {
        Tape tape;
        BoundParams bp = bind_params(tape, params);
        ForwardOut out =
            detail::forward_any(fam, spec, tape, bp, params, detail::as_input(samples[i], spec.input_edge));
        loss_sum += detail::sample_loss(fam, out, samples[i].labels, spec.class_count).value()[0];
        if (duplex_predict(out.scores.value()).pair == samples[i].labels) ++correct;
        if (fam == ModelFamily::capsnet) first_site.push_back(std::move(out.traces.front()));
    }
    EvalResult r;
    r.duplex_accuracy = static_cast<Real>(correct) / static_cast<Real>(n);
    r.mean_loss = loss_sum / static_cast<Real>(n);
    if (fam == ModelFamily::capsnet) {
        r.mean_entropy_r1 = mean_association_entropy(first_site);
        r.has_entropy = true;
    }
    return r;
}

/// Tap activations (flattened first capsule layer, or first fully-connected
/// layer) for each sample, stacked into [N, F]. The embedding input.
inline Tensor tap_representations(ModelFamily fam, const CapsNetSpec& spec, const ParamSet& params,
                                  const std::vector<MultiMnistSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("tap_representations: empty sample set");
    Tensor reprs;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        Tape tape;
        BoundParams bp = bind_params(tape, params);
        ForwardOut out =
            detail::forward_any(fam, spec, tape, bp, params, detail::as_input(samples[i], spec.input_edge));
        const Tensor& tap = out.tap.value();
        if (i == 0) reprs = Tensor({samples.size(), tap.numel()});
        for (std::size_t k = 0; k < tap.numel(); ++k) reprs(i, k) = tap[k];
    }
    return reprs;
}

inline std::string tap_name(ModelFamily fam) {
    return fam == ModelFamily::capsnet ? "Cap1" : "Linear1";
}

struct TrainResult {
    Checkpoint checkpoint;
    MetricStream metrics;
};

struct TrainOptions {
    std::string run_id;
    const Checkpoint* resume = nullptr;            // continue a saved run
    const std::vector<std::string>* frozen = nullptr;  // parameter names Adam must not touch
    const ParamSet* init_params = nullptr;         // start from these instead of fresh init
    // Pause after this step (0 = run to total_steps). Execution control only,
    // so it does not enter the config hash: pausing and resuming must
    // reproduce the uninterrupted run bit for bit.
    long stop_after_step = 0;
};

inline TrainResult train_model(ModelFamily fam, const CapsNetSpec& spec, const TrainData& data,
                               const TrainConfig& cfg, const TrainOptions& opts = {}) {
    cfg.validate();
    spec.validate();
    if (data.train.empty()) throw std::invalid_argument("train_model: empty training set");
    if (data.test.empty()) throw std::invalid_argument("train_model: empty test set");
    const std::uint64_t hash = config_hash(fam, spec, cfg);

    ParamSet params;
    Adam adam;
    Rng batch_rng;
    long start_step = 0;
    if (opts.resume) {
        const Checkpoint& ck = *opts.resume;
        if (ck.config_hash != hash)
            throw CheckpointError("checkpoint was written under a different configuration");
        if (ck.family != to_string(fam))
            throw CheckpointError("checkpoint holds a " + ck.family + " model");
        params = ck.params;
        adam = Adam(ck.adam_cfg, params);
        adam.restore(ck.adam_t, ck.adam_m, ck.adam_v);
        std::istringstream iss(ck.rng_state);
        iss >> batch_rng;
        if (!iss) throw CheckpointError("corrupt RNG state in checkpoint");
        start_step = ck.step;
    } else {
        if (opts.init_params)
            params = *opts.init_params;
        else
            params = fam == ModelFamily::capsnet
                         ? init_capsnet_params(spec, derive_seed(cfg.seed, detail::kTagInit))
                         : init_cnn_params(spec, derive_seed(cfg.seed, detail::kTagInit));
        adam = Adam(cfg.adam, params);
        batch_rng.seed(derive_seed(cfg.seed, detail::kTagBatch));
    }

    std::vector<bool> trainable;
    if (opts.frozen && !opts.frozen->empty()) {
        trainable.assign(params.values.size(), true);
        for (const auto& name : *opts.frozen) trainable[params.index_of(name)] = false;
    }

    MetricStream metrics;
    metrics.run_id = opts.run_id.empty() ? "run-" + std::to_string(cfg.seed) : opts.run_id;

    const std::size_t n_train = data.train.size();
    long last_step = static_cast<long>(cfg.total_steps);
    if (opts.stop_after_step > 0) last_step = std::min(last_step, opts.stop_after_step);
    for (long step = start_step + 1; step <= last_step; ++step) {
        Tape tape;
        BoundParams bp = bind_params(tape, params);
        Var total;
        for (std::size_t b = 0; b < cfg.batch_size; ++b) {
            const std::size_t idx = static_cast<std::size_t>(batch_rng() % n_train);
            ForwardOut out = detail::forward_any(fam, spec, tape, bp, params,
                                                 detail::as_input(data.train[idx], spec.input_edge));
            Var li = detail::sample_loss(fam, out, data.train[idx].labels, spec.class_count);
            total = b == 0 ? li : add(total, li);
        }
        Var loss = affine(total, Real{1} / static_cast<Real>(cfg.batch_size), Real{0});
        const Real loss_value = loss.value()[0];
        if (!std::isfinite(loss_value)) throw TrainAbort(step, "loss");

        tape.backward(loss);
        std::vector<Tensor> grads;
        grads.reserve(bp.vars.size());
        for (std::size_t i = 0; i < bp.vars.size(); ++i) {
            grads.push_back(tape.grad(bp.vars[i].id));
            if (!grads.back().all_finite()) throw TrainAbort(step, "gradient of " + params.names[i]);
        }
        adam.step(params, grads, trainable.empty() ? nullptr : &trainable);
        for (std::size_t i = 0; i < params.values.size(); ++i)
            if (!params.values[i].all_finite()) throw TrainAbort(step, "parameter " + params.names[i]);

        if (step % static_cast<long>(cfg.eval_every) == 0) {
            const EvalResult er = evaluate_model(fam, spec, params, data.test, cfg.eval_subset);
            metrics.add(step, "train", "loss", loss_value);
            metrics.add(step, "test", "duplex_accuracy", er.duplex_accuracy);
            if (er.has_entropy) metrics.add(step, "test", "mean_entropy_r1", er.mean_entropy_r1);
        }
    }

    TrainResult result;
    result.metrics = std::move(metrics);
    Checkpoint& ck = result.checkpoint;
    ck.family = to_string(fam);
    ck.spec = spec;
    ck.params = std::move(params);
    ck.step = last_step;
    std::ostringstream oss;
    oss << batch_rng;
    ck.rng_state = oss.str();
    ck.adam_t = adam.step_count();
    ck.adam_cfg = adam.config();
    ck.adam_m = adam.first_moments();
    ck.adam_v = adam.second_moments();
    ck.config_hash = hash;
    return result;
}

// ---------------------------------------------------------------------------
// routing sweeps

struct SweepCell {
    std::size_t n_em = 3;
    Real eta = 1.0;
};

struct CellStats {
    SweepCell cell;
    bool failed = false;
    std::string error;
    std::vector<std::uint64_t> trial_seeds;
    std::vector<MetricStream> trial_metrics;
    std::vector<Real> final_accuracy;  // one per trial
    Real mean_final_accuracy = 0, sd_final_accuracy = 0;
    // Trajectories across the shared eval steps, aggregated over trials.
    std::vector<long> eval_steps;
    std::vector<Real> mean_accuracy, sd_accuracy, mean_entropy, sd_entropy;
};

struct SweepResult {
    std::vector<CellStats> cells;
};

/// `trials` independent runs per (n_em, eta) cell. The cell's iteration count
/// and update rate are applied to every routing site; trial seeds are derived
/// from the base seed and must all be distinct. A trial abort marks its cell
/// failed and the sweep moves on.
inline SweepResult sweep_routing(const std::vector<SweepCell>& grid, std::size_t trials,
                                 ModelFamily fam, const CapsNetSpec& base, const TrainData& data,
                                 const TrainConfig& cfg) {
    if (grid.empty()) throw std::invalid_argument("sweep_routing: empty grid");
    if (trials == 0) throw std::invalid_argument("sweep_routing: trials must be >= 1");

    std::set<std::uint64_t> seen;
    for (std::size_t ci = 0; ci < grid.size(); ++ci)
        for (std::size_t ti = 0; ti < trials; ++ti)
            if (!seen.insert(derive_seed(cfg.seed, detail::kTagSweep, ci, ti)).second)
                throw std::logic_error("sweep_routing: derived trial seeds collide");

    SweepResult result;
    for (std::size_t ci = 0; ci < grid.size(); ++ci) {
        CellStats stats;
        stats.cell = grid[ci];
        CapsNetSpec spec = base;
        spec.r1.n_em = spec.r2.n_em = spec.r3.n_em = grid[ci].n_em;
        spec.r1.eta = spec.r2.eta = spec.r3.eta = grid[ci].eta;

        for (std::size_t ti = 0; ti < trials && !stats.failed; ++ti) {
            TrainConfig tc = cfg;
            tc.seed = derive_seed(cfg.seed, detail::kTagSweep, ci, ti);
            tc.trials = 1;
            stats.trial_seeds.push_back(tc.seed);
            std::ostringstream rid;
            rid << "sweep-nem" << grid[ci].n_em << "-eta" << grid[ci].eta << "-t" << ti;
            TrainOptions opts;
            opts.run_id = rid.str();
            try {
                TrainResult tr = train_model(fam, spec, data, tc, opts);
                const auto acc = tr.metrics.series("duplex_accuracy");
                stats.final_accuracy.push_back(acc.empty() ? Real{0} : acc.back().second);
                stats.trial_metrics.push_back(std::move(tr.metrics));
            } catch (const TrainAbort& e) {
                stats.failed = true;
                stats.error = e.what();
            }
        }
        if (!stats.failed) {
            std::tie(stats.mean_final_accuracy, stats.sd_final_accuracy) =
                detail::mean_sd(stats.final_accuracy);
            if (!stats.trial_metrics.empty()) {
                const auto ref = stats.trial_metrics.front().series("duplex_accuracy");
                for (const auto& [step, value] : ref) stats.eval_steps.push_back(step);
                for (std::size_t k = 0; k < stats.eval_steps.size(); ++k) {
                    std::vector<Real> accs, ents;
                    for (const auto& m : stats.trial_metrics) {
                        accs.push_back(m.series("duplex_accuracy")[k].second);
                        const auto es = m.series("mean_entropy_r1");
                        if (!es.empty()) ents.push_back(es[k].second);
                    }
                    const auto [ma, sa] = detail::mean_sd(accs);
                    stats.mean_accuracy.push_back(ma);
                    stats.sd_accuracy.push_back(sa);
                    if (!ents.empty()) {
                        const auto [me, se] = detail::mean_sd(ents);
                        stats.mean_entropy.push_back(me);
                        stats.sd_entropy.push_back(se);
                    }
                }
            }
        }
        result.cells.push_back(std::move(stats));
    }
    return result;
}

// ---------------------------------------------------------------------------
// transfer schemes

struct TransferScheme {
    std::string tag;  // B, B1B, B2B, A1B or A2B
    char pretrain_domain = 'B';
    std::size_t frozen_layers = 0;

    static TransferScheme from_tag(const std::string& tag) {
        if (tag == "B") return {tag, 'B', 0};
        if (tag == "B1B") return {tag, 'B', 1};
        if (tag == "B2B") return {tag, 'B', 2};
        if (tag == "A1B") return {tag, 'A', 1};
        if (tag == "A2B") return {tag, 'A', 2};
        throw std::invalid_argument("unknown transfer scheme tag '" + tag + "'");
    }

    void validate() const {
        const TransferScheme expect = from_tag(tag);
        if (pretrain_domain != expect.pretrain_domain || frozen_layers != expect.frozen_layers)
            throw std::invalid_argument("transfer scheme fields inconsistent with tag " + tag);
    }
};

struct TransferData {
    TrainData domain_a;
    TrainData domain_b;
};

struct TransferResult {
    MetricStream pretrain;  // empty for the plain-B baseline
    MetricStream finetune;
    Checkpoint pretrain_checkpoint;  // phase-1 endpoint; empty for the baseline
    Checkpoint checkpoint;           // phase-2 endpoint
    std::vector<std::string> frozen;
    std::uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
};

inline void require_transfer_variant(const CapsNetSpec& spec) {
    if (!spec.has_extra)
        throw std::invalid_argument(
            "transfer expects the variant with the extra capsule layer so every scheme shares "
            "one architecture");
}

/// Phase 2 alone: keep the conv stem plus the scheme's bottom blocks at their
/// `pretrained` values (frozen, bit-identical across the run) and train the
/// remaining layers on domain B from a fresh initialization. The plain-B
/// baseline takes no pretrained parameters; every other scheme requires them.
/// Routing still runs dynamically through the frozen blocks.
inline TransferResult finetune_transfer(const TransferScheme& scheme, ModelFamily fam,
                                        const CapsNetSpec& spec, const ParamSet* pretrained,
                                        const TrainData& domain_b, const TrainConfig& cfg) {
    scheme.validate();
    require_transfer_variant(spec);
    if (scheme.tag != "B" && !pretrained)
        throw std::invalid_argument("scheme " + scheme.tag +
                                    " needs phase-1 parameters to fine-tune from");

    TransferResult result;
    result.frozen = frozen_param_names(spec, fam == ModelFamily::cnn, scheme.frozen_layers);

    TrainConfig c2 = cfg;
    c2.seed = derive_seed(cfg.seed, detail::kTagPhase2);
    TrainOptions o2;
    o2.run_id = scheme.tag + "-finetune-B";
    ParamSet start;
    if (scheme.tag != "B") {
        // The re-adjusted layers restart from a fresh draw; only the frozen
        // stack carries over. Fine-tuning the top from its phase-1 values
        // would leave the cross-layer coupling intact, which is exactly what
        // the freezing schemes are supposed to break.
        const std::uint64_t init_seed = derive_seed(c2.seed, detail::kTagInit);
        start = fam == ModelFamily::cnn ? init_cnn_params(spec, init_seed)
                                        : init_capsnet_params(spec, init_seed);
        for (const auto& name : result.frozen) start.at(name) = pretrained->at(name);
        o2.init_params = &start;
        o2.frozen = &result.frozen;
        result.frozen_hash_before = param_bytes_hash(*pretrained, result.frozen);
    }
    TrainResult r2 = train_model(fam, spec, domain_b, c2, o2);
    result.finetune = std::move(r2.metrics);
    result.checkpoint = std::move(r2.checkpoint);
    if (scheme.tag != "B") {
        result.frozen_hash_after = param_bytes_hash(result.checkpoint.params, result.frozen);
        if (result.frozen_hash_before != result.frozen_hash_after)
            throw std::logic_error("frozen parameters changed during fine-tuning");
    }
    return result;
}

/// Phase 1 trains every layer on the pretraining domain; phase 2 fine-tunes
/// on domain B via finetune_transfer. The plain-B baseline (frozen_layers 0)
/// is a single training run.
inline TransferResult run_transfer(const TransferScheme& scheme, ModelFamily fam,
                                   const CapsNetSpec& spec, const TransferData& data,
                                   const TrainConfig& cfg) {
    scheme.validate();
    require_transfer_variant(spec);

    ParamSet phase1_params;
    MetricStream phase1_metrics;
    Checkpoint phase1_ckpt;
    if (scheme.tag != "B") {
        TrainConfig c1 = cfg;
        c1.seed = derive_seed(cfg.seed, detail::kTagPhase1);
        TrainOptions o1;
        o1.run_id = scheme.tag + "-pretrain-" + scheme.pretrain_domain;
        const TrainData& d1 = scheme.pretrain_domain == 'A' ? data.domain_a : data.domain_b;
        TrainResult r1 = train_model(fam, spec, d1, c1, o1);
        phase1_metrics = std::move(r1.metrics);
        phase1_ckpt = std::move(r1.checkpoint);
        phase1_params = phase1_ckpt.params;
    }

    TransferResult result = finetune_transfer(
        scheme, fam, spec, scheme.tag != "B" ? &phase1_params : nullptr, data.domain_b, cfg);
    result.pretrain = std::move(phase1_metrics);
    result.pretrain_checkpoint = std::move(phase1_ckpt);
    return result;
}

}  // namespace capslab
