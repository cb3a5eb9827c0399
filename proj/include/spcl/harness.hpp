#pragma once

// Experiment harness: continual runs over a task stream (train -> consolidate
// -> evaluate, per stage), the joint-training reference, ablation baselines,
// alpha sweeps, and deterministic CSV reporting.
//
// Stage indexing: stage 0 is the starting model (the joint-trained base in
// the fine-tuning setting), stage t >= 1 follows training on stream task t.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "spcl/consolidation.hpp"
#include "spcl/nn.hpp"
#include "spcl/regularizers.hpp"
#include "spcl/rng.hpp"
#include "spcl/tasks.hpp"
#include "spcl/tensor.hpp"

namespace spcl::harness {

enum class Method {
    vanilla,
    modelmix,
    sac,
    uir,
    sac_uir,
    fkl,
    ewc,
    replay,
    joint
};

inline const char* to_string(Method m) {
    switch (m) {
        case Method::vanilla: return "vanilla";
        case Method::modelmix: return "modelmix";
        case Method::sac: return "sac";
        case Method::uir: return "uir";
        case Method::sac_uir: return "sac_uir";
        case Method::fkl: return "fkl";
        case Method::ewc: return "ewc";
        case Method::replay: return "replay";
        case Method::joint: return "joint";
    }
    return "unknown";
}

inline Method method_from_string(const std::string& s) {
    for (Method m : {Method::vanilla, Method::modelmix, Method::sac,
                     Method::uir, Method::sac_uir, Method::fkl, Method::ewc,
                     Method::replay, Method::joint})
        if (s == to_string(m)) return m;
    throw std::invalid_argument("unknown method '" + s + "'");
}

inline bool uses_consolidation(Method m) {
    return m == Method::modelmix || m == Method::sac || m == Method::sac_uir ||
           m == Method::fkl || m == Method::replay;
}

inline bool uses_uir(Method m) {
    return m == Method::uir || m == Method::sac_uir;
}

struct RunConfig {
    nn::ModelConfig model;                 // 64-vocab toy transformer
    Method method = Method::sac_uir;
    consolidation::MixConfig mix;          // alpha 0.2, window-mean
    double lr = 3e-4;                      // per-stage peak learning rate
    double weight_decay = 0.0;
    // Generous Adam epsilon for the toy regime: once a stage's loss reaches
    // ~0 its per-coordinate gradients drop below eps and the optimizer stops
    // drifting, instead of random-walking at full step size on normalized
    // noise.
    double adam_eps = 1e-5;
    std::size_t batch_size = 4;
    std::size_t epochs_per_stage = 1;      // one epoch per stage
    double warmup_ratio = 0.03;
    std::uint64_t seed = 0;

    std::size_t n_train = 300;             // per task
    std::size_t n_test = 60;
    double inquiry_fraction = 0.10;        // of a stage's task size

    bool pretrained_base = true;           // fine-tuning vs pretraining analog
    std::size_t base_epochs = 3;           // joint training of the base mixture
    double base_lr = 1e-3;

    double replay_ratio = 0.25;
    double ewc_lambda = 10.0;
    std::size_t fisher_samples = 100;

    std::size_t eval_max_new = 6;

    void validate() const {
        model.validate();
        consolidation::validate(mix);
        if (!(lr > 0) || !(base_lr > 0))
            throw std::invalid_argument("run config: learning rates must be > 0");
        if (!(adam_eps > 0))
            throw std::invalid_argument("run config: adam_eps must be > 0");
        if (batch_size == 0 || epochs_per_stage == 0 || base_epochs == 0)
            throw std::invalid_argument("run config: counts must be >= 1");
        if (warmup_ratio < 0 || warmup_ratio >= 1)
            throw std::invalid_argument("run config: warmup_ratio in [0,1)");
        if (!(inquiry_fraction > 0) || inquiry_fraction > 1)
            throw std::invalid_argument("run config: inquiry_fraction in (0,1]");
        if (!(replay_ratio > 0 && replay_ratio < 1))
            throw std::invalid_argument("run config: replay_ratio in (0,1)");
        if (ewc_lambda < 0)
            throw std::invalid_argument("run config: ewc_lambda must be >= 0");
        if (model.vocab_size != std::size_t(tasks::kVocabSize))
            throw std::invalid_argument(
                "run config: model vocab must match the task vocabulary");
    }
};

// Aborts a run when training produces a non-finite loss.
class DivergenceError : public std::runtime_error {
  public:
    DivergenceError(std::size_t stage, std::size_t step)
        : std::runtime_error("divergence: non-finite loss at stage " +
                             std::to_string(stage) + ", step " +
                             std::to_string(step)),
          stage_(stage),
          step_(step) {}
    std::size_t stage() const { return stage_; }
    std::size_t step() const { return step_; }

  private:
    std::size_t stage_, step_;
};

struct Row {
    std::string run_id;
    Method method = Method::vanilla;
    double alpha = 0.0;
    std::uint64_t seed = 0;
    std::size_t stage = 0;
    std::string task_id;
    double loss = 0.0;
    double acc = 0.0;
    double eps = 0.0;
    double gen_acc = 0.0;
    double lang_shift = 0.0;
};

struct RunRecord {
    RunConfig cfg;
    std::string run_id;
    std::vector<Row> rows;
    std::vector<std::string> stream_task_ids;
    ParamSet final_params;
    std::vector<ParamSet> stage_params; // index = stage
    double wall_seconds = 0.0;
};

struct StreamData {
    std::vector<tasks::TaskData> base;
    std::vector<tasks::TaskData> stream;
    std::vector<std::vector<int>> inquiry;
};

inline StreamData make_stream(const RunConfig& cfg) {
    cfg.validate();
    StreamData data;
    for (const auto& spec :
         tasks::default_base_specs(cfg.seed, cfg.n_train, cfg.n_test))
        data.base.push_back(tasks::gen_task(spec));
    for (const auto& spec :
         tasks::default_stream_specs(cfg.seed, cfg.n_train, cfg.n_test))
        data.stream.push_back(tasks::gen_task(spec));

    // Inquiry text covers the base instruction formats and free-form noise
    // only: it stands in for generic language data, so it must not leak the
    // streamed tasks' instructions (anchoring those would pin exactly the
    // representations each stage needs to move).
    std::vector<tasks::TaskSpec> base_specs;
    for (const auto& t : data.base) base_specs.push_back(t.spec);
    std::size_t inquiry_size = std::size_t(
        std::max(1.0, cfg.inquiry_fraction * double(cfg.n_train) + 0.5));
    data.inquiry = tasks::make_inquiry_prompts(base_specs, inquiry_size,
                                               mix_seed(cfg.seed, 0x19abu));
    return data;
}

// ---- evaluation --------------------------------------------------------------

// Exact match: greedy decode must reproduce response + <eos> from the prompt.
inline double exact_match_accuracy(const nn::ModelConfig& cfg,
                                   const ParamSet& params,
                                   const std::vector<tasks::Example>& test) {
    if (test.empty()) throw std::invalid_argument("accuracy: empty test set");
    std::size_t hits = 0;
    for (const auto& e : test) {
        std::vector<int> prompt = tasks::decode_prompt(e);
        std::vector<int> want = prompt;
        want.insert(want.end(), e.response.begin(), e.response.end());
        want.push_back(tasks::kEos);
        std::vector<int> got = nn::decode_greedy(
            cfg, params, prompt, e.response.size() + 1, tasks::kEos);
        if (got == want) ++hits;
    }
    return double(hits) / double(test.size());
}

// Mean cross-entropy over the response positions of a test split.
inline double mean_response_loss(const nn::ModelConfig& cfg,
                                 const ParamSet& params,
                                 const std::vector<tasks::Example>& test) {
    nn::Batch batch = tasks::to_training_batch(test);
    auto traces = nn::forward(cfg, params, batch);
    return nn::loss_ce(cfg, traces, batch);
}

// L2 distance of final hidden states on a probe set, averaged over prompts;
// the same computation as the inquiry loss between two arbitrary snapshots.
inline double language_shift(const nn::ModelConfig& cfg, const ParamSet& a,
                             const ParamSet& b,
                             const std::vector<std::vector<int>>& prompts) {
    if (prompts.empty())
        throw std::invalid_argument("language_shift: empty probe");
    double total = 0.0;
    for (const auto& p : prompts) {
        auto ha = nn::forward_seq(cfg, a, p).hidden;
        auto hb = nn::forward_seq(cfg, b, p).hidden;
        auto [norm, dh] = reg::uir_from_hidden(ha, hb);
        total += norm;
    }
    return total / double(prompts.size());
}

// ---- training ---------------------------------------------------------------

namespace detail {

inline double cosine_lr(double peak, std::size_t step, std::size_t total,
                        double warmup_ratio) {
    std::size_t warmup = std::max<std::size_t>(
        1, std::size_t(warmup_ratio * double(total) + 0.5));
    if (step < warmup) return peak * double(step + 1) / double(warmup);
    if (total <= warmup) return peak;
    double progress = double(step - warmup) / double(total - warmup);
    return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// method-specific extras for one stage of training
struct StageContext {
    Method method = Method::vanilla;
    const ParamSet* teacher = nullptr;
    const std::vector<std::vector<int>>* inquiry = nullptr;
    std::vector<std::vector<float>> teacher_hidden; // uir cache
    std::vector<std::vector<float>> teacher_logits; // fkl cache, per prompt
    const ParamSet* ewc_anchor = nullptr;
    const ParamSet* ewc_fisher = nullptr;
    double ewc_lambda = 0.0;
};

// One pass of AdamW training with cosine decay; returns the trained params.
// Loss components: cross-entropy on the batch plus the method's regularizer
// on a cycling inquiry minibatch.
inline ParamSet train_pass(const RunConfig& rc, ParamSet params,
                           const std::vector<tasks::Example>& examples,
                           const StageContext& ctx, double peak_lr,
                           std::size_t epochs, std::size_t stage_for_errors) {
    if (examples.empty())
        throw std::invalid_argument("train: no examples");
    const nn::ModelConfig& mc = rc.model;
    const std::size_t n = examples.size();
    const std::size_t steps_per_epoch = (n + rc.batch_size - 1) / rc.batch_size;
    const std::size_t total_steps = steps_per_epoch * epochs;

    nn::AdamWConfig opt;
    opt.weight_decay = rc.weight_decay;
    opt.eps = rc.adam_eps;
    auto state = nn::make_adamw_state(params);

    const bool with_uir = uses_uir(ctx.method) && ctx.inquiry;
    const bool with_fkl = ctx.method == Method::fkl && ctx.inquiry;
    const bool with_ewc = ctx.method == Method::ewc && ctx.ewc_anchor;
    std::size_t inquiry_cursor = 0;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    std::size_t global_step = 0;
    // training can overflow the logits; surface that as divergence with
    // stage/step context instead of a bare forward error
    auto checked_forward = [&](const std::vector<int>& toks) {
        try {
            return nn::forward_seq(mc, params, toks);
        } catch (const std::runtime_error& e) {
            if (std::string(e.what()).find("non-finite") != std::string::npos)
                throw DivergenceError(stage_for_errors, global_step);
            throw;
        }
    };
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        Rng shuffle_rng(mix_seed(rc.seed, 0xe90cu + 131 * stage_for_errors + epoch));
        shuffle_rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += rc.batch_size) {
            const std::size_t stop = std::min(n, start + rc.batch_size);
            nn::Batch batch;
            for (std::size_t i = start; i < stop; ++i)
                tasks::append_example(batch, examples[order[i]]);
            const std::size_t n_sup = nn::count_supervised(batch);

            double loss = 0.0;
            ParamSet grads = zeros_like(params);
            for (std::size_t s = 0; s < batch.inputs.size(); ++s) {
                auto tr = checked_forward(batch.inputs[s]);
                // accumulate the batch-mean NLL over supervised positions
                const std::size_t v = mc.vocab_size;
                for (std::size_t t = 0; t < tr.t_len; ++t) {
                    if (!batch.mask[s][t]) continue;
                    const float* row = tr.logits.data() + t * v;
                    double hi = row[0];
                    for (std::size_t c = 1; c < v; ++c)
                        hi = std::max(hi, double(row[c]));
                    double z = 0.0;
                    for (std::size_t c = 0; c < v; ++c)
                        z += std::exp(double(row[c]) - hi);
                    loss += (hi + std::log(z) -
                             double(row[batch.targets[s][t]])) /
                            double(n_sup);
                }
                auto dl = nn::ce_dlogits(mc, tr, batch.targets[s],
                                         batch.mask[s], n_sup);
                nn::backward_seq(mc, params, batch.inputs[s], tr, dl, {}, grads);
            }

            if (with_uir || with_fkl) {
                const auto& prompts = *ctx.inquiry;
                const std::size_t m = std::min(rc.batch_size, prompts.size());
                for (std::size_t j = 0; j < m; ++j) {
                    const std::size_t idx = (inquiry_cursor + j) % prompts.size();
                    auto tr = checked_forward(prompts[idx]);
                    if (with_uir) {
                        auto [norm, dh] = reg::uir_from_hidden(
                            tr.hidden, ctx.teacher_hidden[idx]);
                        loss += norm / double(m);
                        for (auto& x : dh) x = float(double(x) / double(m));
                        nn::backward_seq(mc, params, prompts[idx], tr, {}, dh,
                                         grads);
                    } else {
                        // forward KL against the cached teacher logits,
                        // averaged over the minibatch's token positions
                        const std::size_t v = mc.vocab_size;
                        std::size_t positions = 0;
                        for (std::size_t jj = 0; jj < m; ++jj)
                            positions +=
                                prompts[(inquiry_cursor + jj) % prompts.size()]
                                    .size();
                        std::vector<float> dlog(tr.t_len * v, 0.0f);
                        for (std::size_t t = 0; t < tr.t_len; ++t) {
                            std::vector<float> rs(
                                tr.logits.begin() + t * v,
                                tr.logits.begin() + (t + 1) * v);
                            std::vector<float> rt(
                                ctx.teacher_logits[idx].begin() + t * v,
                                ctx.teacher_logits[idx].begin() + (t + 1) * v);
                            auto [kl, drow] = reg::fkl_from_logits(rs, rt);
                            loss += kl / double(positions);
                            for (std::size_t c = 0; c < v; ++c)
                                dlog[t * v + c] =
                                    float(double(drow[c]) / double(positions));
                        }
                        nn::backward_seq(mc, params, prompts[idx], tr, dlog,
                                         {}, grads);
                    }
                }
                inquiry_cursor = (inquiry_cursor + m) % prompts.size();
            }

            if (with_ewc) {
                loss += reg::ewc_penalty(params, *ctx.ewc_anchor,
                                         *ctx.ewc_fisher, ctx.ewc_lambda);
                ParamSet eg = reg::ewc_grad(params, *ctx.ewc_anchor,
                                            *ctx.ewc_fisher, ctx.ewc_lambda);
                add_in_place(grads, eg);
            }

            if (!std::isfinite(loss))
                throw DivergenceError(stage_for_errors, global_step);

            opt.lr = cosine_lr(peak_lr, global_step, total_steps,
                               rc.warmup_ratio);
            nn::adamw_step(params, grads, state, opt);
            ++global_step;
        }
    }
    return params;
}

inline std::string format_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

} // namespace detail

// ---- run drivers --------------------------------------------------------------

// Joint training of the base mixture (the "Initial Model" of the fine-tuning
// setting).  With pretrained_base = false this returns the random init.
inline ParamSet train_base(const RunConfig& cfg, const StreamData& data) {
    cfg.validate();
    ParamSet params = nn::init_params(cfg.model);
    if (!cfg.pretrained_base) return params;
    std::vector<std::vector<tasks::Example>> parts;
    std::size_t total = 0;
    for (const auto& t : data.base) {
        parts.push_back(t.train);
        total += t.train.size();
    }
    auto mixture = tasks::joint_mixture(parts, total, mix_seed(cfg.seed, 0xbaceu));
    detail::StageContext ctx;
    ctx.method = Method::vanilla;
    return detail::train_pass(cfg, std::move(params), mixture, ctx,
                              cfg.base_lr, cfg.base_epochs, 0);
}

namespace detail {

struct EvalState {
    // loss of each task at the end of the stage that introduced it
    std::map<std::string, double> reference_loss;
};

inline void emit_stage_rows(const RunConfig& cfg, const std::string& run_id,
                            std::size_t stage, const ParamSet& params,
                            const ParamSet& base_params,
                            const StreamData& data, std::size_t n_stream_seen,
                            EvalState& es, std::vector<Row>& rows) {
    // general probe: the union of the base tasks' test splits; a stream
    // without base tasks has no general capability to measure
    std::vector<tasks::Example> probe;
    for (const auto& t : data.base)
        probe.insert(probe.end(), t.test.begin(), t.test.end());
    double gen_acc =
        probe.empty() ? 0.0 : exact_match_accuracy(cfg.model, params, probe);
    double shift =
        data.inquiry.empty()
            ? 0.0
            : language_shift(cfg.model, params, base_params, data.inquiry);

    auto add_row = [&](const tasks::TaskData& task, bool introduced_now) {
        Row r;
        r.run_id = run_id;
        r.method = cfg.method;
        r.alpha = cfg.mix.alpha;
        r.seed = cfg.seed;
        r.stage = stage;
        r.task_id = tasks::rule_name(task.spec.rule);
        r.loss = mean_response_loss(cfg.model, params, task.test);
        r.acc = exact_match_accuracy(cfg.model, params, task.test);
        if (introduced_now || !es.reference_loss.count(r.task_id)) {
            es.reference_loss[r.task_id] = r.loss;
            r.eps = 0.0;
        } else {
            r.eps = std::max(0.0, r.loss - es.reference_loss.at(r.task_id));
        }
        r.gen_acc = gen_acc;
        r.lang_shift = shift;
        rows.push_back(std::move(r));
    };

    for (const auto& t : data.base) add_row(t, stage == 0);
    for (std::size_t i = 0; i < n_stream_seen; ++i)
        add_row(data.stream[i], i + 1 == stage);
}

} // namespace detail

inline std::string make_run_id(const RunConfig& cfg) {
    return std::string(to_string(cfg.method)) + "-a" +
           detail::format_float(cfg.mix.alpha) + "-s" +
           std::to_string(cfg.seed);
}

// Algorithm-1-style continual run from a given starting model over the
// prepared stream: per stage, train with the method's objective, consolidate
// when the method calls for it, then evaluate everything seen so far.
inline RunRecord continual_run_from(const RunConfig& cfg, ParamSet base,
                                    const StreamData& data) {
    cfg.validate();
    if (cfg.method == Method::joint)
        throw std::invalid_argument("continual_run: method joint is a separate driver");
    auto t0 = std::chrono::steady_clock::now();

    RunRecord rec;
    rec.cfg = cfg;
    rec.run_id = make_run_id(cfg);
    for (const auto& t : data.stream)
        rec.stream_task_ids.push_back(tasks::rule_name(t.spec.rule));

    ParamSet consolidated = std::move(base);
    const ParamSet base_snapshot = consolidated;
    detail::EvalState eval;
    rec.stage_params.push_back(consolidated);
    detail::emit_stage_rows(cfg, rec.run_id, 0, consolidated, base_snapshot,
                            data, 0, eval, rec.rows);

    // EWC accumulates a running Fisher; seeded from the base mixture
    ParamSet fisher;
    ParamSet anchor;
    if (cfg.method == Method::ewc) {
        std::vector<std::vector<tasks::Example>> parts;
        std::size_t total = 0;
        for (const auto& t : data.base) {
            parts.push_back(t.train);
            total += t.train.size();
        }
        auto mixture =
            tasks::joint_mixture(parts, total, mix_seed(cfg.seed, 0xf15eu));
        mixture.resize(std::min(mixture.size(), cfg.fisher_samples));
        fisher = reg::estimate_fisher(cfg.model, consolidated,
                                      tasks::to_training_batch(mixture));
        anchor = consolidated;
    }

    for (std::size_t t = 0; t < data.stream.size(); ++t) {
        const std::size_t stage = t + 1;
        const tasks::TaskData& task = data.stream[t];

        detail::StageContext ctx;
        ctx.method = cfg.method;
        ctx.teacher = &consolidated;
        ctx.inquiry = &data.inquiry;
        if (uses_uir(cfg.method)) {
            ctx.teacher_hidden.reserve(data.inquiry.size());
            for (const auto& p : data.inquiry)
                ctx.teacher_hidden.push_back(
                    nn::forward_seq(cfg.model, consolidated, p).hidden);
        }
        if (cfg.method == Method::fkl) {
            ctx.teacher_logits.reserve(data.inquiry.size());
            for (const auto& p : data.inquiry)
                ctx.teacher_logits.push_back(
                    nn::forward_seq(cfg.model, consolidated, p).logits);
        }
        if (cfg.method == Method::ewc) {
            ctx.ewc_anchor = &anchor;
            ctx.ewc_fisher = &fisher;
            ctx.ewc_lambda = cfg.ewc_lambda;
        }

        // replay: teacher-labeled inquiry examples mixed into the new data
        std::vector<tasks::Example> train_data = task.train;
        if (cfg.method == Method::replay) {
            std::vector<tasks::Example> buffer;
            for (const auto& p : data.inquiry) {
                auto out = nn::decode_greedy(cfg.model, consolidated, p,
                                             cfg.eval_max_new, tasks::kEos);
                std::vector<int> response(out.begin() + std::ptrdiff_t(p.size()),
                                          out.end());
                if (!response.empty() && response.back() == tasks::kEos)
                    response.pop_back();
                if (response.empty()) continue;
                tasks::Example e;
                e.prompt.assign(p.begin(), p.end() - 1); // drop the <sep>
                e.response = std::move(response);
                buffer.push_back(std::move(e));
            }
            if (!buffer.empty())
                train_data = tasks::replay_mixture(
                    train_data, buffer, cfg.replay_ratio,
                    mix_seed(cfg.seed, 0x9e81u + stage));
        }

        ParamSet trained =
            detail::train_pass(cfg, consolidated, train_data, ctx, cfg.lr,
                               cfg.epochs_per_stage, stage);

        if (uses_consolidation(cfg.method)) {
            if (cfg.method == Method::modelmix)
                consolidated =
                    consolidation::model_mix(consolidated, trained,
                                             cfg.mix.alpha);
            else
                consolidated =
                    consolidation::sac_consolidate(consolidated, trained,
                                                   cfg.mix);
        } else {
            consolidated = std::move(trained);
        }

        if (cfg.method == Method::ewc) {
            // online accumulation on the data just seen, anchored at the
            // post-stage model
            std::vector<tasks::Example> sample = task.train;
            sample.resize(std::min(sample.size(), cfg.fisher_samples));
            ParamSet stage_fisher = reg::estimate_fisher(
                cfg.model, consolidated, tasks::to_training_batch(sample));
            add_in_place(fisher, stage_fisher);
            anchor = consolidated;
        }

        rec.stage_params.push_back(consolidated);
        detail::emit_stage_rows(cfg, rec.run_id, stage, consolidated,
                                base_snapshot, data, t + 1, eval, rec.rows);
    }

    rec.final_params = consolidated;
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return rec;
}

inline RunRecord continual_run(const RunConfig& cfg) {
    StreamData data = make_stream(cfg);
    return continual_run_from(cfg, train_base(cfg, data), data);
}

// the exact example sequence a joint pass trains on
inline std::vector<tasks::Example> joint_training_mixture(
    const RunConfig& cfg, const StreamData& data) {
    std::vector<std::vector<tasks::Example>> parts;
    std::size_t total = 0;
    for (const auto& t : data.base) {
        parts.push_back(t.train);
        total += t.train.size();
    }
    for (const auto& t : data.stream) {
        parts.push_back(t.train);
        total += t.train.size();
    }
    return tasks::joint_mixture(parts, total, mix_seed(cfg.seed, 0x70177u));
}

// Multitask reference: one training pass over the joint mixture of every
// task (base and stream), evaluated with the same metrics at stage 0.
// The pass is numbered stage 1, like the sole stage of a vanilla T = 1 run.
inline RunRecord joint_run_from(const RunConfig& cfg, const StreamData& data) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    auto mixture = joint_training_mixture(cfg, data);

    ParamSet params = nn::init_params(cfg.model);
    detail::StageContext ctx;
    ctx.method = Method::vanilla;
    params = detail::train_pass(cfg, std::move(params), mixture, ctx,
                                cfg.base_lr, cfg.base_epochs, 1);

    RunRecord rec;
    rec.cfg = cfg;
    rec.run_id = make_run_id(cfg);
    for (const auto& t : data.stream)
        rec.stream_task_ids.push_back(tasks::rule_name(t.spec.rule));
    detail::EvalState eval;
    rec.stage_params.push_back(params);
    detail::emit_stage_rows(cfg, rec.run_id, 0, params, params, data,
                            data.stream.size(), eval, rec.rows);
    rec.final_params = std::move(params);
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    return rec;
}

inline RunRecord joint_run(const RunConfig& cfg) {
    return joint_run_from(cfg, make_stream(cfg));
}

// ---- derived metrics -----------------------------------------------------------

// Slack per stream task i < T: the non-negative rise of a task's loss from
// the end of its own stage to the end of the run, computed from the loss
// columns.  A single-task record yields an empty vector.
inline std::vector<double> forgetting(const RunRecord& rec) {
    if (rec.rows.empty()) return {};
    std::size_t last_stage = 0;
    for (const auto& r : rec.rows) last_stage = std::max(last_stage, r.stage);
    if (last_stage == 0) return {};
    std::vector<double> eps;
    for (std::size_t i = 1; i < last_stage; ++i) {
        for (const auto& r : rec.rows) {
            if (r.stage != i) continue;
            bool seen_before = false;
            for (const auto& q : rec.rows)
                if (q.task_id == r.task_id && q.stage < i) {
                    seen_before = true;
                    break;
                }
            if (seen_before) continue; // introduced earlier, not stage i's task
            for (const auto& q : rec.rows)
                if (q.stage == last_stage && q.task_id == r.task_id)
                    eps.push_back(std::max(0.0, q.loss - r.loss));
            break;
        }
    }
    return eps;
}

// mean accuracy over every task row at the final stage
inline double final_all_task_accuracy(const RunRecord& rec) {
    std::size_t last_stage = 0;
    for (const auto& r : rec.rows) last_stage = std::max(last_stage, r.stage);
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : rec.rows)
        if (r.stage == last_stage) {
            acc += r.acc;
            ++n;
        }
    if (n == 0) throw std::invalid_argument("record has no rows");
    return acc / double(n);
}

inline double stage_gen_acc(const RunRecord& rec, std::size_t stage) {
    for (const auto& r : rec.rows)
        if (r.stage == stage) return r.gen_acc;
    throw std::invalid_argument("record has no rows for stage " +
                                std::to_string(stage));
}

inline double final_lang_shift(const RunRecord& rec) {
    std::size_t last_stage = 0;
    for (const auto& r : rec.rows) last_stage = std::max(last_stage, r.stage);
    for (const auto& r : rec.rows)
        if (r.stage == last_stage) return r.lang_shift;
    throw std::invalid_argument("record has no rows");
}

// ---- alpha sweep ----------------------------------------------------------------

struct SweepRow {
    double alpha = 0.0;
    Method method = Method::sac;
    double task_acc = 0.0; // mean over stream tasks at the final stage
    double gen_acc = 0.0;
};

struct SweepResult {
    std::vector<SweepRow> rows;
    // per method: {alpha_1 (general-stable), alpha_2 (task-stable)}
    std::map<std::string, std::pair<double, double>> boundaries;
};

// alpha_1: the largest grid point whose general accuracy stays within `tol`
// of the alpha->0 endpoint; alpha_2: the smallest grid point whose task
// accuracy stays within `tol` of the alpha->1 endpoint.
inline std::pair<double, double> stability_boundaries(
    std::vector<SweepRow> rows, double tol) {
    if (rows.empty())
        throw std::invalid_argument("stability_boundaries: no rows");
    std::sort(rows.begin(), rows.end(),
              [](const SweepRow& a, const SweepRow& b) { return a.alpha < b.alpha; });
    const double gen_ref = rows.front().gen_acc;  // alpha -> 0 endpoint
    const double task_ref = rows.back().task_acc; // alpha -> 1 endpoint
    // "stays within": contiguous from the respective endpoint
    double alpha1 = rows.front().alpha;
    for (const auto& r : rows) {
        if (r.gen_acc < gen_ref - tol) break;
        alpha1 = r.alpha;
    }
    double alpha2 = rows.back().alpha;
    for (auto it = rows.rbegin(); it != rows.rend(); ++it) {
        if (it->task_acc < task_ref - tol) break;
        alpha2 = it->alpha;
    }
    return {alpha1, alpha2};
}

inline SweepResult alpha_sweep(RunConfig cfg, const std::vector<double>& alphas,
                               const std::vector<Method>& methods =
                                   {Method::modelmix, Method::sac,
                                    Method::sac_uir},
                               double tol = 0.02) {
    if (alphas.empty())
        throw std::invalid_argument("alpha_sweep: empty grid");
    SweepResult result;
    StreamData data = make_stream(cfg);
    ParamSet base = train_base(cfg, data);
    for (Method m : methods) {
        std::vector<SweepRow> rows;
        for (double a : alphas) {
            RunConfig rc = cfg;
            rc.method = m;
            rc.mix.alpha = a;
            RunRecord rec = continual_run_from(rc, base, data);
            SweepRow row;
            row.alpha = a;
            row.method = m;
            std::size_t last_stage = data.stream.size();
            double acc = 0.0;
            std::size_t n = 0;
            for (const auto& r : rec.rows)
                if (r.stage == last_stage) {
                    bool is_stream = false;
                    for (const auto& t : data.stream)
                        if (tasks::rule_name(t.spec.rule) == r.task_id)
                            is_stream = true;
                    if (is_stream) {
                        acc += r.acc;
                        ++n;
                    }
                }
            row.task_acc = n ? acc / double(n) : 0.0;
            row.gen_acc = stage_gen_acc(rec, last_stage);
            rows.push_back(row);
            result.rows.push_back(row);
        }
        result.boundaries[to_string(m)] = stability_boundaries(rows, tol);
    }
    return result;
}

// ---- reporting ------------------------------------------------------------------

inline std::string csv_header() {
    return "run_id,method,alpha,seed,stage,task_id,loss,acc,eps,gen_acc,"
           "lang_shift\n";
}

inline std::string to_csv(const std::vector<RunRecord>& records) {
    std::string out = csv_header();
    for (const auto& rec : records)
        for (const auto& r : rec.rows) {
            out += r.run_id;
            out += ',';
            out += to_string(r.method);
            out += ',';
            out += detail::format_float(r.alpha);
            out += ',';
            out += std::to_string(r.seed);
            out += ',';
            out += std::to_string(r.stage);
            out += ',';
            out += r.task_id;
            out += ',';
            out += detail::format_float(r.loss);
            out += ',';
            out += detail::format_float(r.acc);
            out += ',';
            out += detail::format_float(r.eps);
            out += ',';
            out += detail::format_float(r.gen_acc);
            out += ',';
            out += detail::format_float(r.lang_shift);
            out += '\n';
        }
    return out;
}

inline void write_csv(const std::string& path,
                      const std::vector<RunRecord>& records) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw std::runtime_error("cannot open '" + path + "' for writing");
    std::string csv = to_csv(records);
    os.write(csv.data(), std::streamsize(csv.size()));
}

// Table-4-style factorial: vanilla / +SAC / +UIR / +both.
inline std::vector<Method> factorial_methods() {
    return {Method::vanilla, Method::sac, Method::uir, Method::sac_uir};
}

// mean final accuracy over the stream tasks; hand-built records without the
// id list fall back to "introduced after stage 0"
inline double final_stream_task_accuracy(const RunRecord& rec) {
    std::size_t last_stage = 0;
    for (const auto& r : rec.rows) last_stage = std::max(last_stage, r.stage);
    auto is_stream = [&](const std::string& task_id) {
        if (!rec.stream_task_ids.empty())
            return std::find(rec.stream_task_ids.begin(),
                             rec.stream_task_ids.end(),
                             task_id) != rec.stream_task_ids.end();
        for (const auto& q : rec.rows)
            if (q.stage == 0 && q.task_id == task_id) return false;
        return true;
    };
    double acc = 0.0;
    std::size_t n = 0;
    for (const auto& r : rec.rows) {
        if (r.stage != last_stage || !is_stream(r.task_id)) continue;
        acc += r.acc;
        ++n;
    }
    if (n == 0)
        throw std::invalid_argument("record has no stream-task rows");
    return acc / double(n);
}

// combined metric for the ablation ordering: mean of final stream-task
// accuracy and final general-probe accuracy
inline double combined_metric(const RunRecord& rec) {
    std::size_t last_stage = 0;
    for (const auto& r : rec.rows) last_stage = std::max(last_stage, r.stage);
    return 0.5 *
           (final_stream_task_accuracy(rec) + stage_gen_acc(rec, last_stage));
}

struct MethodSummary {
    Method method = Method::vanilla;
    std::size_t runs = 0;
    double task_acc = 0.0; // means over the method's records
    double gen_acc = 0.0;
    double combined = 0.0;
};

// Per-method means in factorial order; methods outside the factorial follow
// in declaration order.
inline std::vector<MethodSummary> factorial_summary(
    const std::vector<RunRecord>& records) {
    std::vector<Method> order = factorial_methods();
    for (Method m : {Method::modelmix, Method::fkl, Method::ewc,
                     Method::replay, Method::joint})
        order.push_back(m);
    std::vector<MethodSummary> out;
    for (Method m : order) {
        MethodSummary s;
        s.method = m;
        for (const auto& rec : records) {
            if (rec.cfg.method != m) continue;
            std::size_t last_stage = 0;
            for (const auto& r : rec.rows)
                last_stage = std::max(last_stage, r.stage);
            s.task_acc += final_stream_task_accuracy(rec);
            s.gen_acc += stage_gen_acc(rec, last_stage);
            s.combined += combined_metric(rec);
            ++s.runs;
        }
        if (s.runs == 0) continue;
        s.task_acc /= double(s.runs);
        s.gen_acc /= double(s.runs);
        s.combined /= double(s.runs);
        out.push_back(s);
    }
    return out;
}

inline std::string summary_table(const std::vector<MethodSummary>& rows) {
    std::string out = "method,runs,task_acc,gen_acc,combined\n";
    for (const auto& s : rows) {
        out += to_string(s.method);
        out += ',';
        out += std::to_string(s.runs);
        out += ',';
        out += detail::format_float(s.task_acc);
        out += ',';
        out += detail::format_float(s.gen_acc);
        out += ',';
        out += detail::format_float(s.combined);
        out += '\n';
    }
    return out;
}

} // namespace spcl::harness
