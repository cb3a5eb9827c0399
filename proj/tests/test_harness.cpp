#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <string>
#include <vector>

#include "spcl/checkpoint.hpp"
#include "spcl/harness.hpp"

using namespace spcl;
using namespace spcl::harness;

namespace {

// configuration small enough for end-to-end runs in a unit test
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.model.embed_dim = 16;
    cfg.model.n_layers = 1;
    cfg.model.n_heads = 2;
    cfg.model.context_length = 16;
    cfg.n_train = 24;
    cfg.n_test = 8;
    cfg.base_epochs = 1;
    cfg.inquiry_fraction = 0.25;
    cfg.seed = 7;
    return cfg;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
    double worst = 0.0;
    for (const auto& d : checkpoint::diff(a, b)) worst = std::max(worst, d.max_abs);
    return worst;
}

Row make_row(std::string run_id, Method m, std::size_t stage,
             std::string task_id, double loss) {
    Row r;
    r.run_id = std::move(run_id);
    r.method = m;
    r.alpha = 0.2;
    r.seed = 1;
    r.stage = stage;
    r.task_id = std::move(task_id);
    r.loss = loss;
    return r;
}

} // namespace

TEST_CASE("run config validation rejects bad settings") {
    RunConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());

    RunConfig bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.model.vocab_size = 32; // does not match the task vocabulary
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.replay_ratio = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    bad = cfg;
    bad.warmup_ratio = 1.0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("method names round-trip") {
    for (Method m : {Method::vanilla, Method::modelmix, Method::sac,
                     Method::uir, Method::sac_uir, Method::fkl, Method::ewc,
                     Method::replay, Method::joint})
        CHECK(method_from_string(to_string(m)) == m);
    CHECK_THROWS_AS(method_from_string("sgd"), std::invalid_argument);
}

TEST_CASE("single-task stream: vanilla equals modelmix at alpha = 1, "
          "and alpha = 0 returns the base model") {
    RunConfig cfg = tiny_config();
    StreamData data = make_stream(cfg);
    data.stream.resize(1);
    ParamSet base = train_base(cfg, data);

    RunConfig vanilla_cfg = cfg;
    vanilla_cfg.method = Method::vanilla;
    RunRecord vanilla = continual_run_from(vanilla_cfg, base, data);

    RunConfig mix1 = cfg;
    mix1.method = Method::modelmix;
    mix1.mix.alpha = 1.0;
    RunRecord full_mix = continual_run_from(mix1, base, data);

    // same objective, same schedule, mixing weight 1: identical parameters
    CHECK(max_abs_diff(vanilla.final_params, full_mix.final_params) == 0.0);

    RunConfig mix0 = cfg;
    mix0.method = Method::modelmix;
    mix0.mix.alpha = 0.0;
    RunRecord no_mix = continual_run_from(mix0, base, data);
    CHECK(max_abs_diff(no_mix.final_params, base) == 0.0);
}

TEST_CASE("forgetting derives slack from the loss columns") {
    RunRecord rec;

    SECTION("loss rising 1.0 -> 1.4 gives slack 0.4") {
        rec.rows.push_back(make_row("r", Method::vanilla, 0, "copy", 0.2));
        rec.rows.push_back(make_row("r", Method::vanilla, 1, "copy", 0.3));
        rec.rows.push_back(make_row("r", Method::vanilla, 1, "reverse", 1.0));
        rec.rows.push_back(make_row("r", Method::vanilla, 2, "copy", 0.4));
        rec.rows.push_back(make_row("r", Method::vanilla, 2, "reverse", 1.4));
        rec.rows.push_back(make_row("r", Method::vanilla, 2, "pick_middle", 0.5));
        auto eps = forgetting(rec);
        REQUIRE(eps.size() == 1);
        CHECK(eps[0] == Catch::Approx(0.4).margin(1e-12));
    }

    SECTION("identical losses give zero slack; improvements clamp at zero") {
        rec.rows.push_back(make_row("r", Method::vanilla, 1, "reverse", 1.0));
        rec.rows.push_back(make_row("r", Method::vanilla, 2, "reverse", 1.0));
        rec.rows.push_back(make_row("r", Method::vanilla, 2, "pick_middle", 0.5));
        rec.rows.push_back(make_row("r", Method::vanilla, 3, "reverse", 0.8));
        rec.rows.push_back(make_row("r", Method::vanilla, 3, "pick_middle", 0.6));
        rec.rows.push_back(make_row("r", Method::vanilla, 3, "opt_alt_mod4", 0.1));
        auto eps = forgetting(rec);
        REQUIRE(eps.size() == 2);
        CHECK(eps[0] == 0.0); // reverse improved 1.0 -> 0.8
        CHECK(eps[1] == Catch::Approx(0.1).margin(1e-12));
    }

    SECTION("single task produces no slack entries") {
        rec.rows.push_back(make_row("r", Method::vanilla, 0, "copy", 0.2));
        rec.rows.push_back(make_row("r", Method::vanilla, 1, "reverse", 1.0));
        CHECK(forgetting(rec).empty());
    }

    SECTION("empty record") { CHECK(forgetting(rec).empty()); }
}

TEST_CASE("language shift is zero on itself, symmetric, and positive under "
          "perturbation") {
    RunConfig cfg = tiny_config();
    StreamData data = make_stream(cfg);
    ParamSet a = nn::init_params(cfg.model);
    ParamSet b = a;
    for (auto& [name, t] : b.tensors)
        for (auto& v : t.data) v += 0.05f;

    CHECK(language_shift(cfg.model, a, a, data.inquiry) == 0.0);
    double ab = language_shift(cfg.model, a, b, data.inquiry);
    double ba = language_shift(cfg.model, b, a, data.inquiry);
    CHECK(ab > 0.0);
    CHECK(ab == Catch::Approx(ba).epsilon(1e-12));
    CHECK_THROWS_AS(language_shift(cfg.model, a, b, {}),
                    std::invalid_argument);
}

TEST_CASE("csv output matches the golden layout byte for byte") {
    RunRecord rec;
    rec.run_id = "vanilla-a0.2-s1";
    Row r = make_row(rec.run_id, Method::vanilla, 0, "copy", 1.5);
    r.acc = 0.5;
    r.eps = 0.0;
    r.gen_acc = 0.75;
    r.lang_shift = 0.125;
    rec.rows.push_back(r);
    Row r2 = make_row(rec.run_id, Method::vanilla, 1, "reverse", 0.0625);
    r2.acc = 1.0;
    r2.eps = 0.25;
    r2.gen_acc = 0.5;
    r2.lang_shift = 1.0 / 3.0;
    rec.rows.push_back(r2);

    const std::string expect =
        "run_id,method,alpha,seed,stage,task_id,loss,acc,eps,gen_acc,"
        "lang_shift\n"
        "vanilla-a0.2-s1,vanilla,0.2,1,0,copy,1.5,0.5,0,0.75,0.125\n"
        "vanilla-a0.2-s1,vanilla,0.2,1,1,reverse,0.0625,1,0.25,0.5,"
        "0.333333333\n";
    CHECK(to_csv({rec}) == expect);
    CHECK(to_csv({rec}) == to_csv({rec}));
    CHECK(to_csv({}) == csv_header());
}

TEST_CASE("stability boundaries walk contiguously from the endpoints") {
    std::vector<SweepRow> rows;
    auto add = [&](double alpha, double task, double gen) {
        SweepRow r;
        r.alpha = alpha;
        r.method = Method::sac;
        r.task_acc = task;
        r.gen_acc = gen;
        rows.push_back(r);
    };
    add(0.00, 0.10, 1.00);
    add(0.25, 0.50, 0.99);
    add(0.50, 0.93, 0.95);
    add(0.75, 0.99, 0.50);
    add(1.00, 1.00, 0.20);

    auto [a1, a2] = stability_boundaries(rows, 0.02);
    CHECK(a1 == 0.25); // gen stays within 0.02 of 1.00 up to alpha 0.25
    CHECK(a2 == 0.75); // task stays within 0.02 of 1.00 down to alpha 0.75

    // shuffled input sorts internally
    std::swap(rows[0], rows[3]);
    auto [b1, b2] = stability_boundaries(rows, 0.02);
    CHECK(b1 == a1);
    CHECK(b2 == a2);

    CHECK_THROWS_AS(stability_boundaries({}, 0.02), std::invalid_argument);
}

TEST_CASE("continual run produces the expected record shape") {
    RunConfig cfg = tiny_config();
    cfg.method = Method::sac_uir;
    RunRecord rec = continual_run(cfg);

    // 6 base rows at stage 0, one more task per stage after that
    REQUIRE(rec.rows.size() == 6 + 7 + 8 + 9);
    REQUIRE(rec.stage_params.size() == 4);
    CHECK(rec.run_id == make_run_id(cfg));
    CHECK(rec.wall_seconds > 0.0);

    for (const auto& r : rec.rows) {
        CHECK(r.run_id == rec.run_id);
        CHECK(r.eps >= 0.0);
        CHECK(r.loss >= 0.0);
        CHECK((r.acc >= 0.0 && r.acc <= 1.0));
        CHECK((r.gen_acc >= 0.0 && r.gen_acc <= 1.0));
        CHECK(r.lang_shift >= 0.0);
        if (r.stage == 0) {
            CHECK(r.eps == 0.0);
            CHECK(r.lang_shift == 0.0); // still the base model
        }
    }
    // the final parameters are the last stage snapshot
    CHECK(max_abs_diff(rec.final_params, rec.stage_params.back()) == 0.0);
}

TEST_CASE("the whole pipeline is deterministic") {
    RunConfig cfg = tiny_config();
    cfg.method = Method::sac;
    RunRecord a = continual_run(cfg);
    RunRecord b = continual_run(cfg);
    CHECK(to_csv({a}) == to_csv({b}));
    CHECK(max_abs_diff(a.final_params, b.final_params) == 0.0);
}

TEST_CASE("joint run evaluates every task at stage zero") {
    RunConfig cfg = tiny_config();
    cfg.method = Method::joint;
    RunRecord rec = joint_run(cfg);
    REQUIRE(rec.rows.size() == 9);
    for (const auto& r : rec.rows) {
        CHECK(r.stage == 0);
        CHECK(r.eps == 0.0);
        CHECK(r.lang_shift == 0.0);
    }
    CHECK_NOTHROW(final_all_task_accuracy(rec));
}

TEST_CASE("baseline methods run end to end on a single-task stream") {
    RunConfig cfg = tiny_config();
    StreamData data = make_stream(cfg);
    data.stream.resize(1);
    ParamSet base = train_base(cfg, data);

    for (Method m : {Method::uir, Method::fkl, Method::ewc, Method::replay}) {
        RunConfig rc = cfg;
        rc.method = m;
        rc.fisher_samples = 8;
        RunRecord rec = continual_run_from(rc, base, data);
        CHECK(rec.rows.size() == 6 + 7);
        CHECK(rec.stage_params.size() == 2);
    }
}

TEST_CASE("single-task joint training is a vanilla T = 1 run") {
    RunConfig cfg = tiny_config();
    cfg.pretrained_base = false;
    cfg.base_lr = cfg.lr; // align the joint pass with the stage schedule
    cfg.base_epochs = cfg.epochs_per_stage;

    StreamData raw = make_stream(cfg);
    raw.base.clear();
    raw.stream.resize(1);

    RunConfig jcfg = cfg;
    jcfg.method = Method::joint;
    RunRecord joint = joint_run_from(jcfg, raw);

    // a vanilla run over the same example order the joint pass saw
    StreamData mixed = raw;
    mixed.stream[0].train = joint_training_mixture(cfg, raw);
    RunConfig vcfg = cfg;
    vcfg.method = Method::vanilla;
    RunRecord vanilla =
        continual_run_from(vcfg, nn::init_params(cfg.model), mixed);

    CHECK(max_abs_diff(joint.final_params, vanilla.final_params) == 0.0);
}

TEST_CASE("factorial summary equals means recomputed from the raw rows") {
    // two seeds per method with hand-planted accuracies
    auto make_record = [](Method m, double stream_acc, double gen_final) {
        RunRecord rec;
        rec.cfg.method = m;
        Row r0 = make_row("r", m, 0, "copy", 0.5);
        r0.gen_acc = 0.9;
        rec.rows.push_back(r0);
        Row r1 = make_row("r", m, 1, "copy", 0.6);
        r1.gen_acc = gen_final;
        rec.rows.push_back(r1);
        Row r2 = make_row("r", m, 1, "reverse", 0.4);
        r2.acc = stream_acc;
        r2.gen_acc = gen_final;
        rec.rows.push_back(r2);
        return rec;
    };

    std::vector<RunRecord> records;
    records.push_back(make_record(Method::sac_uir, 0.9, 0.8));
    records.push_back(make_record(Method::vanilla, 0.7, 0.2));
    records.push_back(make_record(Method::sac_uir, 0.7, 0.9));
    records.push_back(make_record(Method::vanilla, 0.9, 0.4));

    auto summary = factorial_summary(records);
    REQUIRE(summary.size() == 2);
    CHECK(summary[0].method == Method::vanilla); // factorial order
    CHECK(summary[1].method == Method::sac_uir);

    // recompute the means directly from the rows
    for (const auto& s : summary) {
        double task = 0.0, gen = 0.0, comb = 0.0;
        std::size_t n = 0;
        for (const auto& rec : records) {
            if (rec.cfg.method != s.method) continue;
            task += final_stream_task_accuracy(rec);
            gen += stage_gen_acc(rec, 1);
            comb += combined_metric(rec);
            ++n;
        }
        REQUIRE(n == s.runs);
        CHECK(s.task_acc == Catch::Approx(task / double(n)).margin(1e-15));
        CHECK(s.gen_acc == Catch::Approx(gen / double(n)).margin(1e-15));
        CHECK(s.combined == Catch::Approx(comb / double(n)).margin(1e-15));
    }

    // spot values: stream-task means and the summary text layout
    CHECK(summary[0].task_acc == Catch::Approx(0.8).margin(1e-15));
    CHECK(summary[1].gen_acc == Catch::Approx(0.85).margin(1e-15));
    std::string table = summary_table(summary);
    CHECK(table.find("method,runs,task_acc,gen_acc,combined\n") == 0);
    CHECK(table.find("vanilla,2,0.8,") != std::string::npos);

    CHECK(factorial_summary({}).empty());
}

TEST_CASE("non-finite loss raises a divergence error with context") {
    RunConfig cfg = tiny_config();
    cfg.method = Method::vanilla;
    cfg.lr = 1e12; // drives the logits to overflow within a few steps
    StreamData data = make_stream(cfg);
    data.stream.resize(1);
    ParamSet base = nn::init_params(cfg.model);

    bool threw = false;
    try {
        continual_run_from(cfg, base, data);
    } catch (const DivergenceError& e) {
        threw = true;
        CHECK(e.stage() == 1);
        CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
    CHECK(threw);
}
