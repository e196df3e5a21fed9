#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "wg/zoo.hpp"

using namespace wg;

namespace {

struct TempTree {
    std::filesystem::path dir;
    explicit TempTree(const std::string& tag) {
        dir = std::filesystem::temp_directory_path() / ("wg_" + tag);
        std::filesystem::remove_all(dir);
        std::filesystem::create_directories(dir);
    }
    ~TempTree() { std::filesystem::remove_all(dir); }
};

data::DataContext toy_context(const std::filesystem::path& root, int n_datasets = 2,
                              std::int64_t per_class = 24) {
    data::DataContext ctx(root);
    for (int i = 0; i < n_datasets; ++i) {
        auto ds = data::make_synthetic_dataset("toy" + std::to_string(i), 4, per_class, 1, 8, 8,
                                               0.25, 100 + static_cast<std::uint64_t>(i));
        data::save_dataset(root, ds);
    }
    return ctx;
}

data::DatasetSpec toy_spec(const std::string& id) {
    data::DatasetSpec spec;
    spec.dataset_id = id;
    spec.class_ids = {0, 1, 2, 3};
    spec.samples_per_class_train = 12;
    spec.samples_per_class_val = 4;
    spec.samples_per_class_eval = 8;
    return spec;
}

} // namespace

TEST_CASE("zoo build produces the contracted record count", "[zoo]") {
    TempTree t("zoo_count");
    auto ctx = toy_context(t.dir / "data");
    zoo::TrainerConfig trainer;
    trainer.epochs = 6;
    trainer.keep_last = 3;
    trainer.runs_per_spec = 2;
    trainer.hidden = 16;
    auto m = zoo::build_zoo({toy_spec("toy0"), toy_spec("toy1")}, trainer,
                            ctx, t.dir / "zoo", 42);
    // 2 datasets x 2 runs x 3 kept checkpoints
    CHECK(m.records.size() == 12);
    for (const auto& r : m.records) {
        CHECK(r.epoch >= 4);
        CHECK(r.valid);
        CHECK(std::filesystem::exists(t.dir / "zoo" / r.weights_file));
    }

    SECTION("manifest round-trips through json") {
        auto loaded = zoo::load_manifest(t.dir / "zoo");
        REQUIRE(loaded.records.size() == m.records.size());
        CHECK(loaded.records[0].record_id == m.records[0].record_id);
        CHECK(loaded.records[3].eval_acc == m.records[3].eval_acc);
        CHECK(loaded.spec_for("toy1").samples_per_class_eval == 8);
    }
}

TEST_CASE("zoo build is deterministic for a fixed seed", "[zoo]") {
    TempTree t("zoo_det");
    auto ctx = toy_context(t.dir / "data", 1);
    zoo::TrainerConfig trainer;
    trainer.epochs = 5;
    trainer.keep_last = 2;
    trainer.hidden = 16;
    auto m1 = zoo::build_zoo({toy_spec("toy0")}, trainer, ctx, t.dir / "zoo_a", 7);
    auto m2 = zoo::build_zoo({toy_spec("toy0")}, trainer, ctx, t.dir / "zoo_b", 7);
    REQUIRE(m1.records.size() == m2.records.size());
    for (std::size_t i = 0; i < m1.records.size(); ++i) {
        CHECK(m1.records[i].eval_acc == m2.records[i].eval_acc);
        CHECK(m1.records[i].train_acc == m2.records[i].train_acc);
        CHECK(m1.records[i].fingerprint == m2.records[i].fingerprint);
    }
}

TEST_CASE("stored eval accuracy equals re-evaluation of stored weights", "[zoo]") {
    TempTree t("zoo_pure");
    auto ctx = toy_context(t.dir / "data", 1);
    zoo::TrainerConfig trainer;
    trainer.epochs = 5;
    trainer.keep_last = 3;
    trainer.hidden = 16;
    auto spec = toy_spec("toy0");
    auto m = zoo::build_zoo({spec}, trainer, ctx, t.dir / "zoo", 9);
    for (const auto& rec : m.records) {
        auto flat = zoo::load_record_weights(t.dir / "zoo", rec);
        CHECK(zoo::evaluate(flat, spec, ctx) == rec.eval_acc);
        CHECK(zoo::evaluate(flat, spec, ctx) == zoo::evaluate(flat, spec, ctx));
    }
}

TEST_CASE("all-zero weights hit exactly the balanced chance rate", "[zoo]") {
    TempTree t("zoo_zero");
    auto ctx = toy_context(t.dir / "data", 1);
    auto spec = toy_spec("toy0");
    const auto& ds = ctx.get("toy0");
    cls::Classifier model(zoo::classifier_config_for(ds, spec, {}));
    auto flat = model.to_flat();
    flat.values.fill(0.0);
    // uniform logits + first-max tie break => always class 0 => exactly 1/C
    CHECK(zoo::evaluate(flat, spec, ctx) == Catch::Approx(0.25).margin(1e-12));
}

TEST_CASE("random-init accuracy sits near chance on balanced classes", "[zoo]") {
    TempTree t("zoo_rand");
    auto ctx = toy_context(t.dir / "data", 1, 40);
    data::DatasetSpec spec = toy_spec("toy0");
    spec.samples_per_class_eval = 24;
    const auto& ds = ctx.get("toy0");
    double acc = 0.0;
    const int trials = 8;
    for (int i = 0; i < trials; ++i) {
        cls::Classifier model(zoo::classifier_config_for(ds, spec, {}),
                              static_cast<std::uint64_t>(1000 + i));
        acc += zoo::evaluate(model.to_flat(), spec, ctx);
    }
    acc /= trials;
    CHECK(acc > 0.05);
    CHECK(acc < 0.55); // chance is 0.25 on 4 classes
}

TEST_CASE("architecture mismatch raises a layout error", "[zoo]") {
    TempTree t("zoo_arch");
    auto ctx = toy_context(t.dir / "data", 1);
    auto spec = toy_spec("toy0");
    cls::ClassifierConfig other;
    other.arch = "mlp_head";
    other.input_dim = 10;
    other.hidden = 4;
    other.classes = 4;
    cls::Classifier model(other);
    CHECK_THROWS_AS(zoo::evaluate(model.to_flat(), spec, ctx), codec::LayoutError);
}

TEST_CASE("unreadable dataset raises an ingestion error", "[zoo]") {
    TempTree t("zoo_missing");
    data::DataContext ctx(t.dir / "nonexistent");
    CHECK_THROWS_WITH(ctx.get("ghost"), Catch::Matchers::ContainsSubstring("unreadable"));
}

TEST_CASE("topk_select ranks by accuracy with stable ties", "[zoo]") {
    TempTree t("zoo_topk");
    auto ctx = toy_context(t.dir / "data", 1);
    zoo::TrainerConfig trainer;
    trainer.epochs = 6;
    trainer.keep_last = 6;
    trainer.hidden = 16;
    auto spec = toy_spec("toy0");
    auto m = zoo::build_zoo({spec}, trainer, ctx, t.dir / "zoo", 21);

    std::vector<codec::FlatWeights> cands;
    for (const auto& rec : m.records) cands.push_back(zoo::load_record_weights(t.dir / "zoo", rec));
    CHECK_THROWS_AS(zoo::topk_select({}, spec, 1, ctx), std::invalid_argument);

    auto top1 = zoo::topk_select(cands, spec, 1, ctx);
    double best = 0.0;
    for (const auto& c : cands) best = std::max(best, zoo::evaluate(c, spec, ctx));
    CHECK(top1[0].second == best);

    auto all = zoo::topk_select(cands, spec, cands.size(), ctx);
    REQUIRE(all.size() == cands.size());
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].second >= all[i].second);

    // stable tie-break: duplicated candidate keeps input order
    std::vector<codec::FlatWeights> dup{cands[0], cands[0], cands[1]};
    auto picked = zoo::topk_select(dup, spec, 3, ctx);
    const bool c0_wins = zoo::evaluate(cands[0], spec, ctx) >= zoo::evaluate(cands[1], spec, ctx);
    if (c0_wins) {
        CHECK(picked[0].first == &dup[0]);
        CHECK(picked[1].first == &dup[1]);
    }
}

TEST_CASE("zoo reaches high accuracy on separable toy data", "[zoo]") {
    TempTree t("zoo_learn");
    auto ctx = toy_context(t.dir / "data", 1);
    zoo::TrainerConfig trainer;
    trainer.epochs = 15;
    trainer.keep_last = 1;
    trainer.hidden = 32;
    auto m = zoo::build_zoo({toy_spec("toy0")}, trainer, ctx, t.dir / "zoo", 3);
    REQUIRE(m.records.size() == 1);
    CHECK(m.records[0].eval_acc > 0.8);
}

TEST_CASE("tiny convnet zoo keeps an epoch window like 21..25", "[zoo]") {
    TempTree t("zoo_conv");
    auto ctx = toy_context(t.dir / "data", 1);
    zoo::TrainerConfig trainer;
    trainer.arch = "tiny_convnet";
    trainer.epochs = 25;
    trainer.keep_last = 5;
    auto m = zoo::build_zoo({toy_spec("toy0")}, trainer, ctx, t.dir / "zoo", 5);
    REQUIRE(m.records.size() == 5);
    for (std::int64_t e = 21; e <= 25; ++e)
        CHECK(m.records[static_cast<std::size_t>(e - 21)].epoch == e);
    CHECK(m.records.back().eval_acc > 0.5);
}
