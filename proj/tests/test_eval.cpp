#include <gtest/gtest.h>

#include "hallu/eval.hpp"
#include "synthetic.hpp"

using namespace hallu;
using namespace hallu::eval;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) { return fs::temp_directory_path() / ("hallu_eval_" + name); }

ExperimentSpec quick_spec(const fs::path& ds) {
    ExperimentSpec s;
    s.dataset = ds;
    s.seeds = 2;
    s.probe.learning_rate = 1e-3;
    s.probe.max_epochs = 15;
    s.probe.patience = 5;
    s.probe.batch_size = 32;
    return s;
}

const dataset::Dataset& two_quant_dataset() {
    static const auto ds = [] {
        synthetic::Spec spec;
        spec.sources = {{"m7b", "none"}, {"m7b", "int8"}};
        return synthetic::build(spec, temp_dir("twoquant"));
    }();
    return ds;
}

dataset::DatasetRecord rate_record(std::string model, std::string quant, prompts::TemplateId t, int label) {
    dataset::DatasetRecord r;
    r.model_id = std::move(model);
    r.quantization = std::move(quant);
    r.template_id = t;
    r.label = label;
    return r;
}

}  // namespace

TEST(Tolerance, MaxOfThreePointsAndTwoStd) {
    EXPECT_TRUE(within_tolerance(62.42, {65.41, 0.87}));
    EXPECT_FALSE(within_tolerance(62.40, {65.41, 0.87}));
    EXPECT_TRUE(within_tolerance(68.41, {65.41, 0.87}));
    EXPECT_TRUE(within_tolerance(61.5, {65.41, 2.0}));  // 2 x 2.0 = 4 points
    EXPECT_FALSE(within_tolerance(61.4, {65.41, 2.0}));
}

TEST(Spec, ParsesReferencesAndRejectsBadKeys) {
    auto c = KeyValueConfig::parse_string(
        "kind = table\ndataset = ds\nmodel = m7b\nquantizations = all, none\nstates = cev_middle, cev_middle+cev_last\n"
        "seeds = 3\nprobe.learning_rate = 0.001\n[reference]\ncev_middle.all = 65.41, 0.87\n\"cev_middle+cev_last\".none = 70\n");
    auto s = ExperimentSpec::from_config(c, "/base");
    EXPECT_EQ(s.dataset, fs::path("/base/ds"));
    EXPECT_EQ(s.states.size(), 2u);
    EXPECT_EQ(s.seeds, 3u);
    EXPECT_DOUBLE_EQ(s.probe.learning_rate, 0.001);
    ASSERT_EQ(s.reference.size(), 2u);
    EXPECT_DOUBLE_EQ((s.reference.at({"cev_middle", "all"}).std), 0.87);
    EXPECT_DOUBLE_EQ((s.reference.at({"cev_middle+cev_last", "none"}).mean), 70.0);

    auto bad = [](const std::string& text) {
        return [text] { ExperimentSpec::from_config(KeyValueConfig::parse_string(text)); };
    };
    EXPECT_THROW(bad("kind = table\n")(), ConfigError);
    EXPECT_THROW(bad("kind = nope\ndataset = d\n")(), ConfigError);
    EXPECT_THROW(bad("dataset = d\nstates = cev_first\n")(), ConfigError);
    EXPECT_THROW(bad("dataset = d\nquantizations = int3\n")(), ConfigError);
    EXPECT_THROW(bad("dataset = d\nanswerability = maybe\n")(), ConfigError);
    EXPECT_THROW(bad("kind = crosstest\ndataset = d\n")(), ConfigError);
    EXPECT_THROW(bad("kind = ablate\ndataset = d\n")(), ConfigError);
    EXPECT_THROW(bad("dataset = d\nwithhold = colour=red\n")(), ConfigError);
    EXPECT_THROW(bad("dataset = d\nseeds = 0\n")(), ConfigError);
}

TEST(Withhold, MatchesRecords) {
    dataset::DatasetRecord r;
    r.answerable = false;
    r.chunk_size = 750;
    r.chunks_per_prompt = 3;
    r.template_id = prompts::TemplateId::t1;
    EXPECT_TRUE(Withhold::parse("answerable=false").matches(r));
    EXPECT_FALSE(Withhold::parse("answerable=true").matches(r));
    EXPECT_TRUE(Withhold::parse("chunk_size = 750").matches(r));
    EXPECT_TRUE(Withhold::parse("chunks_per_prompt=3").matches(r));
    EXPECT_TRUE(Withhold::parse("template_id=t1").matches(r));
    EXPECT_THROW(Withhold::parse("chunk_size"), ConfigError);
}

TEST(Rates, OneOfFourIsTwentyFivePercent) {
    using prompts::TemplateId;
    std::vector<dataset::DatasetRecord> rs = {
        rate_record("l7b", "none", TemplateId::hub, 1), rate_record("l7b", "none", TemplateId::hub, 0),
        rate_record("l7b", "none", TemplateId::t1, 0),  rate_record("l7b", "none", TemplateId::t1, 0),
        rate_record("l7b", "int4", TemplateId::t2, 1),  rate_record("l7b", "int4", TemplateId::t2, 1),
        rate_record("l7b", "int4", TemplateId::t2, 0),
    };
    ExperimentSpec spec;
    spec.kind = "rates";
    spec.reference[{"l7b/none", "all"}] = {25.0, 0};
    spec.reference[{"l7b/int4", "t2"}] = {66.66, 0};
    spec.reference[{"l7b/int4", "all"}] = {66.68, 0};
    auto g = hallucination_rates(spec, rs);
    EXPECT_EQ(g.cols, (std::vector<std::string>{"all", "hub", "t1", "t2"}));
    EXPECT_EQ(g.rows, (std::vector<std::string>{"l7b/int4", "l7b/none"}));
    EXPECT_DOUBLE_EQ(*g.find("l7b/none", "all")->value, 25.0);
    EXPECT_DOUBLE_EQ(*g.find("l7b/none", "hub")->value, 50.0);
    EXPECT_DOUBLE_EQ(*g.find("l7b/none", "t1")->value, 0.0);
    EXPECT_FALSE(g.find("l7b/none", "t2")->available);
    EXPECT_TRUE(*g.find("l7b/none", "all")->within_tolerance);
    EXPECT_FALSE(*g.find("l7b/int4", "t2")->within_tolerance);  // 66.67 at two decimals
    EXPECT_FALSE(*g.find("l7b/int4", "all")->within_tolerance);
    EXPECT_FALSE(g.tolerance_ok());
    EXPECT_FALSE(g.notes.empty());
    auto text = g.render();
    EXPECT_NE(text.find("n/a"), std::string::npos);
    EXPECT_NE(text.find("25.00 ok"), std::string::npos);
    EXPECT_NE(text.find("66.67 MISS"), std::string::npos);
}

TEST(Rates, UnlabeledTemplateRecordsCountOnlyInAll) {
    std::vector<dataset::DatasetRecord> rs(3);
    for (auto& r : rs) {
        r.model_id = "x";
        r.quantization = "none";
    }
    rs[0].label = 1;
    rs[1].template_id = prompts::TemplateId::hub;
    auto g = hallucination_rates(ExperimentSpec{}, rs);
    EXPECT_NEAR(*g.find("x/none", "all")->value, 100.0 / 3, 1e-9);
    bool mismatch_noted = std::any_of(g.notes.begin(), g.notes.end(),
                                      [](const std::string& n) { return n.find("sum to 1, overall 3") != std::string::npos; });
    EXPECT_TRUE(mismatch_noted);
}

TEST(Table, GridLayoutAndConcatenation) {
    const auto& ds = two_quant_dataset();
    auto spec = quick_spec(ds.dir);
    spec.states = {"cev_middle", "cev_last+iav_last"};
    spec.quantizations = {"all", "int8", "int4"};
    spec.reference[{"cev_middle", "all"}] = {99.0, 0.0};
    auto g = run_table(spec, ds);
    EXPECT_EQ(g.rows, spec.states);
    EXPECT_EQ(g.cols, spec.quantizations);
    ASSERT_EQ(g.cells.size(), 6u);
    EXPECT_EQ(g.cells[0].row, "cev_middle");
    EXPECT_EQ(g.cells[0].col, "all");
    EXPECT_EQ(g.cells[4].row, "cev_last+iav_last");
    EXPECT_EQ(g.cells[4].col, "int8");

    const auto* concat = g.find("cev_last+iav_last", "int8");
    ASSERT_TRUE(concat->available);
    EXPECT_EQ(concat->detail["input_size"], 6 + 8);
    EXPECT_EQ(g.find("cev_middle", "all")->detail["input_size"], 6);
    EXPECT_EQ(concat->report.seeds.size(), 2u);

    const auto* missing = g.find("cev_middle", "int4");
    EXPECT_FALSE(missing->available);
    EXPECT_FALSE(missing->reason.empty());

    // 'all' pools both quantizations.
    EXPECT_GT(g.find("cev_middle", "all")->detail["train"].get<int>(), concat->detail["train"].get<int>());
    EXPECT_TRUE(g.find("cev_middle", "all")->within_tolerance.has_value());
    EXPECT_GT(*g.find("cev_middle", "all")->value, 60.0);
    EXPECT_NE(g.render().find("n/a"), std::string::npos);

    auto dir = temp_dir("grid_out");
    g.write(dir);
    EXPECT_EQ(jsonl::read_json(dir / "grid.json")["cells"].size(), 6u);
    EXPECT_TRUE(fs::exists(dir / "grid.txt"));
}

TEST(Table, OneSeedHasZeroSpread) {
    const auto& ds = two_quant_dataset();
    auto spec = quick_spec(ds.dir);
    spec.seeds = 1;
    spec.quantizations = {"none"};
    auto g = run_table(spec, ds);
    ASSERT_TRUE(g.cells[0].available);
    EXPECT_EQ(*g.cells[0].spread, 0.0);
}

TEST(Table, AnswerabilityFilterKeepsOneSide) {
    const auto& ds = two_quant_dataset();
    auto idx = select(ds, "m7b", "none", Answerability::unanswerable_only);
    ASSERT_FALSE(idx.empty());
    for (auto i : idx) EXPECT_FALSE(*ds.records[i].answerable);
    auto spec = quick_spec(ds.dir);
    spec.seeds = 1;
    spec.quantizations = {"none"};
    spec.answerability = Answerability::unanswerable_only;
    auto g = run_table(spec, ds);
    EXPECT_TRUE(g.cells[0].available) << g.cells[0].reason;
}

TEST(Table, TestSplitIsUntouchedByWithholding) {
    const auto& ds = two_quant_dataset();
    auto idx = select(ds, "m7b", "none", Answerability::both);
    Withhold w{"chunk_size", "350"};
    auto plain = prepare(ds, idx, {"cev_last"}, Answerability::both, nullptr, false);
    auto held = prepare(ds, idx, {"cev_last"}, Answerability::both, &w, true);
    EXPECT_EQ(plain.test.x, held.test.x);
    EXPECT_NE(plain.train.size(), held.train.size());
}

TEST(Ablate, NoneRowHasZeroDelta) {
    const auto& ds = two_quant_dataset();
    auto spec = quick_spec(ds.dir);
    spec.kind = "ablate";
    spec.quantizations = {"none"};
    spec.withhold = {Withhold::parse("answerable=false"), Withhold::parse("template_id=t2")};
    auto g = ablate_withheld(spec, ds);
    EXPECT_EQ(g.rows, (std::vector<std::string>{"none", "answerable=false", "template_id=t2"}));
    ASSERT_TRUE(g.find("none", "none")->available);
    EXPECT_EQ(*g.find("none", "none")->delta, 0.0);
    const auto* t2 = g.find("template_id=t2", "none");
    ASSERT_TRUE(t2->available) << t2->reason;
    EXPECT_DOUBLE_EQ(*t2->delta, *t2->value - *g.find("none", "none")->value);
}

TEST(CrossTest, TrainsOnOneDatasetAndTestsOnAnother) {
    const auto& a = two_quant_dataset();
    synthetic::Spec other;
    other.sources = {{"l13b", "none"}};
    other.seed = 9;
    auto b = synthetic::build(other, temp_dir("crossb"));
    auto spec = quick_spec(a.dir);
    spec.kind = "crosstest";
    spec.test_dataset = b.dir;
    spec.model = "m7b";
    spec.test_model = "l13b";
    spec.quantizations = {"none"};
    spec.states = {"iav_last"};
    auto g = cross_test(spec, a, b);
    ASSERT_EQ(g.cells.size(), 1u);
    ASSERT_TRUE(g.cells[0].available) << g.cells[0].reason;

    auto test_idx = in_split(b, select(b, "l13b", "none", Answerability::both), dataset::Split::test);
    auto expected = balanced(b, test_idx, balance_for(b, test_idx, Answerability::both, nullptr), "test");
    EXPECT_EQ(g.cells[0].detail["test"], expected.size());

    synthetic::Spec wide;
    wide.dims = {{"iav_last", 12}};
    auto c = synthetic::build(wide, temp_dir("crossc"));
    EXPECT_THROW(cross_test(spec, a, c), Error);
}

TEST(Run, DispatchesOnKind) {
    const auto& ds = two_quant_dataset();
    ExperimentSpec spec;
    spec.kind = "rates";
    spec.dataset = ds.dir;
    auto g = run(spec);
    EXPECT_EQ(g.kind, "rates");
    EXPECT_EQ(g.rows, (std::vector<std::string>{"m7b/int8", "m7b/none"}));
}
