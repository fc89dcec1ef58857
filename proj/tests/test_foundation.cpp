#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <numeric>
#include <stdexcept>

#include <unistd.h>

#include <gtest/gtest.h>

#include "hallu/date.hpp"
#include "hallu/digest.hpp"
#include "hallu/jsonl.hpp"
#include "hallu/kv_config.hpp"
#include "hallu/parallel.hpp"
#include "hallu/rng.hpp"
#include "hallu/text.hpp"

using namespace hallu;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> sentences(std::string_view s) {
    std::vector<std::string> out;
    for (auto sp : text::split_sentences(s)) out.emplace_back(s.substr(sp.start, sp.size()));
    return out;
}

fs::path temp_dir(const std::string& name) {
    auto p = fs::temp_directory_path() / ("hallu_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST(Date, ParsesStrictIso) {
    auto d = Date::parse("2024-02-29");
    ASSERT_TRUE(d);
    EXPECT_EQ(d->to_string(), "2024-02-29");
    EXPECT_FALSE(Date::parse("2023-02-29"));
    EXPECT_FALSE(Date::parse("2024-2-01"));
    EXPECT_FALSE(Date::parse("2024-02-01T00:00"));
    EXPECT_FALSE(Date::parse("abcd-ef-gh"));
    EXPECT_LT(*Date::parse("2023-12-31"), *Date::parse("2024-01-01"));
    EXPECT_EQ(*Date::parse("2024-01-01"), *Date::parse("2024-01-01"));
}

TEST(Text, SplitsOnTerminalPunctuation) {
    EXPECT_EQ(sentences("The bridge opened in 2021. It carries two lanes! Does it flood? No."),
              (std::vector<std::string>{"The bridge opened in 2021.", "It carries two lanes!", "Does it flood?", "No."}));
}

TEST(Text, KeepsAbbreviationsAndInitials) {
    EXPECT_EQ(sentences("Dr. Smith met J. R. Doe in the U.S. Senate. They talked."),
              (std::vector<std::string>{"Dr. Smith met J. R. Doe in the U.S. Senate.", "They talked."}));
    EXPECT_EQ(sentences("Prices rose by 3.5 percent. Wages did not."),
              (std::vector<std::string>{"Prices rose by 3.5 percent.", "Wages did not."}));
}

TEST(Text, LowercaseContinuationIsNotABoundary) {
    EXPECT_EQ(sentences("It was built ca. five years ago. Then it fell."),
              (std::vector<std::string>{"It was built ca. five years ago.", "Then it fell."}));
    EXPECT_EQ(sentences("See e.g. the report."), (std::vector<std::string>{"See e.g. the report."}));
}

TEST(Text, QuotesAndBlankLines) {
    EXPECT_EQ(sentences("He said \"stop.\" Then \"Go.\"\n\nnew paragraph"),
              (std::vector<std::string>{"He said \"stop.\"", "Then \"Go.\"", "new paragraph"}));
}

TEST(Text, SpansAreTrimmedAndOrdered) {
    const std::string s = "  One here.   Two there.  ";
    auto spans = text::split_sentences(s);
    ASSERT_EQ(spans.size(), 2u);
    EXPECT_EQ(spans[0], (text::Span{2, 11}));
    EXPECT_EQ(s.substr(spans[1].start, spans[1].size()), "Two there.");
}

TEST(Text, Utf8LengthCountsCodePoints) {
    EXPECT_EQ(text::utf8_length("abc"), 3u);
    EXPECT_EQ(text::utf8_length("Zürich"), 6u);
    EXPECT_EQ(text::utf8_length("日本"), 2u);
}

TEST(Text, ReplaceAllIsSinglePass) {
    EXPECT_EQ(text::replace_all("aXbX", "X", "XX"), "aXXbXX");
    EXPECT_EQ(text::split(" a , b ,c", ','), (std::vector<std::string>{"a", "b", "c"}));
    EXPECT_EQ(text::normalize_whitespace("  a \n\t b  "), "a b");
}

TEST(Digest, KnownSha256Vectors) {
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    auto dir = temp_dir("digest");
    std::ofstream(dir / "f.txt", std::ios::binary) << "abc";
    EXPECT_EQ(sha256_file(dir / "f.txt"), sha256_hex("abc"));
    fs::remove_all(dir);
}

TEST(Rng, StreamsAreKeyedAndReproducible) {
    KeyedRng a(7, "x"), b(7, "x"), c(7, "y"), d(8, "x");
    auto va = a(), vb = b();
    EXPECT_EQ(va, vb);
    EXPECT_NE(va, c());
    EXPECT_NE(va, d());
}

TEST(Rng, BelowIsRoughlyUniform) {
    KeyedRng r(1, "uniform");
    std::array<int, 3> counts{};
    const int n = 30000;
    for (int i = 0; i < n; ++i) counts[r.below(3)]++;
    for (int c : counts) EXPECT_NEAR(c / double(n), 1.0 / 3, 0.015);
    for (int i = 0; i < 1000; ++i) {
        double u = r.uniform();
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, ShuffleIsAPermutation) {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    auto w = v;
    KeyedRng r(3, "shuffle");
    r.shuffle(w);
    EXPECT_NE(v, w);
    std::sort(w.begin(), w.end());
    EXPECT_EQ(v, w);
}

TEST(KeyValueConfig, SectionsListsAndTypes) {
    auto c = KeyValueConfig::parse_string(
        "name = demo\nseeds = 10\nratio = 0.5\nstates = cev_middle, iav_last\n[endpoint]\nurl = http://x\n");
    EXPECT_EQ(c.require("name"), "demo");
    EXPECT_EQ(c.get_int("seeds", 0), 10);
    EXPECT_DOUBLE_EQ(c.get_double("ratio", 0), 0.5);
    EXPECT_EQ(c.list("states"), (std::vector<std::string>{"cev_middle", "iav_last"}));
    EXPECT_EQ(c.get_or("endpoint.url", ""), "http://x");
    EXPECT_EQ(c.section("endpoint").at("url"), "http://x");
    EXPECT_THROW(c.require("missing"), ConfigError);
    EXPECT_THROW(c.get_int("name", 0), ConfigError);
}

TEST(Jsonl, BadLinesBecomeDiagnostics) {
    auto dir = temp_dir("jsonl");
    std::ofstream(dir / "a.jsonl") << "{\"a\":1}\n\nnot json\n{\"a\":2}\n";
    Diagnostics diags;
    auto rows = jsonl::read_all(dir / "a.jsonl", diags);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[1]["a"], 2);
    ASSERT_EQ(diags.size(), 1u);
    EXPECT_NE(diags[0].where.find(":3"), std::string::npos);
    jsonl::write_all(dir / "b.jsonl", rows);
    Diagnostics none;
    EXPECT_EQ(jsonl::read_all(dir / "b.jsonl", none), rows);
    EXPECT_THROW(jsonl::read_all(dir / "missing.jsonl", none), Error);
    fs::remove_all(dir);
}

TEST(Parallel, VisitsEveryIndexOnceAndRethrows) {
    std::vector<std::atomic<int>> hits(100);
    parallel_for(100, 4, [&](std::size_t i) { hits[i]++; });
    for (auto& h : hits) EXPECT_EQ(h.load(), 1);
    EXPECT_THROW(parallel_for(10, 3,
                              [](std::size_t i) {
                                  if (i == 5) throw std::runtime_error("boom");
                              }),
                 std::runtime_error);
}
