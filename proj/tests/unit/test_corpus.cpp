#include <doctest.h>

#include <filesystem>
#include <set>

#include "nudgecast/corpus.hpp"
#include "nudgecast/csv.hpp"
#include "nudgecast/digest.hpp"
#include "nudgecast/errors.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace nudgecast;

namespace {

std::string row(const std::string& id, const std::string& r, const std::string& d = "",
                const std::string& dir = "", const std::string& year = "2019",
                const std::string& n = "200") {
    return id + ",Title " + id + ",Goal,Calorie labels,information,Germany," + year +
           ",students," + n + ",100,100," + dir + "," + r + "," + d + "\n";
}

std::string with_header(const std::string& rows) { return std::string(kCorpusHeader) + "\n" + rows; }

std::string error_of(const std::string& text) {
    try {
        parse_corpus(text, "test");
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST_CASE("csv parser handles quotes, CRLF, BOM and embedded newlines") {
    auto rows = csv::parse("\xEF\xBB\xBF" "a,\"b,c\",\"say \"\"hi\"\"\"\r\n\r\nx,\"multi\nline\",z\n");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].cells == std::vector<std::string>{"a", "b,c", "say \"hi\""});
    CHECK(rows[1].cells[1] == "multi\nline");
    CHECK(rows[1].line == 3);
    CHECK_THROWS_AS(csv::parse("a,\"open\n"), ValidationError);
    CHECK(csv::escape("plain") == "plain");
    CHECK(csv::escape("a,b") == "\"a,b\"");
    CHECK(csv::join({"x", "y\"z"}) == "x,\"y\"\"z\"");
}

TEST_CASE("ingest derives d from r") {
    auto c = parse_corpus(with_header(row("S1", "0.3")), "p");
    REQUIRE(c.size() == 1);
    CHECK(c[0].outcome.d == doctest::Approx(0.628970902).epsilon(1e-9));
    CHECK(c[0].outcome.direction == Direction::positive);
    CHECK(c.provenance() == "p");
}

TEST_CASE("ingest derives r from d alone") {
    auto c = parse_corpus(with_header(row("S1", "", "-1.154700538379")), "p");
    CHECK(c[0].outcome.r == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(c[0].outcome.direction == Direction::negative);
}

TEST_CASE("ingest errors name the row and field") {
    auto bad_r = with_header(row("S1", "0.2") + row("S2", "1.2"));
    auto msg = error_of(bad_r);
    CHECK(msg.find("row 2") != std::string::npos);
    CHECK(msg.find("'r'") != std::string::npos);

    CHECK(error_of(with_header(row("S1", "0"))).find("zero") != std::string::npos);
    CHECK(error_of(with_header(row("S1", "0.3", "0.9"))).find("'d'") != std::string::npos);
    CHECK(error_of(with_header(row("S1", "0.3", "", "negative"))).find("'direction'") !=
          std::string::npos);
    CHECK(error_of(with_header(row("S1", "0.3", "", "", "1890"))).find("'year'") !=
          std::string::npos);
    CHECK(error_of(with_header(row("S1", "0.3", "", "", "2019", "0"))).find("'sample_size'") !=
          std::string::npos);
    CHECK(error_of(with_header(row("S1", "0.3") + row("S1", "0.2"))).find("S1") !=
          std::string::npos);
    CHECK(error_of("") == "empty corpus");
    CHECK(error_of(std::string(kCorpusHeader) + "\n") == "empty corpus");
}

TEST_CASE("year ranges collapse to the end year") {
    CHECK(parse_year("2019") == 2019);
    CHECK(parse_year("2015-2017") == 2017);
    CHECK(parse_year("2015\xE2\x80\x93" "2017") == 2017);
    CHECK(parse_year("2015/16") == 2016);
    CHECK(parse_year("20x9") == std::nullopt);
}

TEST_CASE("export and re-ingest preserve entries") {
    auto corpus = testing::synthetic_corpus(30, 5);
    auto again = parse_corpus(export_corpus(corpus), "again");
    REQUIRE(again.size() == corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        CHECK(again[i].study == corpus[i].study);
        CHECK(again[i].outcome.r == corpus[i].outcome.r);
        CHECK(again[i].outcome.d == corpus[i].outcome.d);
    }
}

TEST_CASE("ingest_corpus records the file digest; load_unseen flags holdout") {
    testing::TempDir tmp;
    auto path = tmp.path() / "c.csv";
    auto text = testing::synthetic_csv(12, 3, "U");
    write_file_atomic(path, text);
    auto c = ingest_corpus(path);
    CHECK(c.provenance() == sha256_hex(text));
    CHECK_FALSE(c[0].holdout);
    auto u = load_unseen(path);
    for (const auto& e : u.entries()) CHECK(e.holdout);
}

TEST_CASE("exclude_category drops matching entries only") {
    auto corpus = testing::synthetic_corpus(60, 9);
    auto kept = exclude_category(corpus, InterventionCategory::monetary);
    std::size_t monetary = 0;
    for (const auto& e : corpus.entries()) {
        monetary += e.study.intervention_category == InterventionCategory::monetary;
    }
    CHECK(kept.size() == corpus.size() - monetary);
    for (const auto& e : kept.entries()) {
        CHECK(e.study.intervention_category != InterventionCategory::monetary);
    }
}

TEST_CASE("split is a seeded partition with the requested counts") {
    auto corpus = testing::synthetic_corpus(208, 1);
    SplitSpec spec{7, {144, 23, 41}};
    auto a = split_corpus(corpus, spec);
    auto b = split_corpus(corpus, spec);
    CHECK(a == b);
    CHECK(a.counts() == SplitCounts{144, 23, 41});
    CHECK_NOTHROW(check_split(a, 208));
    auto c = split_corpus(corpus, {8, {144, 23, 41}});
    CHECK_FALSE(a == c);
    CHECK_THROWS_AS(split_corpus(corpus, {7, {144, 23, 40}}), ValidationError);

    auto merged = merge_validation_into_train(a);
    CHECK(merged.train.size() == 167);
    CHECK(merged.validation.empty());
    CHECK(merged.test == a.test);
}

TEST_CASE("xorshift64* sequence is fixed for a seed") {
    Xorshift64Star a(42), b(42), c(43);
    auto first = a.next();
    CHECK(first == b.next());
    CHECK(first != c.next());
    for (int i = 0; i < 1000; ++i) CHECK(a.below(7) < 7);
}
