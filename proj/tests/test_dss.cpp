#include "gridnet/common.hpp"
#include "gridnet/dss.hpp"

#include <doctest.h>

#include <string>
#include <vector>

using namespace gridnet;
using namespace gridnet::dss;

namespace {

const char* kSmallCircuit = R"(
New Circuit.small bus1=src basekv=12.47 pu=1.02
New Linecode.c1 nphases=3 units=km rmatrix=(0.3465 | 0.1560 0.3375 | 0.1580 0.1535 0.3414) xmatrix=(1.0179 | 0.5017 1.0478 | 0.4236 0.3849 1.0348)
New Linecode.c2 nphases=1 units=mi rmatrix=(1.3425) xmatrix=(0.5124)
New Line.la bus1=src.1.2.3 bus2=b1.1.2.3 linecode=c1 length=1.2 units=km
New Line.lb bus1=b1.2 bus2=b2.2 linecode=c2 length=800 units=ft
New Transformer.t1 phases=3 windings=2 buses=(b1 b3) kvs=(12.47 4.16) kvas=(500 500) xhl=2 %r=0.55 taps=(1.0125 1)
New Load.ld1 bus1=b2.2 kw=100 kvar=50
New Load.ld2 bus1=b3.1.2.3 kw=300 kvar=150
New Capacitor.cp1 bus1=b3.1.2.3 kvar=300 state=on
Set mode=snap
Solve
)";

std::vector<Token> statement_tokens(const std::string& text) {
    auto toks = tokenize(text);
    std::vector<Token> stmt;
    for (const auto& t : toks) {
        if (t.kind == TokKind::Newline) break;
        stmt.push_back(t);
    }
    return stmt;
}

}  // namespace

TEST_CASE("tokenize splits bus references into dotted components") {
    auto stmt = statement_tokens("New Line.L1 Bus1=650.1 ! feeder");
    std::vector<std::pair<TokKind, std::string>> expected = {
        {TokKind::Keyword, "New"},   {TokKind::Identifier, "Line"}, {TokKind::Dot, "."},
        {TokKind::Identifier, "L1"}, {TokKind::Identifier, "Bus1"}, {TokKind::Equals, "="},
        {TokKind::Number, "650"},    {TokKind::Dot, "."},           {TokKind::Number, "1"},
    };
    REQUIRE(stmt.size() == expected.size());
    for (size_t i = 0; i < expected.size(); ++i) {
        CHECK(stmt[i].kind == expected[i].first);
        CHECK(stmt[i].text == expected[i].second);
    }
}

TEST_CASE("continuation lines append to the prior statement") {
    const std::string text = "New Line.l1 bus1=a.1 bus2=b.1 linecode=c length=1\n~ units=km\n";
    auto toks = tokenize(text);
    int newlines = 0;
    for (const auto& t : toks)
        if (t.kind == TokKind::Newline) ++newlines;
    CHECK(newlines == 1);  // a single merged statement
    CHECK(toks[toks.size() - 2].text == "km");
}

TEST_CASE("matrix literal tokens and parse") {
    const std::string text =
        "New Circuit.c bus1=a basekv=1 pu=1\n"
        "New Linecode.m nphases=2 units=km rmatrix=(0.3465 | 0.1560 0.3375) "
        "xmatrix=(1 | 0.5 1)\n"
        "New Line.l bus1=a.1.2 bus2=b.1.2 linecode=m length=1 units=km\n";
    auto spec = parse_file(text);
    REQUIRE(spec.linecodes.size() == 1);
    const auto& lc = spec.linecodes[0];
    CHECK(lc.r(0, 0) == doctest::Approx(0.3465));
    CHECK(lc.r(1, 0) == doctest::Approx(0.1560));
    CHECK(lc.r(0, 1) == doctest::Approx(0.1560));  // mirrored
    CHECK(lc.r(1, 1) == doctest::Approx(0.3375));
}

TEST_CASE("unterminated matrix literal is a lex error with a line number") {
    const std::string text = "New Linecode.m nphases=2 rmatrix=(0.3465 | 0.1560\n"
                             "New Line.l bus1=a bus2=b\n";
    CHECK_THROWS_AS(tokenize(text), LexError);
    try {
        tokenize(text);
    } catch (const LexError& e) {
        CHECK(e.line == 1);
    }
}

TEST_CASE("keywords are case-insensitive") {
    const std::string text = "NEW circuit.c BUS1=a BASEKV=1 pu=1\nnew LINE.l bus1=a bus2=b "
                             "linecode=c length=1\nNEW LINECODE.c nphases=3 "
                             "rmatrix=(1|.1 1|.1 .1 1) xmatrix=(1|.1 1|.1 .1 1) units=km\n";
    auto spec = parse_file(text);
    CHECK(spec.source.circuit_name == "c");
    CHECK(spec.lines.size() == 1);
}

TEST_CASE("three-phase line yields one record with both terminals resolved") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=3 units=km rmatrix=(1|.1 1|.1 .1 1) xmatrix=(2|.2 2|.2 .2 2)\n"
        "New Line.la bus1=B1.1.2.3 bus2=B2.1.2.3 LineCode=c1 Length=1 units=km\n";
    auto spec = parse_file(text);
    REQUIRE(spec.lines.size() == 1);
    const auto& ld = spec.lines[0];
    CHECK(ld.bus1.bus == "b1");
    CHECK(ld.bus2.bus == "b2");
    CHECK(ld.bus1.phases.size() == 3);
    CHECK(ld.z_ohm[0].real() == doctest::Approx(1.0));
    CHECK(ld.z_ohm[0].imag() == doctest::Approx(2.0));
}

TEST_CASE("single-phase load lands on the listed phase") {
    auto spec = parse_file(kSmallCircuit);
    const LoadDef* ld = nullptr;
    for (const auto& l : spec.loads)
        if (l.name == "ld1") ld = &l;
    REQUIRE(ld != nullptr);
    CHECK(ld->p_kw[0] == 0.0);
    CHECK(ld->p_kw[1] == doctest::Approx(100.0));
    CHECK(ld->p_kw[2] == 0.0);
    CHECK(ld->q_kvar[1] == doctest::Approx(50.0));
}

TEST_CASE("multi-phase totals split equally across listed phases") {
    auto spec = parse_file(kSmallCircuit);
    const LoadDef* ld = nullptr;
    for (const auto& l : spec.loads)
        if (l.name == "ld2") ld = &l;
    REQUIRE(ld != nullptr);
    for (int p = 0; p < 3; ++p) CHECK(ld->p_kw[static_cast<size_t>(p)] == doctest::Approx(100.0));
}

TEST_CASE("dangling bus is an error") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=1 units=km rmatrix=(1) xmatrix=(1)\n"
        "New Line.la bus1=b1.1 bus2=b2.1 linecode=c1 length=1 units=km\n"
        "New Load.x bus1=b9.1 kw=5 kvar=1\n";
    CHECK_THROWS_WITH_AS(parse_file(text),
                         doctest::Contains("dangling bus 'b9'"), ParseError);
}

TEST_CASE("dangling linecode reference is an error") {
    const std::string text = "New Circuit.c bus1=b1 basekv=1 pu=1\n"
                             "New Line.la bus1=b1.1 bus2=b2.1 linecode=zzz length=1 units=km\n";
    CHECK_THROWS_WITH_AS(parse_file(text), doctest::Contains("unknown linecode"), ParseError);
}

TEST_CASE("missing circuit statement is an error") {
    CHECK_THROWS_WITH_AS(parse_file("New Load.x bus1=b.1 kw=1 kvar=1\n"),
                         doctest::Contains("missing 'New Circuit'"), ParseError);
}

TEST_CASE("duplicate element names are an error") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=1 units=km rmatrix=(1) xmatrix=(1)\n"
        "New Line.la bus1=b1.1 bus2=b2.1 linecode=c1 length=1 units=km\n"
        "New Line.la bus1=b2.1 bus2=b3.1 linecode=c1 length=1 units=km\n";
    CHECK_THROWS_WITH_AS(parse_file(text), doctest::Contains("duplicate element name"), ParseError);
}

TEST_CASE("unknown element classes are skipped with a warning") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=1 units=km rmatrix=(1) xmatrix=(1)\n"
        "New Line.la bus1=b1.1 bus2=b2.1 linecode=c1 length=1 units=km\n"
        "New Monitor.m1 element=Line.la terminal=1\n";
    auto spec = parse_file(text);
    REQUIRE(spec.warnings.size() >= 1);
    CHECK(spec.warnings[0].find("monitor") != std::string::npos);
}

TEST_CASE("delta loads convert to wye with a warning") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=1 pu=1\n"
        "New Linecode.c1 nphases=2 units=km rmatrix=(1|.1 1) xmatrix=(1|.1 1)\n"
        "New Line.la bus1=b1.2.3 bus2=b2.2.3 linecode=c1 length=1 units=km\n"
        "New Load.d bus1=b2.2.3 conn=delta kw=230 kvar=132\n";
    auto spec = parse_file(text);
    REQUIRE(spec.loads.size() == 1);
    CHECK(spec.loads[0].p_kw[1] == doctest::Approx(115.0));
    CHECK(spec.loads[0].p_kw[2] == doctest::Approx(115.0));
    bool warned = false;
    for (const auto& w : spec.warnings)
        if (w.find("delta") != std::string::npos) warned = true;
    CHECK(warned);
}

TEST_CASE("phase indices outside 1..3 are rejected") {
    const std::string bad0 = "New Circuit.c bus1=b1.0 basekv=1 pu=1\n";
    CHECK_THROWS_AS(parse_file(bad0), ParseError);
    const std::string bad4 = "New Circuit.c bus1=b1.4 basekv=1 pu=1\n";
    CHECK_THROWS_AS(parse_file(bad4), ParseError);
}

TEST_CASE("phase suffix law") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = rng.uniform_int(0, 3);
        std::string ref = "bus";
        std::vector<int> order{1, 2, 3};
        for (int i = 2; i > 0; --i) std::swap(order[static_cast<size_t>(i)],
                                              order[static_cast<size_t>(rng.uniform_int(0, i))]);
        for (int i = 0; i < k; ++i) ref += "." + std::to_string(order[static_cast<size_t>(i)]);
        const std::string text = "New Circuit.c bus1=" + ref + " basekv=1 pu=1\n"
                                 "New Linecode.c1 nphases=1 units=km rmatrix=(1) xmatrix=(1)\n"
                                 "New Line.l bus1=bus.1 bus2=b2.1 linecode=c1 length=1 units=km\n";
        // BusRef semantics are easiest to observe through a load statement
        const std::string load_text =
            "New Circuit.c bus1=b1 basekv=1 pu=1\n"
            "New Linecode.c1 nphases=3 units=km rmatrix=(1|.1 1|.1 .1 1) xmatrix=(1|.1 1|.1 .1 1)\n"
            "New Line.l bus1=b1.1.2.3 bus2=b2.1.2.3 linecode=c1 length=1 units=km\n"
            "New Load.x bus1=b2" + ref.substr(3) + " kw=30 kvar=9\n";
        auto spec = parse_file(load_text);
        const size_t expected = k == 0 ? 3 : static_cast<size_t>(k);
        CHECK(spec.loads[0].bus.phases.size() == expected);
    }
}

TEST_CASE("parsing is deterministic") {
    auto a = parse_file(kSmallCircuit);
    auto b = parse_file(kSmallCircuit);
    CHECK(a == b);
}

TEST_CASE("serialize round-trips to an equal spec") {
    auto spec = parse_file(kSmallCircuit);
    const std::string text = serialize(spec);
    auto again = parse_file(text);
    CHECK(spec == again);
    // and the serialization itself is a fixed point
    CHECK(serialize(again) == text);
}

TEST_CASE("fixture files parse and round-trip") {
    for (const char* name : {"/case4.dss", "/case13.dss"}) {
        auto spec = parse_file(read_file(std::string(GRIDNET_FIXTURE_DIR) + name));
        auto again = parse_file(serialize(spec));
        CHECK(spec == again);
    }
}

TEST_CASE("transformer wdg syntax collapses to one record") {
    const std::string text =
        "New Circuit.c bus1=b1 basekv=4.16 pu=1\n"
        "New Linecode.c1 nphases=3 units=km rmatrix=(1|.1 1|.1 .1 1) xmatrix=(1|.1 1|.1 .1 1)\n"
        "New Line.l bus1=b1.1.2.3 bus2=b2.1.2.3 linecode=c1 length=1 units=km\n"
        "New Transformer.xf phases=3 windings=2 xhl=2\n"
        "~ wdg=1 bus=b2 kv=4.16 kva=500 %r=0.55\n"
        "~ wdg=2 bus=b3 kv=0.48 kva=500 %r=0.55\n";
    auto spec = parse_file(text);
    REQUIRE(spec.transformers.size() == 1);
    const auto& t = spec.transformers[0];
    CHECK(t.bus1.bus == "b2");
    CHECK(t.bus2.bus == "b3");
    CHECK(t.kv1 == doctest::Approx(4.16));
    CHECK(t.kv2 == doctest::Approx(0.48));
    CHECK(t.z_pu.real() == doctest::Approx(0.011));
    CHECK(t.z_pu.imag() == doctest::Approx(0.02));
}

TEST_CASE("circuit json export carries the documented schema") {
    auto spec = parse_file(kSmallCircuit);
    const std::string js = to_json_string(spec);
    CHECK(js.find("\"schema_version\"") != std::string::npos);
    CHECK(js.find("\"linecodes\"") != std::string::npos);
    CHECK(js.find("\"transformers\"") != std::string::npos);
}
