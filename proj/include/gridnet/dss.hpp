#pragma once

#include <array>
#include <complex>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace gridnet::dss {

enum class Phase : int { A = 0, B = 1, C = 2 };

inline constexpr std::array<Phase, 3> kAllPhases{Phase::A, Phase::B, Phase::C};

char phase_letter(Phase p);

/// Bus terminal reference. "650.1.3" keeps the listed order (A then C); a
/// bare bus name means all three phases.
struct BusRef {
    std::string bus;
    std::vector<Phase> phases;

    bool has(Phase p) const;
    uint8_t mask() const;
    bool operator==(const BusRef&) const = default;
};

enum class LengthUnit : int { mi = 0, km = 1, kft = 2, ft = 3, m = 4 };

double unit_in_km(LengthUnit u);
const char* unit_name(LengthUnit u);

/// Per-length series impedance of a line construction. Matrices are stored
/// full symmetric, row-major, n_phases x n_phases, ohm per unit length.
struct LineCodeDef {
    std::string name;
    int n_phases = 3;
    std::vector<double> rmatrix;
    std::vector<double> xmatrix;
    LengthUnit unit = LengthUnit::km;

    double r(int i, int j) const { return rmatrix[static_cast<size_t>(i) * n_phases + j]; }
    double x(int i, int j) const { return xmatrix[static_cast<size_t>(i) * n_phases + j]; }
    bool operator==(const LineCodeDef&) const = default;
};

struct SourceDef {
    std::string circuit_name;
    std::string bus = "sourcebus";
    double base_kv = 0.0;  // line-to-line kV
    double pu = 1.0;       // per-phase source voltage magnitude
    bool operator==(const SourceDef&) const = default;
};

struct LineDef {
    std::string name;
    BusRef bus1;
    BusRef bus2;
    std::string linecode;
    double length = 1.0;
    LengthUnit unit = LengthUnit::km;
    /// Resolved at parse exit: total series impedance in ohm, indexed by
    /// absolute phase (0=A, 1=B, 2=C); zero rows/cols on absent phases.
    std::array<std::complex<double>, 9> z_ohm{};
    bool operator==(const LineDef&) const = default;
};

/// Two-winding transformer collapsed to one series impedance + tap record.
struct TransformerDef {
    std::string name;
    BusRef bus1;
    BusRef bus2;
    double kv1 = 0.0;  // winding line-to-line kV
    double kv2 = 0.0;
    double kva = 1000.0;              // rating used as the impedance base
    std::complex<double> z_pu{0, 0};  // series impedance on the (kva, kv) base
    double tap_ratio = 1.0;           // declared tap, pu
    bool operator==(const TransformerDef&) const = default;
};

struct LoadDef {
    std::string name;
    BusRef bus;
    std::array<double, 3> p_kw{};    // per absolute phase
    std::array<double, 3> q_kvar{};  // per absolute phase
    bool operator==(const LoadDef&) const = default;
};

struct CapacitorDef {
    std::string name;
    BusRef bus;
    std::array<double, 3> q_kvar{};
    bool initially_on = true;
    bool operator==(const CapacitorDef&) const = default;
};

struct CircuitSpec {
    SourceDef source;
    std::vector<LineCodeDef> linecodes;
    std::vector<LineDef> lines;
    std::vector<TransformerDef> transformers;
    std::vector<LoadDef> loads;
    std::vector<CapacitorDef> capacitors;
    std::vector<std::string> warnings;  // parse notes, not part of identity

    const LineCodeDef* find_linecode(const std::string& name) const;
    bool operator==(const CircuitSpec& o) const;  // ignores warnings
};

// ---------------------------------------------------------------------------
// Lexer / parser
// ---------------------------------------------------------------------------

enum class TokKind : int {
    Keyword,
    Identifier,
    Number,
    Equals,
    Dot,
    LParen,
    RParen,
    Bar,
    Newline,
};

struct Token {
    TokKind kind;
    std::string text;
    int line = 0;
};

struct LexError : std::runtime_error {
    int line;
    LexError(const std::string& msg, int line_no)
        : std::runtime_error("lex error (line " + std::to_string(line_no) + "): " + msg),
          line(line_no) {}
};

struct ParseError : std::runtime_error {
    int line;
    explicit ParseError(const std::string& msg, int line_no = 0)
        : std::runtime_error("parse error (line " + std::to_string(line_no) + "): " + msg),
          line(line_no) {}
};

/// Lex .dss text. '!' comments are stripped, '~' continuation lines are
/// appended to the prior statement, keywords match case-insensitively.
/// Statements are delimited by Newline tokens.
std::vector<Token> tokenize(std::string_view text);

CircuitSpec parse_file(const std::string& text);

/// Render a spec back to .dss text; parse_file(serialize(s)) == s.
std::string serialize(const CircuitSpec& spec);

std::string to_json_string(const CircuitSpec& spec, int indent = 2);

}  // namespace gridnet::dss
