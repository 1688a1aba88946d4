#include "gridnet/dss.hpp"

#include "gridnet/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <span>
#include <sstream>

namespace gridnet::dss {

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

bool is_command(const std::string& lowered) {
    static const std::set<std::string> kCommands{"new", "set", "solve", "edit", "clear"};
    return kCommands.count(lowered) > 0;
}

}  // namespace

char phase_letter(Phase p) { return static_cast<char>('a' + static_cast<int>(p)); }

bool BusRef::has(Phase p) const {
    return std::find(phases.begin(), phases.end(), p) != phases.end();
}

uint8_t BusRef::mask() const {
    uint8_t m = 0;
    for (Phase p : phases) m |= static_cast<uint8_t>(1u << static_cast<int>(p));
    return m;
}

double unit_in_km(LengthUnit u) {
    switch (u) {
        case LengthUnit::mi: return 1.609344;
        case LengthUnit::km: return 1.0;
        case LengthUnit::kft: return 0.3048;
        case LengthUnit::ft: return 0.0003048;
        case LengthUnit::m: return 0.001;
    }
    return 1.0;
}

const char* unit_name(LengthUnit u) {
    switch (u) {
        case LengthUnit::mi: return "mi";
        case LengthUnit::km: return "km";
        case LengthUnit::kft: return "kft";
        case LengthUnit::ft: return "ft";
        case LengthUnit::m: return "m";
    }
    return "km";
}

const LineCodeDef* CircuitSpec::find_linecode(const std::string& name) const {
    std::string key = lower(name);
    for (const auto& lc : linecodes)
        if (lc.name == key) return &lc;
    return nullptr;
}

bool CircuitSpec::operator==(const CircuitSpec& o) const {
    return source == o.source && linecodes == o.linecodes && lines == o.lines &&
           transformers == o.transformers && loads == o.loads && capacitors == o.capacitors;
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

namespace {

bool ident_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '%';
}
bool ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '%';
}

struct SegmentLexer {
    std::vector<Token>& out;
    int paren_depth = 0;
    int paren_line = 0;

    explicit SegmentLexer(std::vector<Token>& sink) : out(sink) {}

    void lex(std::string_view s, int line) {
        size_t i = 0;
        const size_t n = s.size();
        while (i < n) {
            char c = s[i];
            if (std::isspace(static_cast<unsigned char>(c)) || c == ',') {
                ++i;
                continue;
            }
            switch (c) {
                case '=': out.push_back({TokKind::Equals, "=", line}); ++i; continue;
                case '.': out.push_back({TokKind::Dot, ".", line}); ++i; continue;
                case '|': out.push_back({TokKind::Bar, "|", line}); ++i; continue;
                case '(':
                    if (paren_depth == 0) paren_line = line;
                    ++paren_depth;
                    out.push_back({TokKind::LParen, "(", line});
                    ++i;
                    continue;
                case ')':
                    if (paren_depth == 0) throw LexError("unmatched ')'", line);
                    --paren_depth;
                    out.push_back({TokKind::RParen, ")", line});
                    ++i;
                    continue;
                default: break;
            }
            if (c == '-' || c == '+') {
                // A sign is only valid glued to a numeric literal; signed
                // literals take the full float form in one token.
                if (i + 1 < n && (std::isdigit(static_cast<unsigned char>(s[i + 1])) || s[i + 1] == '.')) {
                    size_t j = i + 1;
                    bool seen_dot = false;
                    while (j < n && (std::isdigit(static_cast<unsigned char>(s[j])) ||
                                     (s[j] == '.' && !seen_dot))) {
                        if (s[j] == '.') seen_dot = true;
                        ++j;
                    }
                    j = try_exponent(s, j);
                    out.push_back({TokKind::Number, std::string(s.substr(i, j - i)), line});
                    i = j;
                    continue;
                }
                throw LexError(std::string("unexpected character '") + c + "'", line);
            }
            if (std::isdigit(static_cast<unsigned char>(c))) {
                size_t j = i;
                while (j < n && std::isdigit(static_cast<unsigned char>(s[j]))) ++j;
                size_t k = try_exponent(s, j);
                if (k < n && ident_char(s[k])) {
                    // digit-led name such as "675a": one identifier token
                    size_t m = k;
                    while (m < n && ident_char(s[m])) ++m;
                    out.push_back({TokKind::Identifier, std::string(s.substr(i, m - i)), line});
                    i = m;
                    continue;
                }
                out.push_back({TokKind::Number, std::string(s.substr(i, k - i)), line});
                i = k;
                continue;
            }
            if (ident_start(c)) {
                size_t j = i;
                while (j < n && ident_char(s[j])) ++j;
                std::string text(s.substr(i, j - i));
                TokKind kind = is_command(lower(text)) ? TokKind::Keyword : TokKind::Identifier;
                out.push_back({kind, std::move(text), line});
                i = j;
                continue;
            }
            throw LexError(std::string("unexpected character '") + c + "'", line);
        }
    }

    static size_t try_exponent(std::string_view s, size_t j) {
        if (j < s.size() && (s[j] == 'e' || s[j] == 'E')) {
            size_t k = j + 1;
            if (k < s.size() && (s[k] == '+' || s[k] == '-')) ++k;
            if (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) {
                while (k < s.size() && std::isdigit(static_cast<unsigned char>(s[k]))) ++k;
                return k;
            }
        }
        return j;
    }
};

}  // namespace

std::vector<Token> tokenize(std::string_view text) {
    std::vector<Token> out;
    std::vector<Token> stmt;
    SegmentLexer lx(stmt);
    bool have_stmt = false;

    auto flush = [&]() {
        if (lx.paren_depth > 0)
            throw LexError("unterminated '(' in matrix or array literal", lx.paren_line);
        if (!stmt.empty()) {
            int last_line = stmt.back().line;
            for (auto& t : stmt) out.push_back(std::move(t));
            out.push_back({TokKind::Newline, "\n", last_line});
        }
        stmt.clear();
        have_stmt = false;
    };

    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t eol = text.find('\n', pos);
        if (eol == std::string_view::npos) eol = text.size();
        std::string_view line = text.substr(pos, eol - pos);
        ++line_no;
        pos = eol + 1;

        if (size_t bang = line.find('!'); bang != std::string_view::npos)
            line = line.substr(0, bang);
        size_t w = 0;
        while (w < line.size() && std::isspace(static_cast<unsigned char>(line[w]))) ++w;
        line = line.substr(w);
        if (!line.empty() && line.back() == '\r') line = line.substr(0, line.size() - 1);
        if (line.empty()) continue;

        if (line.front() == '~') {
            if (!have_stmt) throw LexError("continuation line with no prior statement", line_no);
            lx.lex(line.substr(1), line_no);
            continue;
        }
        flush();
        lx.lex(line, line_no);
        have_stmt = true;
        if (pos > text.size()) break;
    }
    flush();
    return out;
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

namespace {

struct Cursor {
    std::span<const Token> toks;
    size_t i = 0;

    bool at_end() const { return i >= toks.size(); }
    const Token& peek(size_t k = 0) const {
        static const Token eof{TokKind::Newline, "", 0};
        return i + k < toks.size() ? toks[i + k] : eof;
    }
    const Token& next() {
        if (at_end()) throw ParseError("unexpected end of statement", line());
        return toks[i++];
    }
    int line() const {
        if (!toks.empty()) return toks[std::min(i, toks.size() - 1)].line;
        return 0;
    }
    const Token& expect(TokKind kind, const char* what) {
        if (peek().kind != kind) throw ParseError(std::string("expected ") + what, line());
        return toks[i++];
    }
};

bool is_name_token(const Token& t) {
    return t.kind == TokKind::Identifier || t.kind == TokKind::Number || t.kind == TokKind::Keyword;
}

std::string parse_name(Cursor& c, const char* what) {
    if (!is_name_token(c.peek())) throw ParseError(std::string("expected ") + what, c.line());
    return lower(c.next().text);
}

double parse_scalar(Cursor& c) {
    std::string text;
    int line = c.line();
    if (c.peek().kind == TokKind::Dot) {
        c.next();
        text = "0." + c.expect(TokKind::Number, "digits after '.'").text;
    } else {
        text = c.expect(TokKind::Number, "number").text;
        if (c.peek().kind == TokKind::Dot && c.peek(1).kind == TokKind::Number) {
            c.next();
            text += "." + c.next().text;
        }
    }
    const char* begin = text.c_str();
    char* end = nullptr;
    double v = std::strtod(begin, &end);
    if (end != begin + text.size() || !std::isfinite(v))
        throw ParseError("malformed number '" + text + "'", line);
    return v;
}

BusRef parse_busref(Cursor& c) {
    BusRef b;
    b.bus = parse_name(c, "bus name");
    while (c.peek().kind == TokKind::Dot) {
        c.next();
        const Token& t = c.expect(TokKind::Number, "phase index");
        bool digits_only = !t.text.empty() &&
                           std::all_of(t.text.begin(), t.text.end(),
                                       [](char ch) { return std::isdigit(static_cast<unsigned char>(ch)); });
        if (!digits_only) throw ParseError("malformed phase index '" + t.text + "'", t.line);
        int v = std::atoi(t.text.c_str());
        if (v < 1 || v > 3)
            throw ParseError("phase index " + t.text + " out of range 1..3 on bus '" + b.bus + "'",
                             t.line);
        Phase p = static_cast<Phase>(v - 1);
        if (b.has(p)) throw ParseError("duplicate phase index on bus '" + b.bus + "'", t.line);
        b.phases.push_back(p);
    }
    if (b.phases.empty()) b.phases.assign(kAllPhases.begin(), kAllPhases.end());
    return b;
}

std::vector<std::vector<double>> parse_matrix(Cursor& c) {
    c.expect(TokKind::LParen, "'('");
    std::vector<std::vector<double>> rows;
    std::vector<double> row;
    while (true) {
        if (c.peek().kind == TokKind::RParen) {
            c.next();
            if (!row.empty()) rows.push_back(std::move(row));
            break;
        }
        if (c.peek().kind == TokKind::Bar) {
            c.next();
            rows.push_back(std::move(row));
            row.clear();
            continue;
        }
        if (c.at_end()) throw ParseError("unterminated matrix literal", c.line());
        row.push_back(parse_scalar(c));
    }
    if (rows.empty()) throw ParseError("empty matrix literal", c.line());
    return rows;
}

std::vector<double> parse_number_array(Cursor& c) {
    if (c.peek().kind != TokKind::LParen) return {parse_scalar(c)};
    c.next();
    std::vector<double> vals;
    while (c.peek().kind != TokKind::RParen) {
        if (c.at_end()) throw ParseError("unterminated array literal", c.line());
        vals.push_back(parse_scalar(c));
    }
    c.next();
    return vals;
}

std::vector<BusRef> parse_bus_array(Cursor& c) {
    c.expect(TokKind::LParen, "'('");
    std::vector<BusRef> refs;
    while (c.peek().kind != TokKind::RParen) {
        if (c.at_end()) throw ParseError("unterminated bus array", c.line());
        refs.push_back(parse_busref(c));
    }
    c.next();
    return refs;
}

bool parse_onoff(Cursor& c) {
    const Token& t = c.next();
    std::string v = lower(t.text);
    if (t.kind == TokKind::Number) {
        if (v == "1") return true;
        if (v == "0") return false;
    }
    if (v == "on" || v == "true" || v == "yes") return true;
    if (v == "off" || v == "false" || v == "no") return false;
    throw ParseError("expected on/off value, got '" + t.text + "'", t.line);
}

void skip_value(Cursor& c) {
    if (c.peek().kind == TokKind::LParen) {
        int depth = 0;
        while (!c.at_end()) {
            TokKind k = c.next().kind;
            if (k == TokKind::LParen) ++depth;
            if (k == TokKind::RParen && --depth == 0) return;
        }
        return;
    }
    while (!c.at_end()) {
        TokKind k = c.peek().kind;
        bool starts_property = is_name_token(c.peek()) && c.peek(1).kind == TokKind::Equals;
        if (starts_property) return;
        if (k == TokKind::Number || k == TokKind::Dot || k == TokKind::Identifier ||
            k == TokKind::Keyword) {
            c.next();
            continue;
        }
        return;
    }
}

// Raw per-class records before cross-reference resolution.

struct RawTransformer {
    std::string name;
    int line = 0;
    int phases_prop = -1;
    int windings = 2;
    std::vector<BusRef> buses;
    std::vector<double> kvs;
    std::vector<double> kvas;
    std::vector<double> taps;
    std::array<double, 2> pct_r{0.0, 0.0};
    bool pct_r_stmt = false;     // statement-level %r applies to both windings
    double pct_r_both = 0.0;
    double xhl = 0.0;
    double rpu = -1.0, xpu = -1.0;  // direct overrides
    int wdg = 0;                 // current winding during parse (1-based)
};

struct RawLoad {
    std::string name;
    int line = 0;
    BusRef bus;
    bool has_bus = false;
    std::vector<double> kw, kvar;
    bool delta = false;
    int phases_prop = -1;
};

struct Builder {
    CircuitSpec spec;
    bool have_source = false;
    std::set<std::string> seen_linecodes, seen_lines, seen_transformers, seen_loads, seen_caps;
    std::vector<RawTransformer> raw_transformers;
    std::vector<RawLoad> raw_loads;

    void warn(const std::string& msg) { spec.warnings.push_back(msg); }

    void check_unique(std::set<std::string>& seen, const std::string& cls, const std::string& name,
                      int line) {
        if (!seen.insert(name).second)
            throw ParseError("duplicate element name " + cls + "." + name, line);
    }

    void parse_statement(Cursor& c);
    void parse_new(Cursor& c);
    void parse_circuit(Cursor& c, const std::string& name);
    void parse_linecode(Cursor& c, const std::string& name);
    void parse_line(Cursor& c, const std::string& name);
    void parse_transformer(Cursor& c, const std::string& name);
    void parse_load(Cursor& c, const std::string& name);
    void parse_capacitor(Cursor& c, const std::string& name);
    void finalize();

    static LengthUnit parse_units(Cursor& c) {
        const Token& t = c.next();
        std::string u = lower(t.text);
        if (u == "mi" || u == "miles") return LengthUnit::mi;
        if (u == "km") return LengthUnit::km;
        if (u == "kft") return LengthUnit::kft;
        if (u == "ft" || u == "feet") return LengthUnit::ft;
        if (u == "m" || u == "meter") return LengthUnit::m;
        throw ParseError("unknown length unit '" + t.text + "'", t.line);
    }
};

void Builder::parse_statement(Cursor& c) {
    const Token& head = c.peek();
    std::string cmd = lower(head.text);
    if (cmd == "new") {
        c.next();
        parse_new(c);
        return;
    }
    if (cmd == "set" || cmd == "solve") return;  // ignored by design
    warn("skipped statement '" + head.text + "' (unsupported command)");
}

void Builder::parse_new(Cursor& c) {
    int line = c.line();
    std::string cls = parse_name(c, "element class");
    c.expect(TokKind::Dot, "'.' after element class");
    std::string name = parse_name(c, "element name");
    // glue dotted name parts: "Line.632.645" is not a bus ref here
    while (c.peek().kind == TokKind::Dot && is_name_token(c.peek(1)) &&
           !(c.peek(1).kind == TokKind::Number && c.peek(2).kind == TokKind::Equals)) {
        // only glue when this cannot start a property assignment
        if (cls == "circuit" || cls == "linecode" || cls == "line" || cls == "transformer" ||
            cls == "load" || cls == "capacitor")
            break;
        c.next();
        name += "." + lower(c.next().text);
    }

    if (cls == "circuit") {
        if (have_source) throw ParseError("more than one Circuit statement", line);
        parse_circuit(c, name);
        have_source = true;
    } else if (cls == "linecode") {
        check_unique(seen_linecodes, "linecode", name, line);
        parse_linecode(c, name);
    } else if (cls == "line") {
        check_unique(seen_lines, "line", name, line);
        parse_line(c, name);
    } else if (cls == "transformer") {
        check_unique(seen_transformers, "transformer", name, line);
        parse_transformer(c, name);
    } else if (cls == "load") {
        check_unique(seen_loads, "load", name, line);
        parse_load(c, name);
    } else if (cls == "capacitor") {
        check_unique(seen_caps, "capacitor", name, line);
        parse_capacitor(c, name);
    } else {
        warn("skipped unsupported element class '" + cls + "." + name + "'");
    }
}

void Builder::parse_circuit(Cursor& c, const std::string& name) {
    SourceDef& src = spec.source;
    src.circuit_name = name;
    bool have_kv = false;
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "bus1") {
            BusRef b = parse_busref(c);
            src.bus = b.bus;
        } else if (prop == "basekv") {
            src.base_kv = parse_scalar(c);
            have_kv = true;
        } else if (prop == "pu") {
            src.pu = parse_scalar(c);
        } else if (prop == "phases" || prop == "frequency" || prop == "mvasc3" ||
                   prop == "mvasc1" || prop == "angle") {
            skip_value(c);
        } else {
            warn("circuit." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    if (!have_kv || src.base_kv <= 0.0)
        throw ParseError("circuit '" + name + "' requires basekv > 0", c.line());
    if (src.pu <= 0.0) throw ParseError("circuit '" + name + "' requires pu > 0", c.line());
}

void Builder::parse_linecode(Cursor& c, const std::string& name) {
    LineCodeDef lc;
    lc.name = name;
    std::vector<std::vector<double>> rrows, xrows;
    int line = c.line();
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "nphases") {
            lc.n_phases = static_cast<int>(parse_scalar(c));
        } else if (prop == "rmatrix") {
            rrows = parse_matrix(c);
        } else if (prop == "xmatrix") {
            xrows = parse_matrix(c);
        } else if (prop == "units") {
            lc.unit = parse_units(c);
        } else if (prop == "cmatrix" || prop == "basefreq" || prop == "normamps" ||
                   prop == "emergamps") {
            skip_value(c);
        } else {
            warn("linecode." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    if (lc.n_phases < 1 || lc.n_phases > 3)
        throw ParseError("linecode '" + name + "': nphases must be 1..3", line);
    auto expand = [&](const std::vector<std::vector<double>>& rows, const char* which) {
        size_t n = static_cast<size_t>(lc.n_phases);
        if (rows.size() != n)
            throw ParseError("linecode '" + name + "': " + which + " needs " + std::to_string(n) +
                                 " rows",
                             line);
        std::vector<double> full(n * n, 0.0);
        for (size_t i = 0; i < n; ++i) {
            if (rows[i].size() != i + 1)
                throw ParseError("linecode '" + name + "': " + which +
                                     " must be lower triangular (row " + std::to_string(i + 1) +
                                     ")",
                                 line);
            for (size_t j = 0; j <= i; ++j) {
                full[i * n + j] = rows[i][j];
                full[j * n + i] = rows[i][j];
            }
        }
        return full;
    };
    lc.rmatrix = expand(rrows, "rmatrix");
    lc.xmatrix = expand(xrows, "xmatrix");
    for (int i = 0; i < lc.n_phases; ++i)
        if (lc.r(i, i) <= 0.0)
            throw ParseError("linecode '" + name + "': diagonal resistance must be > 0", line);
    spec.linecodes.push_back(std::move(lc));
}

void Builder::parse_line(Cursor& c, const std::string& name) {
    LineDef ld;
    ld.name = name;
    int line = c.line();
    bool have_b1 = false, have_b2 = false, have_code = false, have_len = false;
    int phases_prop = -1;
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "bus1") {
            ld.bus1 = parse_busref(c);
            have_b1 = true;
        } else if (prop == "bus2") {
            ld.bus2 = parse_busref(c);
            have_b2 = true;
        } else if (prop == "linecode") {
            ld.linecode = parse_name(c, "linecode name");
            have_code = true;
        } else if (prop == "length") {
            ld.length = parse_scalar(c);
            have_len = true;
        } else if (prop == "units") {
            ld.unit = parse_units(c);
        } else if (prop == "phases") {
            phases_prop = static_cast<int>(parse_scalar(c));
        } else {
            warn("line." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    if (!have_b1 || !have_b2) throw ParseError("line '" + name + "' requires bus1 and bus2", line);
    if (!have_code) throw ParseError("line '" + name + "' requires a linecode", line);
    if (!have_len || ld.length <= 0.0)
        throw ParseError("line '" + name + "' requires length > 0", line);
    if (ld.bus1.mask() != ld.bus2.mask() || ld.bus1.phases.size() != ld.bus2.phases.size())
        throw ParseError("line '" + name + "': bus1 and bus2 phase sets differ", line);
    if (phases_prop >= 0 && phases_prop != static_cast<int>(ld.bus1.phases.size()))
        throw ParseError("line '" + name + "': phases property disagrees with bus suffix", line);
    spec.lines.push_back(std::move(ld));
}

void Builder::parse_transformer(Cursor& c, const std::string& name) {
    RawTransformer t;
    t.name = name;
    t.line = c.line();
    auto winding_slot = [&](const char* prop) -> int {
        if (t.wdg < 1 || t.wdg > 2)
            throw ParseError("transformer '" + name + "': '" + prop + "' requires wdg=1 or wdg=2",
                             t.line);
        return t.wdg - 1;
    };
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "phases") {
            t.phases_prop = static_cast<int>(parse_scalar(c));
        } else if (prop == "windings") {
            t.windings = static_cast<int>(parse_scalar(c));
        } else if (prop == "buses") {
            t.buses = parse_bus_array(c);
        } else if (prop == "kvs") {
            t.kvs = parse_number_array(c);
        } else if (prop == "kvas") {
            t.kvas = parse_number_array(c);
        } else if (prop == "taps") {
            t.taps = parse_number_array(c);
        } else if (prop == "xhl") {
            t.xhl = parse_scalar(c);
        } else if (prop == "rpu") {
            t.rpu = parse_scalar(c);
        } else if (prop == "xpu") {
            t.xpu = parse_scalar(c);
        } else if (prop == "%r") {
            if (t.wdg >= 1) {
                t.pct_r[winding_slot("%r")] = parse_scalar(c);
            } else {
                t.pct_r_both = parse_scalar(c);
                t.pct_r_stmt = true;
            }
        } else if (prop == "wdg") {
            t.wdg = static_cast<int>(parse_scalar(c));
        } else if (prop == "bus") {
            int w = winding_slot("bus");
            if (static_cast<int>(t.buses.size()) <= w) t.buses.resize(w + 1);
            t.buses[static_cast<size_t>(w)] = parse_busref(c);
        } else if (prop == "kv") {
            int w = winding_slot("kv");
            if (static_cast<int>(t.kvs.size()) <= w) t.kvs.resize(w + 1, 0.0);
            t.kvs[static_cast<size_t>(w)] = parse_scalar(c);
        } else if (prop == "kva") {
            int w = winding_slot("kva");
            if (static_cast<int>(t.kvas.size()) <= w) t.kvas.resize(w + 1, 0.0);
            t.kvas[static_cast<size_t>(w)] = parse_scalar(c);
        } else if (prop == "tap") {
            int w = winding_slot("tap");
            if (static_cast<int>(t.taps.size()) <= w) t.taps.resize(w + 1, 1.0);
            t.taps[static_cast<size_t>(w)] = parse_scalar(c);
        } else if (prop == "conns" || prop == "conn" || prop == "%loadloss" ||
                   prop == "%noloadloss" || prop == "xht" || prop == "xlt") {
            skip_value(c);
        } else {
            warn("transformer." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    raw_transformers.push_back(std::move(t));
}

void Builder::parse_load(Cursor& c, const std::string& name) {
    RawLoad l;
    l.name = name;
    l.line = c.line();
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "bus1") {
            l.bus = parse_busref(c);
            l.has_bus = true;
        } else if (prop == "kw") {
            l.kw = parse_number_array(c);
        } else if (prop == "kvar") {
            l.kvar = parse_number_array(c);
        } else if (prop == "conn") {
            std::string v = lower(c.next().text);
            l.delta = (v == "delta" || v == "ll");
        } else if (prop == "phases") {
            l.phases_prop = static_cast<int>(parse_scalar(c));
        } else if (prop == "model") {
            double m = parse_scalar(c);
            if (m != 1.0)
                warn("load." + name + ": model " + format_double(m) +
                     " treated as constant-PQ (model 1)");
        } else if (prop == "kv" || prop == "vminpu" || prop == "vmaxpu" || prop == "class" ||
                   prop == "daily" || prop == "yearly" || prop == "status") {
            skip_value(c);
        } else {
            warn("load." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    raw_loads.push_back(std::move(l));
}

void Builder::parse_capacitor(Cursor& c, const std::string& name) {
    CapacitorDef cap;
    cap.name = name;
    int line = c.line();
    bool has_bus = false;
    std::vector<double> kvar;
    int phases_prop = -1;
    while (!c.at_end()) {
        std::string prop = lower(parse_name(c, "property name"));
        c.expect(TokKind::Equals, "'=' after property");
        if (prop == "bus1") {
            cap.bus = parse_busref(c);
            has_bus = true;
        } else if (prop == "kvar") {
            kvar = parse_number_array(c);
        } else if (prop == "state") {
            cap.initially_on = parse_onoff(c);
        } else if (prop == "states") {
            auto vals = parse_number_array(c);
            if (vals.empty()) throw ParseError("capacitor '" + name + "': empty states", line);
            cap.initially_on = vals[0] != 0.0;
        } else if (prop == "phases") {
            phases_prop = static_cast<int>(parse_scalar(c));
        } else if (prop == "kv" || prop == "conn") {
            skip_value(c);
        } else {
            warn("capacitor." + name + ": ignored property '" + prop + "'");
            skip_value(c);
        }
    }
    if (!has_bus) throw ParseError("capacitor '" + name + "' requires bus1", line);
    size_t n = cap.bus.phases.size();
    if (phases_prop >= 0 && phases_prop != static_cast<int>(n))
        throw ParseError("capacitor '" + name + "': phases property disagrees with bus suffix",
                         line);
    if (kvar.empty()) throw ParseError("capacitor '" + name + "' requires kvar", line);
    if (kvar.size() == 1) {
        for (Phase p : cap.bus.phases)
            cap.q_kvar[static_cast<size_t>(p)] = kvar[0] / static_cast<double>(n);
    } else if (kvar.size() == n) {
        for (size_t i = 0; i < n; ++i)
            cap.q_kvar[static_cast<size_t>(cap.bus.phases[i])] = kvar[i];
    } else {
        throw ParseError("capacitor '" + name + "': kvar array length must match phase count",
                         line);
    }
    spec.capacitors.push_back(std::move(cap));
}

void Builder::finalize() {
    if (!have_source) throw ParseError("missing 'New Circuit' statement");

    // lines: resolve linecodes and total ohm matrices
    for (auto& ld : spec.lines) {
        const LineCodeDef* lc = spec.find_linecode(ld.linecode);
        if (!lc)
            throw ParseError("unknown linecode '" + ld.linecode + "' referenced by line '" +
                             ld.name + "'");
        if (static_cast<int>(ld.bus1.phases.size()) != lc->n_phases)
            throw ParseError("line '" + ld.name + "': " + std::to_string(ld.bus1.phases.size()) +
                             " phases but linecode '" + lc->name + "' has " +
                             std::to_string(lc->n_phases));
        double factor = ld.length * unit_in_km(ld.unit) / unit_in_km(lc->unit);
        for (int i = 0; i < lc->n_phases; ++i) {
            for (int j = 0; j < lc->n_phases; ++j) {
                int pi = static_cast<int>(ld.bus1.phases[static_cast<size_t>(i)]);
                int pj = static_cast<int>(ld.bus1.phases[static_cast<size_t>(j)]);
                ld.z_ohm[static_cast<size_t>(pi) * 3 + pj] =
                    std::complex<double>(lc->r(i, j) * factor, lc->x(i, j) * factor);
            }
        }
    }

    // transformers: collapse windings to a series impedance + tap record
    for (auto& rt : raw_transformers) {
        if (rt.windings != 2)
            throw ParseError("transformer '" + rt.name + "': only two-winding supported", rt.line);
        if (rt.buses.size() != 2)
            throw ParseError("transformer '" + rt.name + "' requires two buses", rt.line);
        if (rt.kvs.size() != 2 || rt.kvs[0] <= 0 || rt.kvs[1] <= 0)
            throw ParseError("transformer '" + rt.name + "' requires kvs for both windings",
                             rt.line);
        TransformerDef td;
        td.name = rt.name;
        td.bus1 = rt.buses[0];
        td.bus2 = rt.buses[1];
        td.kv1 = rt.kvs[0];
        td.kv2 = rt.kvs[1];
        if (rt.kvas.empty()) {
            td.kva = 1000.0;
            warn("transformer." + rt.name + ": kva missing, using 1000 kVA");
        } else {
            td.kva = rt.kvas[0];
        }
        if (td.kva <= 0) throw ParseError("transformer '" + rt.name + "': kva must be > 0", rt.line);
        if (td.bus1.mask() != td.bus2.mask())
            throw ParseError("transformer '" + rt.name + "': bus1 and bus2 phase sets differ",
                             rt.line);
        if (rt.phases_prop >= 0 &&
            rt.phases_prop != static_cast<int>(td.bus1.phases.size()))
            throw ParseError("transformer '" + rt.name +
                                 "': phases property disagrees with bus suffix",
                             rt.line);
        double r_total = rt.pct_r_stmt ? 2.0 * rt.pct_r_both / 100.0
                                       : (rt.pct_r[0] + rt.pct_r[1]) / 100.0;
        td.z_pu = std::complex<double>(r_total, rt.xhl / 100.0);
        if (rt.rpu >= 0.0) td.z_pu.real(rt.rpu);
        if (rt.xpu >= 0.0) td.z_pu.imag(rt.xpu);
        if (!rt.taps.empty()) {
            double t2 = rt.taps.size() > 1 ? rt.taps[1] : 1.0;
            if (rt.taps[0] <= 0 || t2 <= 0)
                throw ParseError("transformer '" + rt.name + "': taps must be > 0", rt.line);
            td.tap_ratio = rt.taps[0] / t2;
        }
        spec.transformers.push_back(std::move(td));
    }

    // loads: distribute totals across listed phases, delta converted to wye
    for (auto& rl : raw_loads) {
        if (!rl.has_bus) throw ParseError("load '" + rl.name + "' requires bus1", rl.line);
        LoadDef ld;
        ld.name = rl.name;
        ld.bus = rl.bus;
        size_t n = ld.bus.phases.size();
        if (rl.phases_prop >= 0 && rl.phases_prop != static_cast<int>(n))
            throw ParseError("load '" + rl.name + "': phases property disagrees with bus suffix",
                             rl.line);
        auto distribute = [&](const std::vector<double>& vals, std::array<double, 3>& out,
                              const char* what) {
            if (vals.empty()) return;
            if (vals.size() == 1) {
                for (Phase p : ld.bus.phases)
                    out[static_cast<size_t>(p)] = vals[0] / static_cast<double>(n);
            } else if (vals.size() == n) {
                for (size_t i = 0; i < n; ++i)
                    out[static_cast<size_t>(ld.bus.phases[i])] = vals[i];
            } else {
                throw ParseError("load '" + rl.name + "': " + what +
                                     " array length must match phase count",
                                 rl.line);
            }
        };
        distribute(rl.kw, ld.p_kw, "kw");
        distribute(rl.kvar, ld.q_kvar, "kvar");
        if (rl.delta)
            warn("load." + rl.name +
                 ": delta connection converted to equivalent wye injections across its phases");
        spec.loads.push_back(std::move(ld));
    }

    // every referenced bus must be wired by a line or transformer terminal
    std::set<std::string> wired;
    for (const auto& ld : spec.lines) {
        wired.insert(ld.bus1.bus);
        wired.insert(ld.bus2.bus);
    }
    for (const auto& td : spec.transformers) {
        wired.insert(td.bus1.bus);
        wired.insert(td.bus2.bus);
    }
    auto require_wired = [&](const std::string& bus, const std::string& who) {
        if (!wired.count(bus))
            throw ParseError("dangling bus '" + bus + "' (referenced by " + who +
                             " but wired to no line or transformer)");
    };
    require_wired(spec.source.bus, "the source");
    for (const auto& l : spec.loads) require_wired(l.bus.bus, "load '" + l.name + "'");
    for (const auto& cp : spec.capacitors) require_wired(cp.bus.bus, "capacitor '" + cp.name + "'");
}

}  // namespace

CircuitSpec parse_file(const std::string& text) {
    auto toks = tokenize(text);
    Builder b;
    size_t start = 0;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (toks[i].kind != TokKind::Newline) continue;
        if (i > start) {
            Cursor c{std::span<const Token>(toks.data() + start, i - start)};
            b.parse_statement(c);
        }
        start = i + 1;
    }
    b.finalize();
    return std::move(b.spec);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

std::string busref_text(const BusRef& b) {
    std::string s = b.bus;
    for (Phase p : b.phases) s += "." + std::to_string(static_cast<int>(p) + 1);
    return s;
}

std::string lower_tri_text(const std::vector<double>& full, int n) {
    std::string s = "(";
    for (int i = 0; i < n; ++i) {
        if (i) s += " | ";
        for (int j = 0; j <= i; ++j) {
            if (j) s += " ";
            s += format_double(full[static_cast<size_t>(i) * n + j]);
        }
    }
    s += ")";
    return s;
}

template <typename Get>
std::string phase_array_text(const BusRef& b, Get get) {
    std::string s = "(";
    bool first = true;
    for (Phase p : b.phases) {
        if (!first) s += " ";
        first = false;
        s += format_double(get(static_cast<size_t>(p)));
    }
    s += ")";
    return s;
}

}  // namespace

std::string serialize(const CircuitSpec& spec) {
    std::ostringstream out;
    out << "New Circuit." << spec.source.circuit_name << " bus1=" << spec.source.bus
        << " basekv=" << format_double(spec.source.base_kv) << " pu="
        << format_double(spec.source.pu) << "\n";
    for (const auto& lc : spec.linecodes) {
        out << "New Linecode." << lc.name << " nphases=" << lc.n_phases << " units="
            << unit_name(lc.unit) << " rmatrix=" << lower_tri_text(lc.rmatrix, lc.n_phases)
            << " xmatrix=" << lower_tri_text(lc.xmatrix, lc.n_phases) << "\n";
    }
    for (const auto& ld : spec.lines) {
        out << "New Line." << ld.name << " bus1=" << busref_text(ld.bus1) << " bus2="
            << busref_text(ld.bus2) << " linecode=" << ld.linecode << " length="
            << format_double(ld.length) << " units=" << unit_name(ld.unit) << "\n";
    }
    for (const auto& td : spec.transformers) {
        out << "New Transformer." << td.name << " phases=" << td.bus1.phases.size()
            << " windings=2 buses=(" << busref_text(td.bus1) << " " << busref_text(td.bus2)
            << ") kvs=(" << format_double(td.kv1) << " " << format_double(td.kv2) << ") kvas=("
            << format_double(td.kva) << " " << format_double(td.kva) << ") rpu="
            << format_double(td.z_pu.real()) << " xpu=" << format_double(td.z_pu.imag())
            << " taps=(" << format_double(td.tap_ratio) << " 1)\n";
    }
    for (const auto& l : spec.loads) {
        out << "New Load." << l.name << " bus1=" << busref_text(l.bus) << " kw="
            << phase_array_text(l.bus, [&](size_t p) { return l.p_kw[p]; }) << " kvar="
            << phase_array_text(l.bus, [&](size_t p) { return l.q_kvar[p]; }) << "\n";
    }
    for (const auto& cp : spec.capacitors) {
        out << "New Capacitor." << cp.name << " bus1=" << busref_text(cp.bus) << " kvar="
            << phase_array_text(cp.bus, [&](size_t p) { return cp.q_kvar[p]; }) << " state="
            << (cp.initially_on ? "on" : "off") << "\n";
    }
    return out.str();
}

std::string to_json_string(const CircuitSpec& spec, int indent) {
    using nlohmann::json;
    auto phases_str = [](const BusRef& b) {
        std::string s;
        for (Phase p : b.phases) s += phase_letter(p);
        return s;
    };
    auto busref_json = [&](const BusRef& b) {
        return json{{"bus", b.bus}, {"phases", phases_str(b)}};
    };
    auto tri = [](const std::vector<double>& full, int n) {
        json rows = json::array();
        for (int i = 0; i < n; ++i) {
            json row = json::array();
            for (int j = 0; j <= i; ++j) row.push_back(full[static_cast<size_t>(i) * n + j]);
            rows.push_back(row);
        }
        return rows;
    };

    json j;
    j["schema_version"] = 1;
    j["source"] = {{"circuit", spec.source.circuit_name},
                   {"bus", spec.source.bus},
                   {"base_kv", spec.source.base_kv},
                   {"pu", spec.source.pu}};
    j["linecodes"] = json::array();
    for (const auto& lc : spec.linecodes)
        j["linecodes"].push_back({{"name", lc.name},
                                  {"n_phases", lc.n_phases},
                                  {"unit", unit_name(lc.unit)},
                                  {"rmatrix", tri(lc.rmatrix, lc.n_phases)},
                                  {"xmatrix", tri(lc.xmatrix, lc.n_phases)}});
    j["lines"] = json::array();
    for (const auto& ld : spec.lines) {
        json zr = json::array(), zx = json::array();
        for (int r = 0; r < 3; ++r) {
            json rr = json::array(), rx = json::array();
            for (int cc = 0; cc < 3; ++cc) {
                rr.push_back(ld.z_ohm[static_cast<size_t>(r) * 3 + cc].real());
                rx.push_back(ld.z_ohm[static_cast<size_t>(r) * 3 + cc].imag());
            }
            zr.push_back(rr);
            zx.push_back(rx);
        }
        j["lines"].push_back({{"name", ld.name},
                              {"bus1", busref_json(ld.bus1)},
                              {"bus2", busref_json(ld.bus2)},
                              {"linecode", ld.linecode},
                              {"length", ld.length},
                              {"unit", unit_name(ld.unit)},
                              {"r_ohm", zr},
                              {"x_ohm", zx}});
    }
    j["transformers"] = json::array();
    for (const auto& td : spec.transformers)
        j["transformers"].push_back({{"name", td.name},
                                     {"bus1", busref_json(td.bus1)},
                                     {"bus2", busref_json(td.bus2)},
                                     {"kv1", td.kv1},
                                     {"kv2", td.kv2},
                                     {"kva", td.kva},
                                     {"r_pu", td.z_pu.real()},
                                     {"x_pu", td.z_pu.imag()},
                                     {"tap_ratio", td.tap_ratio}});
    j["loads"] = json::array();
    for (const auto& l : spec.loads)
        j["loads"].push_back({{"name", l.name},
                              {"bus", busref_json(l.bus)},
                              {"p_kw", l.p_kw},
                              {"q_kvar", l.q_kvar}});
    j["capacitors"] = json::array();
    for (const auto& cp : spec.capacitors)
        j["capacitors"].push_back({{"name", cp.name},
                                   {"bus", busref_json(cp.bus)},
                                   {"q_kvar", cp.q_kvar},
                                   {"initially_on", cp.initially_on}});
    j["warnings"] = spec.warnings;
    return j.dump(indent) + "\n";
}

}  // namespace gridnet::dss
