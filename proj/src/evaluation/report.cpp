#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "dbench/errors.h"
#include "dbench/evaluation.h"

namespace dbench {

namespace {

const char* const kHeader = "method,split_mode,attribute,layer,k_or_eps,cause,iso,disentangle,n_cause,n_iso,recon_error";

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

}  // namespace

std::string format_score(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    return buf;
}

std::string format_percent(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return buf;
}

std::string scores_csv(std::span<const ScoreRow> rows) {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows) {
        out += r.method + "," + r.split_mode + "," + r.attribute + "," + std::to_string(r.layer) + "," + r.k_or_eps +
               "," + format_score(r.cause) + "," + format_score(r.iso) + "," + format_score(r.disentangle) + "," +
               std::to_string(r.n_cause) + "," + std::to_string(r.n_iso) + "," +
               (r.recon_error ? format_score(*r.recon_error) : std::string()) + "\n";
    }
    return out;
}

std::vector<ScoreRow> parse_scores_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || split_csv(line) != split_csv(kHeader))
        throw SpecError("scores.csv: unexpected header");
    std::vector<ScoreRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        const auto f = split_csv(line);
        if (f.size() != 11) throw SpecError("scores.csv line " + std::to_string(lineno) + ": expected 11 fields");
        try {
            ScoreRow r;
            r.method = f[0];
            r.split_mode = f[1];
            r.attribute = f[2];
            r.layer = std::stoul(f[3]);
            r.k_or_eps = f[4];
            r.cause = std::stod(f[5]);
            r.iso = std::stod(f[6]);
            r.disentangle = std::stod(f[7]);
            r.n_cause = std::stoul(f[8]);
            r.n_iso = std::stoul(f[9]);
            if (!f[10].empty()) r.recon_error = std::stod(f[10]);
            rows.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw SpecError("scores.csv line " + std::to_string(lineno) + ": malformed number");
        }
    }
    return rows;
}

std::string matrix_csv(std::span<const std::string> names, const Matrix& m) {
    std::string out = "intervened";
    for (const auto& n : names) out += "," + n;
    out += "\n";
    for (std::size_t a = 0; a < m.size(); ++a) {
        out += names[a];
        for (double v : m[a]) out += "," + format_score(v);
        out += "\n";
    }
    return out;
}

std::string heat_color(double v) {
    v = std::clamp(v, 0.0, 1.0);
    const int lo[3] = {255, 255, 255}, hi[3] = {8, 48, 107};
    char buf[8];
    int c[3];
    for (int i = 0; i < 3; ++i) c[i] = int(std::lround(lo[i] + (hi[i] - lo[i]) * v));
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

std::string heatmap_svg(std::span<const std::string> names, const Matrix& m, const std::string& title) {
    const int cell = 56, left = 120, top = 110;
    const int n = int(m.size());
    const int w = left + n * cell + 20, h = top + n * cell + 20;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<text x=\"10\" y=\"20\" font-size=\"14\">" << xml_escape(title) << "</text>\n";
    for (int b = 0; b < n; ++b)
        os << "<text x=\"" << left + b * cell + cell / 2 << "\" y=\"" << top - 8 << "\" transform=\"rotate(-45 "
           << left + b * cell + cell / 2 << " " << top - 8 << ")\">" << xml_escape(names[std::size_t(b)]) << "</text>\n";
    for (int a = 0; a < n; ++a) {
        os << "<text x=\"" << left - 8 << "\" y=\"" << top + a * cell + cell / 2 + 4 << "\" text-anchor=\"end\">"
           << xml_escape(names[std::size_t(a)]) << "</text>\n";
        for (int b = 0; b < n; ++b) {
            const double v = m[std::size_t(a)][std::size_t(b)];
            os << "<rect x=\"" << left + b * cell << "\" y=\"" << top + a * cell << "\" width=\"" << cell
               << "\" height=\"" << cell << "\" fill=\"" << heat_color(v) << "\" stroke=\"#999\"/>\n";
            os << "<text x=\"" << left + b * cell + cell / 2 << "\" y=\"" << top + a * cell + cell / 2 + 4
               << "\" text-anchor=\"middle\" fill=\"" << (v > 0.5 ? "#fff" : "#000") << "\">" << format_percent(v)
               << "</text>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

SummaryReport summarize(std::span<const ScoreRow> rows) {
    SummaryReport r;
    const std::vector<std::string> modes{"entity", "context"};
    std::vector<std::string> methods;
    for (const auto& row : rows)
        if (std::find(methods.begin(), methods.end(), row.method) == methods.end()) methods.push_back(row.method);

    auto mean_of = [&](const std::string& method, const std::string& mode, double ScoreRow::* field, bool& any) {
        double s = 0;
        std::size_t n = 0;
        for (const auto& row : rows)
            if (row.method == method && row.split_mode == mode) {
                s += row.*field;
                ++n;
            }
        any = n > 0;
        return n ? s / double(n) : 0.0;
    };

    std::ostringstream text, csv;
    csv << "method";
    text << "method      ";
    for (const auto& m : modes) {
        csv << "," << m << "_cause," << m << "_iso," << m << "_disentangle";
        char buf[64];
        std::snprintf(buf, sizeof buf, "  %-22s", m.c_str());
        text << buf;
    }
    csv << "\n";
    text << "\n            ";
    for (std::size_t i = 0; i < modes.size(); ++i) text << "  cause  iso    disent. ";
    text << "\n";
    for (const auto& method : methods) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%-12s", method.c_str());
        text << buf;
        csv << method;
        for (const auto& mode : modes) {
            bool any = false;
            const double c = mean_of(method, mode, &ScoreRow::cause, any);
            const double i = mean_of(method, mode, &ScoreRow::iso, any);
            const double d = mean_of(method, mode, &ScoreRow::disentangle, any);
            if (any) {
                std::snprintf(buf, sizeof buf, "  %-6s %-6s %-8s", format_percent(c).c_str(), format_percent(i).c_str(),
                              format_percent(d).c_str());
                csv << "," << format_percent(c) << "," << format_percent(i) << "," << format_percent(d);
            } else {
                std::snprintf(buf, sizeof buf, "  %-6s %-6s %-8s", "-", "-", "-");
                csv << ",,,";
            }
            text << buf;
        }
        text << "\n";
        csv << "\n";
    }
    r.text = text.str();
    r.csv = csv.str();
    return r;
}

}  // namespace dbench
