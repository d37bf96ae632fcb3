#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "kinefit/error.hpp"
#include "kinefit/math3d.hpp"

namespace kinefit {

enum class JointKind { Free, Hinge, Ball };

inline int joint_dof(JointKind k) {
    switch (k) {
        case JointKind::Free: return 6;
        case JointKind::Hinge: return 1;
        default: return 3;
    }
}

struct BodySegment {
    std::string name;
    int parent = -1;  // -1 for the root
    Vec3 attach_offset;
};

struct JointDef {
    int body = -1;
    JointKind kind = JointKind::Hinge;
    Vec3 axis{0, 1, 0};  // hinge only
    bool bounded = false;
    double range_lo = 0.0, range_hi = 0.0;  // radians, rotational DoF
    int dof_offset = 0;                     // first pose index of this joint
};

struct SiteDef {
    std::string name;
    int body = -1;
    Vec3 local_pos;
};

struct ScaleMap {
    int n_scales = 0;
    std::vector<std::string> names;
    // Per body, the scale parameter indices whose product forms that body's
    // factor. Index 0 (the overall size) is present in every row.
    std::vector<std::vector<int>> body_params;
};

// Linear DoF coupling: eps = theta[a] - ratio * theta[b] - offset.
struct EqualityConstraint {
    int dof_a = -1, dof_b = -1;
    double ratio = 1.0;
    double offset = 0.0;
};

struct SkeletonModel {
    std::vector<BodySegment> bodies;
    std::vector<JointDef> joints;
    std::vector<SiteDef> sites;
    ScaleMap scale_map;
    std::vector<EqualityConstraint> constraints;
    int n_dof = 0;

    int n_bodies() const { return static_cast<int>(bodies.size()); }
    int n_sites() const { return static_cast<int>(sites.size()); }

    int body_index(const std::string& name) const {
        for (size_t i = 0; i < bodies.size(); ++i)
            if (bodies[i].name == name) return static_cast<int>(i);
        return -1;
    }
    int site_index(const std::string& name) const {
        for (size_t i = 0; i < sites.size(); ++i)
            if (sites[i].name == name) return static_cast<int>(i);
        return -1;
    }
};

// Subject-specific parameters: scale factors plus per-site offsets.
struct SubjectParams {
    std::vector<double> scales;          // n_scales, 1.0 = unscaled
    std::vector<double> site_offsets;    // J*3 row-major, meters, body frame

    static SubjectParams neutral(const SkeletonModel& m) {
        SubjectParams p;
        p.scales.assign(static_cast<size_t>(m.scale_map.n_scales), 1.0);
        p.site_offsets.assign(static_cast<size_t>(m.n_sites()) * 3, 0.0);
        return p;
    }
};

// Per-body multiplicative factors, the product of the scale parameters
// assigned to each body.
inline std::vector<double> body_scales(const SkeletonModel& m, std::span<const double> scales) {
    if (static_cast<int>(scales.size()) != m.scale_map.n_scales)
        throw ShapeError("body_scales: expected " + std::to_string(m.scale_map.n_scales) +
                         " scale parameters");
    for (double s : scales)
        if (!(s > 0.0)) throw InputError("body_scales: non-positive scale parameter");
    std::vector<double> factors;
    factors.reserve(m.bodies.size());
    for (const auto& params : m.scale_map.body_params) {
        double f = 1.0;
        for (int p : params) f *= scales[static_cast<size_t>(p)];
        factors.push_back(f);
    }
    return factors;
}

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct LineParser {
    std::string line;
    int lineno;

    [[noreturn]] void fail(const std::string& msg, size_t col = 0) const {
        throw InputError("model:" + std::to_string(lineno) + ":" + std::to_string(col + 1) +
                         ": " + msg);
    }

    std::vector<std::string> tokens() const {
        std::vector<std::string> out;
        std::istringstream is(line);
        std::string t;
        while (is >> t) out.push_back(t);
        return out;
    }
};

inline bool split_kv(const std::string& tok, std::string& key, std::string& value) {
    size_t eq = tok.find('=');
    if (eq == std::string::npos) return false;
    key = tok.substr(0, eq);
    value = tok.substr(eq + 1);
    return true;
}

inline double parse_num(const LineParser& lp, const std::string& s) {
    try {
        size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) lp.fail("trailing characters in number '" + s + "'");
        if (!std::isfinite(v)) lp.fail("non-finite number '" + s + "'");
        return v;
    } catch (const InputError&) {
        throw;
    } catch (...) {
        lp.fail("expected a number, got '" + s + "'");
    }
}

inline Vec3 parse_vec3(const LineParser& lp, const std::string& s) {
    std::array<double, 3> v{};
    size_t start = 0;
    for (int i = 0; i < 3; ++i) {
        size_t comma = s.find(',', start);
        const bool last = (i == 2);
        if (last != (comma == std::string::npos)) lp.fail("expected 3 comma-separated values in '" + s + "'");
        v[static_cast<size_t>(i)] = parse_num(lp, s.substr(start, last ? std::string::npos : comma - start));
        start = comma + 1;
    }
    return {v[0], v[1], v[2]};
}

inline std::vector<std::string> parse_name_list(const std::string& s) {
    std::vector<std::string> out;
    size_t start = 0;
    while (start <= s.size()) {
        size_t comma = s.find(',', start);
        if (comma == std::string::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, comma - start));
        start = comma + 1;
    }
    return out;
}

inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail

// Parses the line-oriented model format. Directives:
//   body <name> parent=<name|none> offset=<x,y,z>
//   joint <body> kind=<free|hinge|ball> [axis=<x,y,z>] [range=<lo,hi>]
//   site <name> body=<body> pos=<x,y,z>
//   scale <name> bodies=<b1,b2,...|all>
//   constraint <dofA> <dofB> ratio=<r> offset=<o>
// '#' starts a comment. Units are meters and radians. The first declared
// scale is the overall size and applies to every body.
inline SkeletonModel parse_model(const std::string& text) {
    SkeletonModel m;
    std::map<std::string, int> body_by_name;
    std::map<std::string, int> site_names;
    std::vector<std::vector<std::string>> scale_bodies;  // resolved after all bodies known
    std::vector<detail::LineParser> scale_lines;

    std::istringstream stream(text);
    std::string raw;
    int lineno = 0;
    while (std::getline(stream, raw)) {
        ++lineno;
        size_t hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        const std::string line = detail::trim(raw);
        if (line.empty()) continue;
        detail::LineParser lp{line, lineno};
        auto toks = lp.tokens();
        const std::string& directive = toks[0];

        if (directive == "body") {
            if (toks.size() != 4) lp.fail("body expects: body <name> parent=<name|none> offset=<x,y,z>");
            BodySegment b;
            b.name = toks[1];
            if (body_by_name.count(b.name)) lp.fail("duplicate body '" + b.name + "'");
            std::string key, value;
            if (!detail::split_kv(toks[2], key, value) || key != "parent")
                lp.fail("expected parent=<name|none>");
            if (value == "none") {
                if (!m.bodies.empty()) lp.fail("body '" + b.name + "': only the first body may be the root");
                b.parent = -1;
            } else {
                auto it = body_by_name.find(value);
                if (it == body_by_name.end())
                    lp.fail("body '" + b.name + "': unknown parent '" + value +
                            "' (parents must be declared before children)");
                b.parent = it->second;
            }
            if (!detail::split_kv(toks[3], key, value) || key != "offset")
                lp.fail("expected offset=<x,y,z>");
            b.attach_offset = detail::parse_vec3(lp, value);
            if (b.parent == -1 && (b.attach_offset.x != 0 || b.attach_offset.y != 0 || b.attach_offset.z != 0))
                lp.fail("root body must have zero offset");
            body_by_name[b.name] = static_cast<int>(m.bodies.size());
            m.bodies.push_back(b);
        } else if (directive == "joint") {
            if (toks.size() < 3) lp.fail("joint expects: joint <body> kind=<free|hinge|ball> ...");
            JointDef j;
            auto it = body_by_name.find(toks[1]);
            if (it == body_by_name.end()) lp.fail("joint references unknown body '" + toks[1] + "'");
            j.body = it->second;
            bool have_kind = false, have_axis = false, have_range = false;
            for (size_t i = 2; i < toks.size(); ++i) {
                std::string key, value;
                if (!detail::split_kv(toks[i], key, value)) lp.fail("expected key=value, got '" + toks[i] + "'");
                if (key == "kind") {
                    have_kind = true;
                    if (value == "free") j.kind = JointKind::Free;
                    else if (value == "hinge") j.kind = JointKind::Hinge;
                    else if (value == "ball") j.kind = JointKind::Ball;
                    else lp.fail("unknown joint kind '" + value + "'");
                } else if (key == "axis") {
                    have_axis = true;
                    j.axis = detail::parse_vec3(lp, value);
                } else if (key == "range") {
                    have_range = true;
                    size_t comma = value.find(',');
                    if (comma == std::string::npos) lp.fail("range expects <lo,hi>");
                    j.range_lo = detail::parse_num(lp, value.substr(0, comma));
                    j.range_hi = detail::parse_num(lp, value.substr(comma + 1));
                    j.bounded = true;
                } else {
                    lp.fail("unknown joint attribute '" + key + "'");
                }
            }
            if (!have_kind) lp.fail("joint requires kind=");
            if (j.kind == JointKind::Hinge) {
                if (!have_axis) lp.fail("hinge joint requires axis=");
                const double n = j.axis.norm();
                if (std::abs(n - 1.0) > 1e-9)
                    lp.fail("hinge axis must be unit length (norm = " + detail::fmt_double(n) + ")");
            } else if (have_axis) {
                lp.fail("axis= is only valid for hinge joints");
            }
            if (j.kind == JointKind::Free && have_range) lp.fail("free joints cannot have range=");
            if (j.bounded && !(j.range_lo < j.range_hi))
                lp.fail("joint on body '" + toks[1] + "': range requires lo < hi");
            j.dof_offset = m.n_dof;
            m.n_dof += joint_dof(j.kind);
            m.joints.push_back(j);
        } else if (directive == "site") {
            if (toks.size() != 4) lp.fail("site expects: site <name> body=<body> pos=<x,y,z>");
            SiteDef s;
            s.name = toks[1];
            if (site_names.count(s.name)) lp.fail("duplicate site '" + s.name + "'");
            std::string key, value;
            if (!detail::split_kv(toks[2], key, value) || key != "body") lp.fail("expected body=<body>");
            auto it = body_by_name.find(value);
            if (it == body_by_name.end()) lp.fail("site '" + s.name + "' references unknown body '" + value + "'");
            s.body = it->second;
            if (!detail::split_kv(toks[3], key, value) || key != "pos") lp.fail("expected pos=<x,y,z>");
            s.local_pos = detail::parse_vec3(lp, value);
            site_names[s.name] = static_cast<int>(m.sites.size());
            m.sites.push_back(s);
        } else if (directive == "scale") {
            if (toks.size() != 3) lp.fail("scale expects: scale <name> bodies=<b1,b2,...|all>");
            for (const auto& n : m.scale_map.names)
                if (n == toks[1]) lp.fail("duplicate scale '" + toks[1] + "'");
            std::string key, value;
            if (!detail::split_kv(toks[2], key, value) || key != "bodies") lp.fail("expected bodies=<list>");
            m.scale_map.names.push_back(toks[1]);
            scale_bodies.push_back(value == "all" ? std::vector<std::string>{}
                                                  : detail::parse_name_list(value));
            scale_lines.push_back(lp);
        } else if (directive == "constraint") {
            if (toks.size() != 5) lp.fail("constraint expects: constraint <dofA> <dofB> ratio=<r> offset=<o>");
            EqualityConstraint c;
            c.dof_a = static_cast<int>(detail::parse_num(lp, toks[1]));
            c.dof_b = static_cast<int>(detail::parse_num(lp, toks[2]));
            std::string key, value;
            if (!detail::split_kv(toks[3], key, value) || key != "ratio") lp.fail("expected ratio=<r>");
            c.ratio = detail::parse_num(lp, value);
            if (!detail::split_kv(toks[4], key, value) || key != "offset") lp.fail("expected offset=<o>");
            c.offset = detail::parse_num(lp, value);
            if (c.dof_a == c.dof_b) lp.fail("constraint requires two distinct DoF");
            m.constraints.push_back(c);
        } else {
            lp.fail("unknown directive '" + directive + "'");
        }
    }

    if (m.bodies.empty()) throw InputError("model: no bodies declared");
    if (m.n_dof == 0) throw InputError("model: no joints declared");
    for (const auto& c : m.constraints)
        if (c.dof_a < 0 || c.dof_a >= m.n_dof || c.dof_b < 0 || c.dof_b >= m.n_dof)
            throw InputError("model: constraint DoF index out of range (n_dof = " +
                             std::to_string(m.n_dof) + ")");

    // Resolve scale groups. The first declared scale is the overall size and
    // covers every body regardless of its list.
    m.scale_map.n_scales = static_cast<int>(m.scale_map.names.size());
    if (m.scale_map.n_scales == 0) {
        m.scale_map.n_scales = 1;
        m.scale_map.names.push_back("overall");
        scale_bodies.emplace_back();
    }
    m.scale_map.body_params.assign(m.bodies.size(), {0});
    for (size_t s = 1; s < scale_bodies.size(); ++s) {
        for (const auto& bname : scale_bodies[s]) {
            auto it = body_by_name.find(bname);
            if (it == body_by_name.end())
                scale_lines[s].fail("scale '" + m.scale_map.names[s] + "' references unknown body '" + bname + "'");
            m.scale_map.body_params[static_cast<size_t>(it->second)].push_back(static_cast<int>(s));
        }
    }
    return m;
}

// Canonical serialization; parse(serialize(m)) reproduces m exactly.
inline std::string serialize_model(const SkeletonModel& m) {
    std::string out;
    auto v3 = [](const Vec3& v) {
        return detail::fmt_double(v.x) + "," + detail::fmt_double(v.y) + "," + detail::fmt_double(v.z);
    };
    for (const auto& b : m.bodies) {
        out += "body " + b.name + " parent=" +
               (b.parent < 0 ? std::string("none") : m.bodies[static_cast<size_t>(b.parent)].name) +
               " offset=" + v3(b.attach_offset) + "\n";
    }
    for (const auto& j : m.joints) {
        out += "joint " + m.bodies[static_cast<size_t>(j.body)].name + " kind=";
        out += j.kind == JointKind::Free ? "free" : (j.kind == JointKind::Hinge ? "hinge" : "ball");
        if (j.kind == JointKind::Hinge) out += " axis=" + v3(j.axis);
        if (j.bounded)
            out += " range=" + detail::fmt_double(j.range_lo) + "," + detail::fmt_double(j.range_hi);
        out += "\n";
    }
    for (const auto& s : m.sites)
        out += "site " + s.name + " body=" + m.bodies[static_cast<size_t>(s.body)].name +
               " pos=" + v3(s.local_pos) + "\n";
    for (int si = 0; si < m.scale_map.n_scales; ++si) {
        out += "scale " + m.scale_map.names[static_cast<size_t>(si)] + " bodies=";
        if (si == 0) {
            out += "all";
        } else {
            bool first = true;
            for (size_t b = 0; b < m.scale_map.body_params.size(); ++b) {
                for (int p : m.scale_map.body_params[b])
                    if (p == si) {
                        if (!first) out += ",";
                        out += m.bodies[b].name;
                        first = false;
                    }
            }
        }
        out += "\n";
    }
    for (const auto& c : m.constraints)
        out += "constraint " + std::to_string(c.dof_a) + " " + std::to_string(c.dof_b) +
               " ratio=" + detail::fmt_double(c.ratio) + " offset=" + detail::fmt_double(c.offset) + "\n";
    return out;
}

}  // namespace kinefit
