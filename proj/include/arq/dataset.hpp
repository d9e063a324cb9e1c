#pragma once

// Offline transition datasets and their JSON-lines persistence.
//
// File layout: line 1 is a header object, every following line one transition
//   {"s":[...],"a":[...],"r":x,"s2":[...],"done":b,"goal":b}
// Doubles are written in shortest round-trip form, so save -> load -> save is
// byte-identical.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "arq/checkpoint.hpp"
#include "arq/nn.hpp"

namespace arq {

struct Transition {
    Vector s;
    Vector a;
    double r = 0.0;
    Vector s2;
    bool done = false;
    bool goal = false;
};

// Per-dimension affine map of raw actions onto [-1, 1].
struct ActionNormalizer {
    Vector lo;
    Vector hi;

    std::size_t dim() const { return static_cast<std::size_t>(lo.size()); }

    double scale(Eigen::Index d) const {
        const double width = hi[d] - lo[d];
        return width > 1e-12 ? 2.0 / width : 1.0;
    }
    double offset(Eigen::Index d) const {
        const double width = hi[d] - lo[d];
        return width > 1e-12 ? -1.0 - lo[d] * scale(d) : -lo[d];
    }

    Vector normalize(const Vector& a) const {
        Vector out(a.size());
        for (Eigen::Index d = 0; d < a.size(); ++d) out[d] = a[d] * scale(d) + offset(d);
        return out;
    }
    Vector denormalize(const Vector& x) const {
        Vector out(x.size());
        for (Eigen::Index d = 0; d < x.size(); ++d) out[d] = (x[d] - offset(d)) / scale(d);
        return out;
    }
    // log p_raw(a) = log p_normalized(x) + log_jacobian().
    double log_jacobian() const {
        double s = 0.0;
        for (Eigen::Index d = 0; d < lo.size(); ++d) s += std::log(scale(d));
        return s;
    }

    json to_json() const {
        return {{"action_min", std::vector<double>(lo.data(), lo.data() + lo.size())},
                {"action_max", std::vector<double>(hi.data(), hi.data() + hi.size())}};
    }
    static ActionNormalizer from_json(const json& j) {
        const auto lo = j.at("action_min").get<std::vector<double>>();
        const auto hi = j.at("action_max").get<std::vector<double>>();
        if (lo.size() != hi.size()) throw ParseError("action_min/action_max length mismatch");
        ActionNormalizer n;
        n.lo = Eigen::Map<const Vector>(lo.data(), static_cast<Eigen::Index>(lo.size()));
        n.hi = Eigen::Map<const Vector>(hi.data(), static_cast<Eigen::Index>(hi.size()));
        return n;
    }
};

struct DatasetHeader {
    std::size_t state_dim = 0;
    std::size_t action_dim = 0;
    ActionNormalizer bounds;
    std::string env;
    std::uint64_t seed = 0;
};

struct OfflineDataset {
    DatasetHeader header;
    std::vector<Transition> transitions;

    std::size_t size() const { return transitions.size(); }

    // Columns are samples.
    Matrix states() const { return gather([](const Transition& t) -> const Vector& { return t.s; }, header.state_dim); }
    Matrix next_states() const {
        return gather([](const Transition& t) -> const Vector& { return t.s2; }, header.state_dim);
    }
    Matrix normalized_actions() const {
        Matrix m(static_cast<Eigen::Index>(header.action_dim), static_cast<Eigen::Index>(size()));
        for (std::size_t i = 0; i < size(); ++i)
            m.col(static_cast<Eigen::Index>(i)) = header.bounds.normalize(transitions[i].a);
        return m;
    }

private:
    template <class F>
    Matrix gather(F f, std::size_t dim) const {
        Matrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(size()));
        for (std::size_t i = 0; i < size(); ++i) m.col(static_cast<Eigen::Index>(i)) = f(transitions[i]);
        return m;
    }
};

// Bounds taken from the actions themselves.
inline ActionNormalizer fit_action_bounds(const std::vector<Transition>& ts) {
    require(!ts.empty(), "fit_action_bounds: empty transition list");
    ActionNormalizer n;
    n.lo = ts.front().a;
    n.hi = ts.front().a;
    for (const auto& t : ts) {
        n.lo = n.lo.cwiseMin(t.a);
        n.hi = n.hi.cwiseMax(t.a);
    }
    return n;
}

// Row ranges [begin, end) of trajectories. A trajectory ends at a done row or
// where the next row does not start from this row's s2.
inline std::vector<std::pair<std::size_t, std::size_t>> split_trajectories(const OfflineDataset& d) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const bool last = i + 1 == d.size();
        if (last || d.transitions[i].done || d.transitions[i + 1].s != d.transitions[i].s2) {
            out.emplace_back(begin, i + 1);
            begin = i + 1;
        }
    }
    return out;
}

// First row whose s equals `state` exactly.
class StateIndex {
public:
    explicit StateIndex(const OfflineDataset& d) {
        for (std::size_t i = 0; i < d.size(); ++i) index_.emplace(key(d.transitions[i].s), i);
    }
    std::optional<std::size_t> find(const Vector& state) const {
        auto it = index_.find(key(state));
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

private:
    static std::vector<double> key(const Vector& v) { return {v.data(), v.data() + v.size()}; }
    std::map<std::vector<double>, std::size_t> index_;
};

namespace detail {

inline std::vector<double> to_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

inline Vector vector_field(const json& j, const char* key, std::size_t expected, std::size_t line) {
    if (!j.contains(key) || !j.at(key).is_array()) throw ParseError(std::string("missing array '") + key + "'", line);
    const auto& arr = j.at(key);
    if (arr.size() != expected)
        throw ParseError(std::string("'") + key + "' has " + std::to_string(arr.size()) + " entries, header declares " +
                             std::to_string(expected),
                         line);
    Vector v(static_cast<Eigen::Index>(expected));
    for (std::size_t k = 0; k < expected; ++k) {
        if (!arr[k].is_number()) throw ParseError(std::string("non-numeric entry in '") + key + "'", line);
        v[static_cast<Eigen::Index>(k)] = arr[k].get<double>();
    }
    return v;
}

}  // namespace detail

inline std::string transition_to_line(const Transition& t) {
    nlohmann::ordered_json j;
    j["s"] = detail::to_std(t.s);
    j["a"] = detail::to_std(t.a);
    j["r"] = t.r;
    j["s2"] = detail::to_std(t.s2);
    j["done"] = t.done;
    j["goal"] = t.goal;
    return j.dump();
}

inline std::string dataset_to_string(const OfflineDataset& d) {
    nlohmann::ordered_json h;
    h["kind"] = "offline_dataset";
    h["env"] = d.header.env;
    h["seed"] = d.header.seed;
    h["state_dim"] = d.header.state_dim;
    h["action_dim"] = d.header.action_dim;
    h["action_min"] = detail::to_std(d.header.bounds.lo);
    h["action_max"] = detail::to_std(d.header.bounds.hi);
    h["size"] = d.size();
    std::string out = h.dump() + "\n";
    for (const auto& t : d.transitions) out += transition_to_line(t) + "\n";
    return out;
}

inline void save_dataset(const std::filesystem::path& path, const OfflineDataset& d) {
    detail::write_file(path, dataset_to_string(d));
}

inline OfflineDataset parse_dataset(std::istream& in) {
    OfflineDataset d;
    std::string line;
    std::size_t lineno = 0;
    auto parse_line = [&](const std::string& text) {
        try {
            return json::parse(text);
        } catch (const json::exception&) {
            throw ParseError("malformed JSON", lineno);
        }
    };
    if (!std::getline(in, line)) throw ParseError("empty dataset file", 1);
    ++lineno;
    std::size_t declared = 0;
    {
        const json h = parse_line(line);
        try {
            d.header.env = h.at("env").get<std::string>();
            d.header.seed = h.at("seed").get<std::uint64_t>();
            d.header.state_dim = h.at("state_dim").get<std::size_t>();
            d.header.action_dim = h.at("action_dim").get<std::size_t>();
            d.header.bounds = ActionNormalizer::from_json(h);
            declared = h.at("size").get<std::size_t>();
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad header: ") + e.what(), lineno);
        }
        if (d.header.bounds.dim() != d.header.action_dim) throw ParseError("header action bounds length mismatch", 1);
    }
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t row = lineno - 2;
        const json j = parse_line(line);
        if (!j.is_object()) throw ParseError("row " + std::to_string(row) + " is not an object", lineno);
        Transition t;
        try {
            t.s = detail::vector_field(j, "s", d.header.state_dim, lineno);
            t.a = detail::vector_field(j, "a", d.header.action_dim, lineno);
            t.s2 = detail::vector_field(j, "s2", d.header.state_dim, lineno);
            t.r = j.at("r").get<double>();
            t.done = j.at("done").get<bool>();
            t.goal = j.at("goal").get<bool>();
        } catch (const ParseError& e) {
            throw ParseError("row " + std::to_string(row) + ": " + e.what(), lineno);
        } catch (const json::exception& e) {
            throw ParseError("row " + std::to_string(row) + ": " + e.what(), lineno);
        }
        if (!std::isfinite(t.r)) throw ParseError("row " + std::to_string(row) + ": non-finite reward", lineno);
        for (Eigen::Index k = 0; k < t.a.size(); ++k)
            if (t.a[k] < d.header.bounds.lo[k] || t.a[k] > d.header.bounds.hi[k])
                throw ParseError("row " + std::to_string(row) + ": action outside declared bounds", lineno);
        d.transitions.push_back(std::move(t));
    }
    if (d.size() != declared)
        throw ParseError("header declares " + std::to_string(declared) + " rows but file has " +
                             std::to_string(d.size()),
                         lineno + 1);
    return d;
}

inline OfflineDataset load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open dataset '" + path.string() + "'");
    return parse_dataset(in);
}

}  // namespace arq
