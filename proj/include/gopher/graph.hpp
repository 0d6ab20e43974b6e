#pragma once

// Weighted directed graphs: validation, the two synthetic families used for
// dataset generation, the out-degree Laplacian, and JSON (de)serialization.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopher/rng.hpp"

namespace gopher {

struct Edge {
    int src = 0;
    int dst = 0;
    double weight = 0.0;

    friend bool operator==(const Edge& a, const Edge& b) {
        return a.src == b.src && a.dst == b.dst && a.weight == b.weight;
    }
};

class WeightedDigraph {
public:
    WeightedDigraph(int num_nodes, std::vector<Edge> edges,
                    std::optional<std::vector<std::vector<double>>> node_attrs = std::nullopt,
                    std::optional<std::vector<std::array<double, 2>>> node_coords = std::nullopt,
                    std::optional<std::uint64_t> seed = std::nullopt)
        : num_nodes_(num_nodes),
          edges_(std::move(edges)),
          node_attrs_(std::move(node_attrs)),
          node_coords_(std::move(node_coords)),
          seed_(seed) {
        validate();
        std::sort(edges_.begin(), edges_.end(), [](const Edge& a, const Edge& b) {
            return a.src != b.src ? a.src < b.src : a.dst < b.dst;
        });
        in_edges_.assign(static_cast<std::size_t>(num_nodes_), {});
        for (const Edge& e : edges_) {
            in_edges_[static_cast<std::size_t>(e.dst)].push_back({e.src, e.weight});
        }
        // Sorted-by-edge-list order above already makes each in-list ordered by source id.
    }

    int num_nodes() const { return num_nodes_; }
    const std::vector<Edge>& edges() const { return edges_; }
    const std::optional<std::vector<std::vector<double>>>& node_attrs() const { return node_attrs_; }
    const std::optional<std::vector<std::array<double, 2>>>& node_coords() const { return node_coords_; }
    std::optional<std::uint64_t> seed() const { return seed_; }

    // In-edges of node v as (source, weight), ordered by source id.
    const std::vector<std::pair<int, double>>& in_edges(int v) const {
        return in_edges_[static_cast<std::size_t>(v)];
    }

    Eigen::MatrixXd adjacency() const {
        Eigen::MatrixXd a = Eigen::MatrixXd::Zero(num_nodes_, num_nodes_);
        for (const Edge& e : edges_) a(e.src, e.dst) = e.weight;
        return a;
    }

    bool weakly_connected() const {
        if (num_nodes_ == 0) return false;
        std::vector<std::vector<int>> und(static_cast<std::size_t>(num_nodes_));
        for (const Edge& e : edges_) {
            und[static_cast<std::size_t>(e.src)].push_back(e.dst);
            und[static_cast<std::size_t>(e.dst)].push_back(e.src);
        }
        std::vector<char> seen(static_cast<std::size_t>(num_nodes_), 0);
        std::vector<int> stack{0};
        seen[0] = 1;
        int count = 1;
        while (!stack.empty()) {
            const int v = stack.back();
            stack.pop_back();
            for (int u : und[static_cast<std::size_t>(v)]) {
                if (!seen[static_cast<std::size_t>(u)]) {
                    seen[static_cast<std::size_t>(u)] = 1;
                    ++count;
                    stack.push_back(u);
                }
            }
        }
        return count == num_nodes_;
    }

    friend bool operator==(const WeightedDigraph& a, const WeightedDigraph& b) {
        return a.num_nodes_ == b.num_nodes_ && a.edges_ == b.edges_ &&
               a.node_attrs_ == b.node_attrs_ && a.node_coords_ == b.node_coords_;
    }

private:
    void validate() const {
        if (num_nodes_ <= 0) throw std::invalid_argument("graph: num_nodes must be positive");
        std::vector<std::pair<int, int>> keys;
        keys.reserve(edges_.size());
        for (const Edge& e : edges_) {
            if (e.src < 0 || e.src >= num_nodes_ || e.dst < 0 || e.dst >= num_nodes_)
                throw std::invalid_argument("graph: edge endpoint out of range");
            if (e.src == e.dst) throw std::invalid_argument("graph: self-loops are not allowed");
            if (!(e.weight > 0.0)) throw std::invalid_argument("graph: edge weights must be strictly positive");
            keys.emplace_back(e.src, e.dst);
        }
        std::sort(keys.begin(), keys.end());
        if (std::adjacent_find(keys.begin(), keys.end()) != keys.end())
            throw std::invalid_argument("graph: duplicate (src, dst) edge");
        if (node_attrs_) {
            if (static_cast<int>(node_attrs_->size()) != num_nodes_)
                throw std::invalid_argument("graph: node_attrs size mismatch");
            for (const auto& a : *node_attrs_)
                if (a.size() != node_attrs_->front().size())
                    throw std::invalid_argument("graph: node attribute dimensions must be uniform");
        }
        if (node_coords_ && static_cast<int>(node_coords_->size()) != num_nodes_)
            throw std::invalid_argument("graph: node_coords size mismatch");
    }

    int num_nodes_;
    std::vector<Edge> edges_;
    std::optional<std::vector<std::vector<double>>> node_attrs_;
    std::optional<std::vector<std::array<double, 2>>> node_coords_;
    std::optional<std::uint64_t> seed_;
    std::vector<std::vector<std::pair<int, double>>> in_edges_;
};

// L_out = D_out - A with D_out[i][i] = sum_j A[i][j]; every row sums to zero.
inline Eigen::MatrixXd out_degree_laplacian(const WeightedDigraph& g) {
    Eigen::MatrixXd a = g.adjacency();
    Eigen::MatrixXd l = -a;
    for (int i = 0; i < g.num_nodes(); ++i) l(i, i) += a.row(i).sum();
    return l;
}

// Cycle 0 -> 1 -> ... -> n-1 -> 0 with weight ccw_weight, plus the reversed
// cycle with cw_weight when cw_weight > 0. ccw must strictly dominate so the
// transport has a preferred direction.
inline WeightedDigraph ring_graph(int n, double ccw_weight = 2.0, double cw_weight = 0.5) {
    if (n < 3) throw std::invalid_argument("ring_graph: n must be >= 3");
    if (!(ccw_weight > 0.0) || cw_weight < 0.0 || ccw_weight <= cw_weight)
        throw std::invalid_argument("ring_graph: require ccw_weight > cw_weight >= 0");
    std::vector<Edge> edges;
    edges.reserve(static_cast<std::size_t>(cw_weight > 0.0 ? 2 * n : n));
    for (int i = 0; i < n; ++i) edges.push_back({i, (i + 1) % n, ccw_weight});
    if (cw_weight > 0.0)
        for (int i = 0; i < n; ++i) edges.push_back({i, (i + n - 1) % n, cw_weight});
    return WeightedDigraph(n, std::move(edges));
}

// Uniform points in the unit square; every pair within `radius` gets a
// directed edge each way with an independent U[weight_low, weight_high]
// weight. Positions are re-drawn with successive seeds until the graph is
// weakly connected; the seed actually used is recorded on the graph.
inline WeightedDigraph random_geometric_graph(int n, double radius, double weight_low,
                                              double weight_high, std::uint64_t seed) {
    if (n <= 0) throw std::invalid_argument("random_geometric_graph: n must be positive");
    if (!(radius > 0.0) || !(radius < 1.0))
        throw std::invalid_argument("random_geometric_graph: radius must lie in (0, 1)");
    if (!(weight_low > 0.0) || weight_low > weight_high)
        throw std::invalid_argument("random_geometric_graph: require 0 < weight_low <= weight_high");

    constexpr int kMaxRedraws = 100;
    for (int attempt = 0; attempt < kMaxRedraws; ++attempt) {
        const std::uint64_t used = seed + static_cast<std::uint64_t>(attempt);
        Rng rng(derive_stream(used, 0));
        std::vector<std::array<double, 2>> coords(static_cast<std::size_t>(n));
        for (auto& c : coords) {
            c[0] = rng.uniform();
            c[1] = rng.uniform();
        }
        std::vector<Edge> edges;
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                const double dx = coords[i][0] - coords[j][0];
                const double dy = coords[i][1] - coords[j][1];
                if (std::hypot(dx, dy) <= radius) {
                    edges.push_back({i, j, rng.uniform(weight_low, weight_high)});
                    edges.push_back({j, i, rng.uniform(weight_low, weight_high)});
                }
            }
        }
        WeightedDigraph g(n, std::move(edges), std::nullopt, std::move(coords), used);
        if (g.weakly_connected()) return g;
    }
    throw std::runtime_error("random_geometric_graph: no weakly connected draw in 100 attempts");
}

// Copy retaining only the edges for which `drop` returns false.
template <class Pred>
WeightedDigraph delete_edges(const WeightedDigraph& g, Pred drop) {
    std::vector<Edge> kept;
    for (const Edge& e : g.edges())
        if (!drop(e)) kept.push_back(e);
    return WeightedDigraph(g.num_nodes(), std::move(kept), g.node_attrs(), g.node_coords(), g.seed());
}

inline nlohmann::json graph_to_json(const WeightedDigraph& g) {
    nlohmann::json j;
    j["num_nodes"] = g.num_nodes();
    auto& edges = j["edges"] = nlohmann::json::array();
    for (const Edge& e : g.edges()) edges.push_back({e.src, e.dst, e.weight});
    if (g.node_attrs()) j["node_attrs"] = *g.node_attrs();
    if (g.node_coords()) {
        auto& coords = j["node_coords"] = nlohmann::json::array();
        for (const auto& c : *g.node_coords()) coords.push_back({c[0], c[1]});
    }
    if (g.seed()) j["seed"] = *g.seed();
    return j;
}

inline WeightedDigraph graph_from_json(const nlohmann::json& j) {
    std::vector<Edge> edges;
    for (const auto& e : j.at("edges"))
        edges.push_back({e.at(0).get<int>(), e.at(1).get<int>(), e.at(2).get<double>()});
    std::optional<std::vector<std::vector<double>>> attrs;
    if (j.contains("node_attrs")) attrs = j.at("node_attrs").get<std::vector<std::vector<double>>>();
    std::optional<std::vector<std::array<double, 2>>> coords;
    if (j.contains("node_coords")) {
        coords.emplace();
        for (const auto& c : j.at("node_coords"))
            coords->push_back({c.at(0).get<double>(), c.at(1).get<double>()});
    }
    std::optional<std::uint64_t> seed;
    if (j.contains("seed")) seed = j.at("seed").get<std::uint64_t>();
    return WeightedDigraph(j.at("num_nodes").get<int>(), std::move(edges), std::move(attrs),
                           std::move(coords), seed);
}

inline void save_graph(const WeightedDigraph& g, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("save_graph: cannot open " + path);
    out << graph_to_json(g).dump(2) << '\n';
}

inline WeightedDigraph load_graph(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("load_graph: cannot open " + path);
    nlohmann::json j;
    in >> j;
    return graph_from_json(j);
}

}  // namespace gopher
