#pragma once

// Event sampling: homogeneous Poisson arrival times on [0, T] with marks
// drawn from the advection ground truth evaluated exactly at each arrival.
// Datasets serialize to JSON lines, one sequence per line, behind a header
// that pins everything needed to regenerate them.

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopher/advection.hpp"
#include "gopher/graph.hpp"
#include "gopher/prob.hpp"
#include "gopher/rng.hpp"

namespace gopher {

struct Event {
    double t = 0.0;
    int node = 0;

    friend bool operator==(const Event& a, const Event& b) { return a.t == b.t && a.node == b.node; }
};

struct EventSequence {
    std::vector<Event> events;  // strictly increasing timestamps
    double horizon_T = 0.0;

    void validate(int num_nodes) const {
        if (!(horizon_T > 0.0)) throw std::invalid_argument("EventSequence: horizon must be positive");
        for (std::size_t i = 0; i < events.size(); ++i) {
            if (events[i].t <= 0.0 || events[i].t >= horizon_T)
                throw std::invalid_argument("EventSequence: timestamp outside (0, T)");
            if (i > 0 && events[i].t <= events[i - 1].t)
                throw std::invalid_argument("EventSequence: timestamps must strictly increase");
            if (events[i].node < 0 || events[i].node >= num_nodes)
                throw std::invalid_argument("EventSequence: node id out of range");
        }
    }

    friend bool operator==(const EventSequence& a, const EventSequence& b) {
        return a.events == b.events && a.horizon_T == b.horizon_T;
    }
};

inline std::vector<double> sample_poisson_times(double lambda, double horizon, Rng& rng) {
    if (!(lambda > 0.0)) throw std::invalid_argument("sample_poisson_times: lambda must be > 0");
    if (!(horizon > 0.0)) throw std::invalid_argument("sample_poisson_times: horizon must be > 0");
    std::vector<double> times;
    double t = 0.0;
    for (;;) {
        double gap = rng.exponential(lambda);
        while (gap == 0.0) gap = rng.exponential(lambda);  // keep timestamps strictly increasing
        t += gap;
        if (t >= horizon) break;
        times.push_back(t);
    }
    return times;
}

// One categorical draw from p(t_i) per event time; `times` must be sorted.
inline std::vector<int> sample_marks(const AdvectionSolution& sol, std::span<const double> times,
                                     Rng& rng) {
    const std::vector<ProbVector> probs = sol.at(times);
    std::vector<int> marks;
    marks.reserve(times.size());
    for (const ProbVector& p : probs)
        marks.push_back(static_cast<int>(rng.categorical(p.values())));
    return marks;
}

struct DatasetBundle {
    WeightedDigraph graph;
    ProbVector p0;
    double lambda = 0.0;
    double horizon_T = 0.0;
    std::vector<EventSequence> sequences;
    std::uint64_t seed = 0;

    std::size_t total_events() const {
        std::size_t n = 0;
        for (const auto& s : sequences) n += s.events.size();
        return n;
    }
};

// Sequences are generated from independent per-index streams, so the bundle
// is reproducible from (graph, p0, lambda, T, seed) alone.
inline DatasetBundle generate_dataset(const WeightedDigraph& graph, const ProbVector& p0,
                                      double lambda, double horizon, int num_sequences,
                                      std::uint64_t seed,
                                      AdvectionMethod method = AdvectionMethod::kFixedStepRk4,
                                      double step_size = 1e-3) {
    if (num_sequences < 0) throw std::invalid_argument("generate_dataset: negative sequence count");
    AdvectionSolution sol(graph, p0, method, step_size);
    DatasetBundle bundle{graph, p0, lambda, horizon, {}, seed};
    bundle.sequences.reserve(static_cast<std::size_t>(num_sequences));
    for (int k = 0; k < num_sequences; ++k) {
        Rng rng(derive_stream(seed, static_cast<std::uint64_t>(k)));
        const std::vector<double> times = sample_poisson_times(lambda, horizon, rng);
        const std::vector<int> marks = sample_marks(sol, times, rng);
        EventSequence seq{{}, horizon};
        seq.events.reserve(times.size());
        for (std::size_t i = 0; i < times.size(); ++i) seq.events.push_back({times[i], marks[i]});
        seq.validate(graph.num_nodes());
        bundle.sequences.push_back(std::move(seq));
    }
    return bundle;
}

// JSON-lines serialization. The header line references the graph by file
// path; doubles print as shortest round-trip decimals.
inline std::string dataset_to_jsonl(const DatasetBundle& bundle, const std::string& graph_path) {
    std::ostringstream out;
    nlohmann::json header{{"graph", graph_path},
                          {"lambda", bundle.lambda},
                          {"T", bundle.horizon_T},
                          {"seed", bundle.seed},
                          {"p0", bundle.p0.values()},
                          {"num_sequences", bundle.sequences.size()}};
    out << header.dump() << '\n';
    for (std::size_t k = 0; k < bundle.sequences.size(); ++k) {
        nlohmann::json line{{"seq", k}, {"events", nlohmann::json::array()}};
        for (const Event& e : bundle.sequences[k].events) line["events"].push_back({e.t, e.node});
        out << line.dump() << '\n';
    }
    return out.str();
}

inline void save_dataset(const DatasetBundle& bundle, const std::string& dataset_path,
                         const std::string& graph_path) {
    save_graph(bundle.graph, graph_path);
    std::ofstream out(dataset_path);
    if (!out) throw std::runtime_error("save_dataset: cannot open " + dataset_path);
    // Reference the graph relative to the dataset file when possible.
    const auto rel = std::filesystem::relative(graph_path, std::filesystem::path(dataset_path).parent_path());
    out << dataset_to_jsonl(bundle, rel.empty() ? graph_path : rel.string());
}

inline DatasetBundle load_dataset(const std::string& dataset_path) {
    std::ifstream in(dataset_path);
    if (!in) throw std::runtime_error("load_dataset: cannot open " + dataset_path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_dataset: empty file");
    const nlohmann::json header = nlohmann::json::parse(line);
    std::filesystem::path graph_path = header.at("graph").get<std::string>();
    if (graph_path.is_relative())
        graph_path = std::filesystem::path(dataset_path).parent_path() / graph_path;
    WeightedDigraph graph = load_graph(graph_path.string());
    ProbVector p0(header.at("p0").get<std::vector<double>>());
    DatasetBundle bundle{std::move(graph), std::move(p0), header.at("lambda").get<double>(),
                         header.at("T").get<double>(), {}, header.at("seed").get<std::uint64_t>()};
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        EventSequence seq{{}, bundle.horizon_T};
        for (const auto& e : j.at("events"))
            seq.events.push_back({e.at(0).get<double>(), e.at(1).get<int>()});
        seq.validate(bundle.graph.num_nodes());
        bundle.sequences.push_back(std::move(seq));
    }
    if (bundle.sequences.size() != header.at("num_sequences").get<std::size_t>())
        throw std::runtime_error("load_dataset: sequence count disagrees with header");
    return bundle;
}

}  // namespace gopher
