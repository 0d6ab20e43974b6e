#pragma once

// Ground-truth probability dynamics on a weighted digraph:
//   dp/dt = -L_out(A)^T p
// Mass at a node drains along its out-edges in proportion to the edge
// weights, so 1^T dp/dt = 0 and total probability is conserved. Two
// interchangeable solvers are provided: fixed-step RK4 and a closed form via
// the dense matrix exponential, each usable as an oracle for the other.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopher/graph.hpp"
#include "gopher/prob.hpp"

namespace gopher {

inline Eigen::VectorXd to_eigen(const ProbVector& p) {
    return Eigen::Map<const Eigen::VectorXd>(p.values().data(),
                                             static_cast<Eigen::Index>(p.values().size()));
}

// -L_out^T p. Entries sum to zero up to round-off.
inline Eigen::VectorXd advection_derivative(const WeightedDigraph& g, const Eigen::VectorXd& p) {
    if (p.size() != g.num_nodes())
        throw std::invalid_argument("advection_derivative: dimension mismatch");
    Eigen::VectorXd d = Eigen::VectorXd::Zero(p.size());
    for (const Edge& e : g.edges()) {
        const double flow = e.weight * p[e.src];
        d[e.dst] += flow;
        d[e.src] -= flow;
    }
    return d;
}

inline std::vector<double> advection_derivative(const WeightedDigraph& g, const ProbVector& p) {
    Eigen::VectorXd d = advection_derivative(g, to_eigen(p));
    return {d.data(), d.data() + d.size()};
}

enum class AdvectionMethod { kFixedStepRk4, kClosedForm };

struct AdvectionStats {
    long clamp_events = 0;   // negative round-off entries clamped to zero
    double max_drift = 0.0;  // worst |sum(p) - 1| seen before renormalization
};

class AdvectionSolution {
public:
    AdvectionSolution(WeightedDigraph graph, ProbVector p0,
                      AdvectionMethod method = AdvectionMethod::kFixedStepRk4,
                      double step_size = 1e-3)
        : graph_(std::move(graph)),
          p0_(std::move(p0)),
          method_(method),
          step_size_(step_size),
          neg_transposed_laplacian_(-out_degree_laplacian(graph_).transpose()) {
        if (p0_.size() != graph_.num_nodes())
            throw std::invalid_argument("AdvectionSolution: p0 dimension mismatch");
        if (method_ == AdvectionMethod::kFixedStepRk4 && !(step_size_ > 0.0))
            throw std::invalid_argument("AdvectionSolution: step_size must be > 0");
    }

    const WeightedDigraph& graph() const { return graph_; }
    const ProbVector& p0() const { return p0_; }
    AdvectionMethod method() const { return method_; }
    const AdvectionStats& stats() const { return stats_; }

    // Evaluate at a nondecreasing grid of times >= 0. Each returned vector is
    // clamped and renormalized; the pre-renormalization drift is tracked in
    // stats().
    std::vector<ProbVector> at(std::span<const double> times) const {
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (times[i] < 0.0) throw std::invalid_argument("AdvectionSolution: negative time");
            if (i > 0 && times[i] < times[i - 1])
                throw std::invalid_argument("AdvectionSolution: times must be nondecreasing");
        }
        std::vector<ProbVector> out;
        out.reserve(times.size());
        if (method_ == AdvectionMethod::kClosedForm) {
            for (double t : times) out.push_back(finalize(closed_form(t)));
        } else {
            Eigen::VectorXd p = to_eigen(p0_);
            double cur = 0.0;
            for (double t : times) {
                integrate_to(p, cur, t);
                out.push_back(finalize(p));
            }
        }
        return out;
    }

    ProbVector at(double t) const {
        const double times[1] = {t};
        return at(std::span<const double>(times)).front();
    }

private:
    Eigen::VectorXd closed_form(double t) const {
        if (t == 0.0) return to_eigen(p0_);
        Eigen::MatrixXd propagator = (neg_transposed_laplacian_ * t).exp();
        return propagator * to_eigen(p0_);
    }

    void integrate_to(Eigen::VectorXd& p, double& cur, double target) const {
        while (cur < target) {
            const double h = std::min(step_size_, target - cur);
            rk4_step(p, h);
            cur += h;
        }
    }

    void rk4_step(Eigen::VectorXd& p, double h) const {
        const Eigen::MatrixXd& m = neg_transposed_laplacian_;
        const Eigen::VectorXd k1 = m * p;
        const Eigen::VectorXd k2 = m * (p + 0.5 * h * k1);
        const Eigen::VectorXd k3 = m * (p + 0.5 * h * k2);
        const Eigen::VectorXd k4 = m * (p + h * k3);
        p += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }

    ProbVector finalize(const Eigen::VectorXd& p) const {
        std::vector<double> v(p.data(), p.data() + p.size());
        double drift = 0.0;
        bool clamped = false;
        ProbVector out = ProbVector::renormalized(std::move(v), &drift, &clamped);
        stats_.max_drift = std::max(stats_.max_drift, drift);
        if (clamped) ++stats_.clamp_events;
        return out;
    }

    WeightedDigraph graph_;
    ProbVector p0_;
    AdvectionMethod method_;
    double step_size_;
    Eigen::MatrixXd neg_transposed_laplacian_;
    mutable AdvectionStats stats_;
};

inline AdvectionSolution solve_advection(const WeightedDigraph& g, const ProbVector& p0,
                                         AdvectionMethod method = AdvectionMethod::kFixedStepRk4,
                                         double step_size = 1e-3) {
    return AdvectionSolution(g, p0, method, step_size);
}

inline std::vector<ProbVector> evaluate_trajectory(const AdvectionSolution& sol,
                                                   std::span<const double> grid) {
    return sol.at(grid);
}

// Stationary distribution: the nonnegative unit-sum null vector of L_out^T,
// unique for weakly connected graphs.
inline ProbVector stationary_distribution(const WeightedDigraph& g) {
    Eigen::MatrixXd m = out_degree_laplacian(g).transpose();
    Eigen::EigenSolver<Eigen::MatrixXd> solver(m);
    int best = 0;
    for (int i = 1; i < m.rows(); ++i)
        if (std::abs(solver.eigenvalues()[i]) < std::abs(solver.eigenvalues()[best])) best = i;
    Eigen::VectorXd v = solver.eigenvectors().col(best).real();
    if (v.sum() < 0.0) v = -v;
    return ProbVector::renormalized({v.data(), v.data() + v.size()});
}

inline void write_trajectory_csv(const std::string& path, std::span<const double> grid,
                                 std::span<const ProbVector> trajectory) {
    if (grid.size() != trajectory.size())
        throw std::invalid_argument("write_trajectory_csv: grid/trajectory size mismatch");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_trajectory_csv: cannot open " + path);
    out.precision(17);
    out << 't';
    if (!trajectory.empty())
        for (int v = 0; v < trajectory.front().size(); ++v) out << ",p_" << v;
    out << '\n';
    for (std::size_t i = 0; i < grid.size(); ++i) {
        out << grid[i];
        for (double p : trajectory[i].values()) out << ',' << p;
        out << '\n';
    }
}

}  // namespace gopher
