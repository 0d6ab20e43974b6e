#pragma once

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace gopher {

// Nonnegative vector summing to 1 within kSumTolerance.
class ProbVector {
public:
    static constexpr double kSumTolerance = 1e-9;

    explicit ProbVector(std::vector<double> values) : values_(std::move(values)) {
        if (values_.empty()) throw std::invalid_argument("ProbVector: empty");
        double sum = 0.0;
        for (double v : values_) {
            if (v < 0.0) throw std::invalid_argument("ProbVector: negative entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > kSumTolerance)
            throw std::invalid_argument("ProbVector: entries must sum to 1");
    }

    static ProbVector uniform(int n) {
        return ProbVector(std::vector<double>(static_cast<std::size_t>(n), 1.0 / n));
    }

    static ProbVector one_hot(int n, int index) {
        std::vector<double> v(static_cast<std::size_t>(n), 0.0);
        v.at(static_cast<std::size_t>(index)) = 1.0;
        return ProbVector(std::move(v));
    }

    // Clamp round-off negatives to zero and rescale so the entries sum to 1.
    // `drift` receives |sum - 1| before rescaling, `clamped` whether any entry
    // was negative.
    static ProbVector renormalized(std::vector<double> raw, double* drift = nullptr,
                                   bool* clamped = nullptr) {
        bool any_clamp = false;
        for (double& v : raw) {
            if (v < 0.0) {
                v = 0.0;
                any_clamp = true;
            }
        }
        const double sum = std::accumulate(raw.begin(), raw.end(), 0.0);
        if (!(sum > 0.0)) throw std::invalid_argument("ProbVector: no positive mass");
        if (drift) *drift = std::abs(sum - 1.0);
        if (clamped) *clamped = any_clamp;
        for (double& v : raw) v /= sum;
        return ProbVector(std::move(raw));
    }

    const std::vector<double>& values() const { return values_; }
    double operator[](std::size_t i) const { return values_[i]; }
    int size() const { return static_cast<int>(values_.size()); }

    friend bool operator==(const ProbVector& a, const ProbVector& b) {
        return a.values_ == b.values_;
    }

private:
    std::vector<double> values_;
};

}  // namespace gopher
