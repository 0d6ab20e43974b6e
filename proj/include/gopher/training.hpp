#pragma once

// Maximum-likelihood training. The optimized scalar is the mean per-event
// negative log-likelihood of a batch of sequences; the optimizer is Adam
// with decoupled weight decay. Everything is deterministic under the config
// seed: shuffling uses its own derived stream per epoch and gradients are
// reduced in a fixed order.

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "gopher/autodiff.hpp"
#include "gopher/errors.hpp"
#include "gopher/models.hpp"
#include "gopher/rng.hpp"
#include "gopher/tpp.hpp"

namespace gopher {

struct TrainConfig {
    double learning_rate = 0.01;
    int batch_size = 64;
    int epochs = 30;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const {
        if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
        if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    }
};

// Mean per-event negative log-likelihood of a batch. All event times of the
// batch are merged into one sorted query list, so the ODE-backed model runs a
// single integration pass; readouts branch off the shared grid per event and
// are therefore identical whether sequences are queried jointly or one by one.
inline Var nll(const Model& model, Tape& tape, Binding& binding, const WeightedDigraph& g,
               std::span<const EventSequence> batch) {
    if (batch.empty()) throw std::invalid_argument("nll: empty batch");
    std::size_t total = 0;
    for (const auto& seq : batch) total += seq.events.size();
    if (total == 0) throw std::invalid_argument("nll: batch has no events");

    std::vector<Event> merged;
    merged.reserve(total);
    for (const auto& seq : batch)
        merged.insert(merged.end(), seq.events.begin(), seq.events.end());
    std::stable_sort(merged.begin(), merged.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });

    const double horizon = model.config().horizon;
    std::vector<double> times(merged.size());
    std::vector<int> nodes(merged.size());
    for (std::size_t i = 0; i < merged.size(); ++i) {
        if (horizon > 0.0 && merged[i].t > horizon)
            throw std::invalid_argument("nll: event time beyond model horizon");
        times[i] = merged[i].t;
        nodes[i] = merged[i].node;
    }

    Var log_rows = model.readout_rows(tape, binding, g, times, /*log_probs=*/true);
    Var picked = pick(log_rows, std::move(nodes));
    return scale(sum_all(picked), -1.0 / static_cast<double>(total));
}

inline double nll_value(const Model& model, const WeightedDigraph& g,
                        std::span<const EventSequence> batch) {
    Tape tape;
    Binding binding(tape, model.params(), /*needs_grad=*/false);
    return tape.value(nll(model, tape, binding, g, batch)).values()[0];
}

// Adam with decoupled weight decay: the decay shrinks parameters directly
// instead of entering the gradient moments.
class AdamW {
public:
    explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

    void step(ParamStore& params) {
        ++t_;
        const double bias1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bias2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (auto& [name, entry] : params) {
            Moments& m = state_.try_emplace(name, Moments{Array(entry.value.rows(), entry.value.cols()),
                                                          Array(entry.value.rows(), entry.value.cols())})
                             .first->second;
            auto& value = entry.value.values();
            const auto& grad = entry.grad.values();
            auto& m1 = m.first_.values();
            auto& m2 = m.second_.values();
            for (std::size_t i = 0; i < value.size(); ++i) {
                m1[i] = cfg_.beta1 * m1[i] + (1.0 - cfg_.beta1) * grad[i];
                m2[i] = cfg_.beta2 * m2[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
                const double mhat = m1[i] / bias1;
                const double vhat = m2[i] / bias2;
                value[i] -= cfg_.learning_rate * (mhat / (std::sqrt(vhat) + cfg_.epsilon) +
                                                  cfg_.weight_decay * value[i]);
            }
        }
    }

    long steps_taken() const { return t_; }

private:
    struct Moments {
        Array first_;
        Array second_;
    };

    TrainConfig cfg_;
    std::map<std::string, Moments> state_;
    long t_ = 0;
};

struct StepRecord {
    int step = 0;
    int epoch = 0;
    double nll = 0.0;
};

inline std::vector<StepRecord> train(Model& model, const DatasetBundle& data,
                                     const TrainConfig& cfg) {
    cfg.validate();
    AdamW optimizer(cfg);
    std::vector<StepRecord> history;
    const int num_sequences = static_cast<int>(data.sequences.size());
    std::vector<int> order(static_cast<std::size_t>(num_sequences));
    int step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (int i = 0; i < num_sequences; ++i) order[static_cast<std::size_t>(i)] = i;
        Rng shuffle_rng(derive_stream(cfg.seed, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);
        for (int begin = 0; begin < num_sequences; begin += cfg.batch_size) {
            const int end = std::min(num_sequences, begin + cfg.batch_size);
            std::vector<EventSequence> batch;
            batch.reserve(static_cast<std::size_t>(end - begin));
            std::size_t events = 0;
            for (int i = begin; i < end; ++i) {
                batch.push_back(data.sequences[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
                events += batch.back().events.size();
            }
            if (events == 0) continue;  // nothing to fit in this batch

            Tape tape;
            Binding binding(tape, model.params(), /*needs_grad=*/true);
            Var loss = nll(model, tape, binding, data.graph, batch);
            const double loss_value = tape.value(loss).values()[0];
            if (!std::isfinite(loss_value))
                throw DivergenceError("train: non-finite loss at step " + std::to_string(step));
            model.params().zero_grads();
            backward(loss, binding, model.params());
            optimizer.step(model.params());
            history.push_back({step, epoch, loss_value});
            ++step;
        }
    }
    return history;
}

// Central finite differences on `num_samples` randomly chosen parameter
// entries against the recorded analytic gradient; returns the worst relative
// error. Used as a spot check in test mode.
inline double spot_check_gradients(Model& model, const WeightedDigraph& g,
                                   std::span<const EventSequence> batch, int num_samples,
                                   Rng& rng, double step = 1e-5) {
    model.params().zero_grads();
    {
        Tape tape;
        Binding binding(tape, model.params(), /*needs_grad=*/true);
        Var loss = nll(model, tape, binding, g, batch);
        backward(loss, binding, model.params());
    }
    std::vector<std::pair<std::string, std::size_t>> coords;
    for (const auto& [name, entry] : model.params())
        for (std::size_t i = 0; i < entry.value.size(); ++i) coords.emplace_back(name, i);
    double worst = 0.0;
    for (int s = 0; s < num_samples; ++s) {
        const auto& [name, index] = coords[static_cast<std::size_t>(rng.below(coords.size()))];
        auto& slot = model.params().at(name).value.values()[index];
        const double saved = slot;
        slot = saved + step;
        const double above = nll_value(model, g, batch);
        slot = saved - step;
        const double below = nll_value(model, g, batch);
        slot = saved;
        const double numeric = (above - below) / (2.0 * step);
        const double analytic = model.params().at(name).grad.values()[index];
        const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
    return worst;
}

}  // namespace gopher
