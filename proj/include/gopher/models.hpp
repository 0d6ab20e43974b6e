#pragma once

// The three categorical forecasters. All share a two-layer projection MLP
// applied per node followed by a softmax across nodes:
//   * GopherModel   — node embeddings evolved by a learned ODE whose right
//                     hand side is one GIN layer on [Z | t];
//   * NaiveGnnModel — the same GIN applied directly to [embedding | t];
//   * NaiveMlpModel — a plain MLP on [embedding | t], blind to the graph.
//
// Readouts are computed for a whole sorted batch of query times at once. The
// ODE model integrates a single fixed main grid and reaches each query time
// with one extra partial step branched off the grid node below it, so the
// value at a query time never depends on what other queries are in flight.

#include <json.hpp>

#include <cmath>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gopher/autodiff.hpp"
#include "gopher/graph.hpp"
#include "gopher/prob.hpp"
#include "gopher/rng.hpp"

namespace gopher {

struct ModelConfig {
    std::string kind;                  // "gopher" | "naive_gnn" | "naive_mlp"
    int num_nodes = 0;
    int embed_dim = 64;
    int hidden_dim = 64;
    int augmented_dims = 16;           // trailing zero-initialized state dims (attribute path)
    int ode_steps_per_unit_time = 40;  // gopher only
    int attr_dim = 0;                  // > 0 enables the attribute encoder (gopher only)
    double horizon = 0.0;              // latest event time the likelihood accepts
    std::uint64_t init_seed = 0;

    nlohmann::json to_json() const {
        return {{"kind", kind},
                {"num_nodes", num_nodes},
                {"embed_dim", embed_dim},
                {"hidden_dim", hidden_dim},
                {"augmented_dims", augmented_dims},
                {"ode_steps_per_unit_time", ode_steps_per_unit_time},
                {"attr_dim", attr_dim},
                {"horizon", horizon},
                {"init_seed", init_seed}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.kind = j.at("kind").get<std::string>();
        c.num_nodes = j.at("num_nodes").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.hidden_dim = j.at("hidden_dim").get<int>();
        c.augmented_dims = j.at("augmented_dims").get<int>();
        c.ode_steps_per_unit_time = j.at("ode_steps_per_unit_time").get<int>();
        c.attr_dim = j.at("attr_dim").get<int>();
        c.horizon = j.at("horizon").get<double>();
        c.init_seed = j.at("init_seed").get<std::uint64_t>();
        return c;
    }
};

namespace detail {

inline void init_mlp(ParamStore& store, const std::string& prefix, int in, int hidden, int out,
                     Rng& rng) {
    auto weights = [&rng](int r, int c) {
        Array a(r, c);
        const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
        for (double& v : a.values()) v = rng.normal(0.0, stddev);
        return a;
    };
    store.add(prefix + ".w1", weights(in, hidden));
    store.add(prefix + ".b1", Array(1, hidden));
    store.add(prefix + ".w2", weights(hidden, out));
    store.add(prefix + ".b2", Array(1, out));
}

inline void check_sorted_times(std::span<const double> times, const char* who) {
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] < 0.0) throw std::invalid_argument(std::string(who) + ": negative query time");
        if (i > 0 && times[i] < times[i - 1])
            throw std::invalid_argument(std::string(who) + ": query times must be sorted");
    }
}

// One per-block time value expanded to one entry per stacked row.
inline std::vector<double> per_block_column(std::span<const double> block_values, int block_rows) {
    std::vector<double> col;
    col.reserve(block_values.size() * static_cast<std::size_t>(block_rows));
    for (double v : block_values) col.insert(col.end(), static_cast<std::size_t>(block_rows), v);
    return col;
}

}  // namespace detail

// Two affine layers with a Swish between.
inline Var mlp2(Binding& b, const std::string& prefix, Var x) {
    Var h = swish(affine(x, b[prefix + ".w1"], b[prefix + ".b1"]));
    return affine(h, b[prefix + ".w2"], b[prefix + ".b2"]);
}

// GIN layer: weighted in-neighbor aggregation followed by a shared MLP.
struct GinLayer {
    std::string prefix;
    double epsilon = 0.0;  // fixed, not learned

    Var forward(Binding& b, Var x, const WeightedDigraph& g, int blocks = 1) const {
        return mlp2(b, prefix, gin_aggregate(x, g, blocks, epsilon));
    }
};

inline Var gin_forward(const GinLayer& layer, Binding& b, Var z, const WeightedDigraph& g) {
    return layer.forward(b, z, g, 1);
}

class Model : public std::enable_shared_from_this<Model> {
public:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
        if (cfg_.num_nodes <= 0) throw std::invalid_argument("Model: num_nodes must be positive");
        if (cfg_.embed_dim <= 0 || cfg_.hidden_dim <= 0)
            throw std::invalid_argument("Model: dimensions must be positive");
    }
    virtual ~Model() = default;

    const ModelConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    std::string name() const { return cfg_.kind; }

    // [num_queries, num_nodes] rows of probabilities (or log-probabilities)
    // at the given sorted query times, recorded on the tape.
    virtual Var readout_rows(Tape& tape, Binding& binding, const WeightedDigraph& g,
                             std::span<const double> times, bool log_probs) const = 0;

    // Gradient-free evaluation.
    std::vector<ProbVector> forecast(const WeightedDigraph& g, std::span<const double> times) const {
        if (times.empty()) return {};
        Tape tape;
        Binding binding(tape, params_, /*needs_grad=*/false);
        Var rows = readout_rows(tape, binding, g, times, /*log_probs=*/false);
        const Array& v = tape.value(rows);
        std::vector<ProbVector> out;
        out.reserve(times.size());
        for (int r = 0; r < v.rows(); ++r) {
            std::vector<double> row(v.data() + static_cast<std::size_t>(r) * v.cols(),
                                    v.data() + static_cast<std::size_t>(r + 1) * v.cols());
            out.emplace_back(std::move(row));
        }
        return out;
    }

    nlohmann::json to_checkpoint() const {
        return {{"version", 1}, {"arch", cfg_.to_json()}, {"params", params_.params_json()}};
    }

protected:
    static constexpr int kReadoutChunk = 128;

    ModelConfig cfg_;
    ParamStore params_;
};

class GopherModel : public Model {
public:
    explicit GopherModel(ModelConfig cfg) : Model(std::move(cfg)), dynamics_{"dyn"} {
        if (cfg_.augmented_dims < 0 || cfg_.augmented_dims >= cfg_.embed_dim)
            throw std::invalid_argument("GopherModel: augmented_dims must lie in [0, embed_dim)");
        if (cfg_.ode_steps_per_unit_time <= 0)
            throw std::invalid_argument("GopherModel: ode_steps_per_unit_time must be positive");
        Rng rng(derive_stream(cfg_.init_seed, 0x6d6f64656cull));
        if (cfg_.attr_dim > 0) {
            detail::init_mlp(params_, "enc", cfg_.attr_dim, cfg_.hidden_dim,
                             cfg_.embed_dim - cfg_.augmented_dims, rng);
        } else {
            Array z0(cfg_.num_nodes, cfg_.embed_dim);
            for (double& v : z0.values()) v = rng.normal(0.0, 0.1);
            params_.add("z0", std::move(z0));
        }
        detail::init_mlp(params_, "dyn", cfg_.embed_dim + 1, cfg_.hidden_dim, cfg_.embed_dim, rng);
        detail::init_mlp(params_, "proj", cfg_.embed_dim, cfg_.hidden_dim, 1, rng);
    }

    // Z(0): the learned embedding matrix, or encoded node attributes with the
    // augmented dimensions starting at zero.
    Var initial_state(Tape& tape, Binding& binding, const WeightedDigraph& g) const {
        if (cfg_.attr_dim == 0) return binding["z0"];
        if (!g.node_attrs()) throw std::invalid_argument("GopherModel: graph has no node attributes");
        const auto& attrs = *g.node_attrs();
        if (attrs.front().size() != static_cast<std::size_t>(cfg_.attr_dim))
            throw std::invalid_argument("GopherModel: attribute dimension mismatch");
        Array a(g.num_nodes(), cfg_.attr_dim);
        for (int v = 0; v < g.num_nodes(); ++v)
            for (int j = 0; j < cfg_.attr_dim; ++j) a.at(v, j) = attrs[static_cast<std::size_t>(v)][static_cast<std::size_t>(j)];
        Var encoded = mlp2(binding, "enc", tape.constant(std::move(a)));
        return pad_cols(encoded, cfg_.augmented_dims);
    }

    Var readout_rows(Tape& tape, Binding& binding, const WeightedDigraph& g,
                     std::span<const double> times, bool log_probs) const override {
        detail::check_sorted_times(times, "gopher_forward");
        if (g.num_nodes() != cfg_.num_nodes)
            throw std::invalid_argument("gopher_forward: graph size mismatch");
        const int n = cfg_.num_nodes;
        const double h = 1.0 / cfg_.ode_steps_per_unit_time;

        // Grid cell below each query; delta is the remaining partial step.
        std::vector<int> cells(times.size());
        std::vector<double> deltas(times.size());
        int max_cell = 0;
        for (std::size_t i = 0; i < times.size(); ++i) {
            int c = static_cast<int>(std::floor(times[i] / h));
            double d = times[i] - c * h;
            if (d < 0.0) {  // floor pushed past the query by round-off
                --c;
                d = times[i] - c * h;
            }
            cells[i] = c;
            deltas[i] = d;
            max_cell = std::max(max_cell, c);
        }

        std::vector<Var> grid;
        grid.reserve(static_cast<std::size_t>(max_cell) + 1);
        grid.push_back(initial_state(tape, binding, g));
        for (int k = 0; k < max_cell; ++k)
            grid.push_back(main_step(binding, g, grid.back(), k * h, h));

        std::vector<Var> chunk_rows;
        for (std::size_t begin = 0; begin < times.size(); begin += kReadoutChunk) {
            const std::size_t end = std::min(times.size(), begin + kReadoutChunk);
            const int blocks = static_cast<int>(end - begin);
            std::vector<Var> parts;
            std::vector<double> base_times(static_cast<std::size_t>(blocks));
            std::vector<double> step(static_cast<std::size_t>(blocks));
            parts.reserve(static_cast<std::size_t>(blocks));
            for (std::size_t i = begin; i < end; ++i) {
                parts.push_back(grid[static_cast<std::size_t>(cells[i])]);
                base_times[i - begin] = cells[i] * h;
                step[i - begin] = deltas[i];
            }
            Var state = side_steps(binding, g, vstack(parts), base_times, step, blocks);
            Var logits = reshape(mlp2(binding, "proj", state), blocks, n);
            chunk_rows.push_back(log_probs ? row_log_softmax(logits) : row_softmax(logits));
        }
        if (chunk_rows.size() == 1) return chunk_rows.front();
        return vstack(chunk_rows);
    }

private:
    // dZ/dt at a common time for `blocks` stacked states.
    Var dynamics_rhs(Binding& binding, const WeightedDigraph& g, Var z,
                     std::span<const double> block_times, int blocks) const {
        Var with_time = append_col(z, detail::per_block_column(block_times, cfg_.num_nodes));
        return dynamics_.forward(binding, with_time, g, blocks);
    }

    Var main_step(Binding& binding, const WeightedDigraph& g, Var z, double t0, double h) const {
        const auto rhs = [&](Var state, double t) {
            const double ts[1] = {t};
            return dynamics_rhs(binding, g, state, std::span<const double>(ts), 1);
        };
        Var k1 = rhs(z, t0);
        Var k2 = rhs(add_scaled(z, k1, h / 2), t0 + h / 2);
        Var k3 = rhs(add_scaled(z, k2, h / 2), t0 + h / 2);
        Var k4 = rhs(add_scaled(z, k3, h), t0 + h);
        Var combined = add(add_scaled(add_scaled(k1, k2, 2.0), k3, 2.0), k4);
        return add_scaled(z, combined, h / 6.0);
    }

    // One RK4 step per block with its own step size, advanced in lockstep.
    Var side_steps(Binding& binding, const WeightedDigraph& g, Var z,
                   const std::vector<double>& base_times, const std::vector<double>& step,
                   int blocks) const {
        const int n = cfg_.num_nodes;
        auto stage_times = [&](double frac) {
            std::vector<double> ts(base_times.size());
            for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = base_times[i] + frac * step[i];
            return ts;
        };
        auto scaled = [&](double frac) {
            std::vector<double> c(step.size());
            for (std::size_t i = 0; i < c.size(); ++i) c[i] = frac * step[i];
            return c;
        };
        Var k1 = dynamics_rhs(binding, g, z, stage_times(0.0), blocks);
        Var k2 = dynamics_rhs(binding, g, add_scaled_blocks(z, k1, scaled(0.5), n),
                              stage_times(0.5), blocks);
        Var k3 = dynamics_rhs(binding, g, add_scaled_blocks(z, k2, scaled(0.5), n),
                              stage_times(0.5), blocks);
        Var k4 = dynamics_rhs(binding, g, add_scaled_blocks(z, k3, scaled(1.0), n),
                              stage_times(1.0), blocks);
        Var combined = add(add_scaled(add_scaled(k1, k2, 2.0), k3, 2.0), k4);
        return add_scaled_blocks(z, combined, scaled(1.0 / 6.0), n);
    }

    GinLayer dynamics_;
};

// Shared scaffold for the two stateless baselines: stack the embedding matrix
// once per query time, append the time column, then apply the core network.
class NaiveModelBase : public Model {
public:
    explicit NaiveModelBase(ModelConfig cfg) : Model(std::move(cfg)) {
        Rng rng(derive_stream(cfg_.init_seed, 0x6d6f64656cull));
        Array emb(cfg_.num_nodes, cfg_.embed_dim);
        for (double& v : emb.values()) v = rng.normal(0.0, 0.1);
        params_.add("emb", std::move(emb));
        detail::init_mlp(params_, core_prefix(), cfg_.embed_dim + 1, cfg_.hidden_dim,
                         cfg_.embed_dim, rng);
        detail::init_mlp(params_, "proj", cfg_.embed_dim, cfg_.hidden_dim, 1, rng);
    }

    Var readout_rows(Tape& tape, Binding& binding, const WeightedDigraph& g,
                     std::span<const double> times, bool log_probs) const override {
        detail::check_sorted_times(times, "naive_forward");
        if (g.num_nodes() != cfg_.num_nodes)
            throw std::invalid_argument("naive_forward: graph size mismatch");
        const int n = cfg_.num_nodes;
        Var emb = binding["emb"];
        std::vector<Var> chunk_rows;
        for (std::size_t begin = 0; begin < times.size(); begin += kReadoutChunk) {
            const std::size_t end = std::min(times.size(), begin + kReadoutChunk);
            const int blocks = static_cast<int>(end - begin);
            std::vector<Var> parts(static_cast<std::size_t>(blocks), emb);
            Var with_time = append_col(
                vstack(parts),
                detail::per_block_column(std::span<const double>(times.data() + begin,
                                                                 static_cast<std::size_t>(blocks)),
                                         n));
            Var features = core(binding, with_time, g, blocks);
            Var logits = reshape(mlp2(binding, "proj", features), blocks, n);
            chunk_rows.push_back(log_probs ? row_log_softmax(logits) : row_softmax(logits));
        }
        if (chunk_rows.size() == 1) return chunk_rows.front();
        return vstack(chunk_rows);
    }

protected:
    virtual std::string core_prefix() const = 0;
    virtual Var core(Binding& binding, Var with_time, const WeightedDigraph& g, int blocks) const = 0;
};

class NaiveGnnModel : public NaiveModelBase {
public:
    explicit NaiveGnnModel(ModelConfig cfg) : NaiveModelBase(std::move(cfg)), gin_{"gin"} {}

protected:
    std::string core_prefix() const override { return "gin"; }
    Var core(Binding& binding, Var with_time, const WeightedDigraph& g, int blocks) const override {
        return gin_.forward(binding, with_time, g, blocks);
    }

private:
    GinLayer gin_;
};

class NaiveMlpModel : public NaiveModelBase {
public:
    explicit NaiveMlpModel(ModelConfig cfg) : NaiveModelBase(std::move(cfg)) {}

protected:
    std::string core_prefix() const override { return "mlp"; }
    Var core(Binding& binding, Var with_time, const WeightedDigraph&, int) const override {
        return mlp2(binding, "mlp", with_time);  // no adjacency access
    }
};

inline std::shared_ptr<Model> make_model(const ModelConfig& cfg) {
    if (cfg.kind == "gopher") return std::make_shared<GopherModel>(cfg);
    if (cfg.kind == "naive_gnn") return std::make_shared<NaiveGnnModel>(cfg);
    if (cfg.kind == "naive_mlp") return std::make_shared<NaiveMlpModel>(cfg);
    throw std::invalid_argument("make_model: unknown kind " + cfg.kind);
}

inline std::shared_ptr<Model> model_from_checkpoint(const nlohmann::json& j) {
    if (j.at("version").get<int>() != 1)
        throw std::runtime_error("model checkpoint: unsupported version");
    auto model = make_model(ModelConfig::from_json(j.at("arch")));
    ParamStore loaded = ParamStore::params_from_json(j.at("params"));
    for (auto& [name, entry] : model->params()) {
        if (!loaded.contains(name)) throw std::runtime_error("model checkpoint: missing param " + name);
        const auto& src = loaded.at(name).value;
        if (src.rows() != entry.value.rows() || src.cols() != entry.value.cols())
            throw std::runtime_error("model checkpoint: shape mismatch for " + name);
        entry.value = src;
    }
    if (loaded.size() != model->params().size())
        throw std::runtime_error("model checkpoint: extra parameters in file");
    return model;
}

inline void save_model(const Model& model, const std::string& path) {
    save_checkpoint(model.to_checkpoint(), path);
}

inline std::shared_ptr<Model> load_model(const std::string& path) {
    return model_from_checkpoint(load_checkpoint(path));
}

}  // namespace gopher
