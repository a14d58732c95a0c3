#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "normalforge/errors.hpp"
#include "normalforge/rng.hpp"

namespace normalforge::nn {

// Dense row-major double tensor. All network math runs in double so the
// finite-difference gradient checks have headroom.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s);
    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor scalar(double v);

    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape[i]; }
    int numel() const { return static_cast<int>(data.size()); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    std::string shape_str() const;
};

enum class Mode { Train, Eval };

// Dynamic reverse-mode tape. Nodes are appended in evaluation order, so a
// reverse sweep over ids is a valid topological order.
class Graph {
  public:
    int leaf(Tensor value, bool requires_grad);
    int constant(Tensor value) { return leaf(std::move(value), false); }
    int add_node(Tensor value, std::vector<int> inputs,
                 std::function<void(Graph&, int)> backward_fn);

    const Tensor& value(int id) const { return nodes_[id].value; }
    Tensor& grad(int id);
    bool has_grad(int id) const { return !nodes_[id].grad.data.empty(); }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }

    // Accumulates gradients of `output` into every requires_grad node.
    void backward(int output, const Tensor& upstream);

    int size() const { return static_cast<int>(nodes_.size()); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::vector<int> inputs;
        std::function<void(Graph&, int)> backward_fn;
    };
    std::vector<Node> nodes_;
};

// ---- primitive ops -------------------------------------------------------

// x (..., in) -> (..., out) with w (out, in), b (out)
int linear(Graph& g, int x, int w, int b);
int relu(Graph& g, int x);
// x (B, Cin, H, W) -> (B, Cout, H, W), 3x3 kernel, zero padding 1
int conv3x3(Graph& g, int x, int w, int b);
// 3x3 window max, stride 1, padding 1 ("same" output size)
int maxpool3x3(Graph& g, int x);
// (B, n, C) -> (B, C), max over the set axis; invariant to row permutations
int max_over_set(Graph& g, int x);
// running_mean / running_var are read as constants; in Train mode the batch
// statistics used for normalization are reported through `batch_stats` so the
// caller can fold them into the running values between steps.
struct BnStats {
    Tensor mean;
    Tensor var;
};
int batchnorm(Graph& g, int x, int gamma, int beta, const Tensor& running_mean,
              const Tensor& running_var, Mode mode, BnStats* batch_stats = nullptr);
// inverted dropout; identity in Eval mode
int dropout(Graph& g, int x, double keep, Mode mode, Rng& rng);
int reshape(Graph& g, int x, std::vector<int> new_shape);
int flatten(Graph& g, int x);  // (B, ...) -> (B, prod)
// a (B, p, q) x b (B, q) -> (B, p)
int bmm_vec(Graph& g, int a, int b);
// q (B, 4) wxyz, v (B, 3) -> (B, 3): rotate v by the normalized quaternion.
// Throws ZeroQuaternion when a quaternion row has norm < 1e-12.
int quat_rotate(Graph& g, int q, int v);
int add(Graph& g, int a, int b);
int sub(Graph& g, int a, int b);
int scale(Graph& g, int x, double c);
int sum_sq(Graph& g, int x);   // scalar sum of squares
int sum_abs(Graph& g, int x);  // scalar sum of absolute values
int add_all(Graph& g, std::span<const int> xs);
// (B, 3) -> unit rows; throws ZeroVector when a row has norm < 1e-12
int normalize_rows(Graph& g, int x);
// rank-2 concat along the feature axis: (B, F1), (B, F2), ... -> (B, sum F)
int concat_features(Graph& g, std::span<const int> xs);
// (B, X, C) -> (B, C), picking one index along axis 1
int select_axis1(Graph& g, int x, int index);

// ---- parameter store -----------------------------------------------------

class ParamStore {
  public:
    struct Entry {
        Tensor tensor;
        bool trainable = true;
        bool is_weight = false;  // participates in the L2 regularizer
    };

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }
    Entry& at(const std::string& name);
    const Entry& at(const std::string& name) const;
    void put(const std::string& name, Tensor t, bool trainable, bool is_weight);
    const std::map<std::string, Entry>& entries() const { return entries_; }
    std::map<std::string, Entry>& entries() { return entries_; }

    // Versioned little-endian container of (name, flags, shape, f64 data)
    // records; the exact byte layout is documented in the README.
    void save(std::ostream& out) const;
    static ParamStore load(std::istream& in);

  private:
    std::map<std::string, Entry> entries_;  // sorted by name: deterministic iteration
};

// ---- sequential layer stacks ----------------------------------------------

struct LayerSpec {
    enum class Kind {
        SharedMlp,       // linear over the last axis of (B, n, c)
        FullyConnected,  // linear over the last axis of (B, c)
        Conv3x3,         // pad 1
        MaxPool3x3,      // stride 1, pad 1
        MaxOverSet,
        Relu,
        BatchNorm,
        Dropout,
        Flatten,
    };
    Kind kind = Kind::Relu;
    int in = 0;
    int out = 0;        // output features / channels
    double keep = 1.0;  // Dropout keep probability
    std::string name;   // parameter prefix
};

LayerSpec mlp_layer(const std::string& name, int in, int out);
LayerSpec fc_layer(const std::string& name, int in, int out);
LayerSpec conv_layer(const std::string& name, int in, int out);
LayerSpec bn_layer(const std::string& name, int channels);

// Creates any missing parameters for the stack in `store`, seeded from `rng`:
// weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
// batch-norm gamma 1 / beta 0 with running stats (0, 1).
void init_stack_params(const std::vector<LayerSpec>& layers, ParamStore& store, Rng& rng);

struct BnPending {
    std::string name;  // batch-norm parameter prefix
    BnStats stats;
};

// Runs the stack inside an existing graph. `param_nodes` maps parameter names
// to graph leaves and is extended on demand so several stacks can share one
// graph (and one backward pass).
int run_stack(Graph& g, const std::vector<LayerSpec>& layers, ParamStore& store,
              std::map<std::string, int>& param_nodes, int x, Mode mode, Rng& rng,
              std::vector<BnPending>* bn_pending);

// ---- whole-stack convenience API ------------------------------------------

struct ForwardResult {
    Tensor output;
    Graph tape;
    int in_node = -1;
    int out_node = -1;
    std::map<std::string, int> param_nodes;
    std::vector<BnPending> bn_pending;
};

ForwardResult forward(const std::vector<LayerSpec>& layers, ParamStore& store, const Tensor& x,
                      Mode mode, Rng rng);

struct Gradients {
    std::map<std::string, Tensor> by_name;
    Tensor input;
};

Gradients backward(ForwardResult& fwd, const Tensor& upstream);

// theta <- theta - lr * grad for every trainable entry named in `grads`.
void sgd_step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr);

// running <- momentum * running + (1 - momentum) * batch statistic
void apply_bn_updates(ParamStore& store, std::span<const BnPending> pending, double momentum);

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
    struct Entry {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<Entry> entries;
    double worst = 0.0;
    bool pass(double tol) const { return worst < tol; }
};

// Central finite differences against the tape gradients for every trainable
// parameter (and the input, reported as "__input__"). loss_builder must map
// the stack output node to a scalar node. Deterministic: each forward runs
// with the same rng seed, so dropout masks repeat.
GradCheckReport grad_check(const std::vector<LayerSpec>& layers, ParamStore& store,
                           const Tensor& x, const std::function<int(Graph&, int)>& loss_builder,
                           double h, Mode mode, std::uint64_t seed);

}  // namespace normalforge::nn
