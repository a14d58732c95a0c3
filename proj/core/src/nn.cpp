#include "normalforge/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>

namespace normalforge::nn {

namespace {

int numel_of(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}

[[noreturn]] void shape_error(const std::string& what) { throw ShapeMismatch(what); }

void check(bool ok, const std::string& what) {
    if (!ok) shape_error(what);
}

}  // namespace

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
}

Tensor Tensor::scalar(double v) {
    Tensor t({1});
    t.data[0] = v;
    return t;
}

std::string Tensor::shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

int Graph::leaf(Tensor value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

int Graph::add_node(Tensor value, std::vector<int> inputs,
                    std::function<void(Graph&, int)> backward_fn) {
    Node node;
    node.value = std::move(value);
    node.inputs = std::move(inputs);
    node.backward_fn = std::move(backward_fn);
    for (int in : node.inputs)
        if (nodes_[in].requires_grad) node.requires_grad = true;
    nodes_.push_back(std::move(node));
    return static_cast<int>(nodes_.size()) - 1;
}

Tensor& Graph::grad(int id) {
    Node& node = nodes_[id];
    if (node.grad.data.empty()) node.grad = Tensor(node.value.shape);
    return node.grad;
}

void Graph::backward(int output, const Tensor& upstream) {
    check(upstream.same_shape(nodes_[output].value), "backward: upstream shape mismatch");
    for (Node& node : nodes_) node.grad.data.clear();
    grad(output) = upstream;
    for (int id = output; id >= 0; --id) {
        Node& node = nodes_[id];
        if (!node.requires_grad || node.grad.data.empty() || !node.backward_fn) continue;
        node.backward_fn(*this, id);
    }
}

// ---- ops -------------------------------------------------------------------

int linear(Graph& g, int x, int w, int b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    const Tensor& bv = g.value(b);
    check(wv.rank() == 2 && bv.rank() == 1 && bv.dim(0) == wv.dim(0),
          "linear: bad weight/bias shapes " + wv.shape_str() + " " + bv.shape_str());
    const int in = wv.dim(1);
    const int out = wv.dim(0);
    check(xv.rank() >= 1 && xv.shape.back() == in,
          "linear: input " + xv.shape_str() + " incompatible with weight " + wv.shape_str());
    const int rows = xv.numel() / in;

    std::vector<int> out_shape = xv.shape;
    out_shape.back() = out;
    Tensor y(out_shape);
    for (int r = 0; r < rows; ++r) {
        const double* xr = xv.data.data() + static_cast<size_t>(r) * in;
        double* yr = y.data.data() + static_cast<size_t>(r) * out;
        for (int o = 0; o < out; ++o) {
            const double* wo = wv.data.data() + static_cast<size_t>(o) * in;
            double acc = bv.data[o];
            for (int i = 0; i < in; ++i) acc += xr[i] * wo[i];
            yr[o] = acc;
        }
    }
    return g.add_node(std::move(y), {x, w, b}, [rows, in, out](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        const Tensor& xv = gg.value(ins[0]);
        const Tensor& wv = gg.value(ins[1]);
        if (gg.requires_grad(ins[0])) {
            Tensor& gx = gg.grad(ins[0]);
            for (int r = 0; r < rows; ++r)
                for (int o = 0; o < out; ++o) {
                    double go = gy.data[static_cast<size_t>(r) * out + o];
                    const double* wo = wv.data.data() + static_cast<size_t>(o) * in;
                    double* gxr = gx.data.data() + static_cast<size_t>(r) * in;
                    for (int i = 0; i < in; ++i) gxr[i] += go * wo[i];
                }
        }
        if (gg.requires_grad(ins[1])) {
            Tensor& gw = gg.grad(ins[1]);
            for (int r = 0; r < rows; ++r)
                for (int o = 0; o < out; ++o) {
                    double go = gy.data[static_cast<size_t>(r) * out + o];
                    const double* xr = xv.data.data() + static_cast<size_t>(r) * in;
                    double* gwo = gw.data.data() + static_cast<size_t>(o) * in;
                    for (int i = 0; i < in; ++i) gwo[i] += go * xr[i];
                }
        }
        if (gg.requires_grad(ins[2])) {
            Tensor& gb = gg.grad(ins[2]);
            for (int r = 0; r < rows; ++r)
                for (int o = 0; o < out; ++o)
                    gb.data[o] += gy.data[static_cast<size_t>(r) * out + o];
        }
    });
}

int relu(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    Tensor y(xv.shape);
    for (int i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] > 0.0 ? xv.data[i] : 0.0;
    return g.add_node(std::move(y), {x}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        const Tensor& xv = gg.value(ins[0]);
        Tensor& gx = gg.grad(ins[0]);
        for (int i = 0; i < xv.numel(); ++i)
            if (xv.data[i] > 0.0) gx.data[i] += gy.data[i];
    });
}

int conv3x3(Graph& g, int x, int w, int b) {
    const Tensor& xv = g.value(x);
    const Tensor& wv = g.value(w);
    const Tensor& bv = g.value(b);
    check(xv.rank() == 4, "conv3x3: input must be (B, C, H, W), got " + xv.shape_str());
    check(wv.rank() == 4 && wv.dim(2) == 3 && wv.dim(3) == 3 && wv.dim(1) == xv.dim(1),
          "conv3x3: weight must be (Cout, Cin, 3, 3) matching input, got " + wv.shape_str());
    check(bv.rank() == 1 && bv.dim(0) == wv.dim(0), "conv3x3: bad bias shape");
    const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Cout = wv.dim(0);

    auto xat = [&](const Tensor& t, int bb, int c, int i, int j) {
        return t.data[((static_cast<size_t>(bb) * Cin + c) * H + i) * W + j];
    };
    Tensor y({B, Cout, H, W});
    for (int bb = 0; bb < B; ++bb)
        for (int co = 0; co < Cout; ++co)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = bv.data[co];
                    for (int ci = 0; ci < Cin; ++ci)
                        for (int di = -1; di <= 1; ++di) {
                            int ii = i + di;
                            if (ii < 0 || ii >= H) continue;
                            for (int dj = -1; dj <= 1; ++dj) {
                                int jj = j + dj;
                                if (jj < 0 || jj >= W) continue;
                                double kw = wv.data[((static_cast<size_t>(co) * Cin + ci) * 3 +
                                                     (di + 1)) * 3 + (dj + 1)];
                                acc += kw * xat(xv, bb, ci, ii, jj);
                            }
                        }
                    y.data[((static_cast<size_t>(bb) * Cout + co) * H + i) * W + j] = acc;
                }

    return g.add_node(std::move(y), {x, w, b}, [B, Cin, Cout, H, W](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        const Tensor& xv = gg.value(ins[0]);
        const Tensor& wv = gg.value(ins[1]);
        const bool need_x = gg.requires_grad(ins[0]);
        const bool need_w = gg.requires_grad(ins[1]);
        const bool need_b = gg.requires_grad(ins[2]);
        Tensor* gx = need_x ? &gg.grad(ins[0]) : nullptr;
        Tensor* gw = need_w ? &gg.grad(ins[1]) : nullptr;
        Tensor* gb = need_b ? &gg.grad(ins[2]) : nullptr;
        for (int bb = 0; bb < B; ++bb)
            for (int co = 0; co < Cout; ++co)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j) {
                        double go = gy.data[((static_cast<size_t>(bb) * Cout + co) * H + i) * W + j];
                        if (go == 0.0) continue;
                        if (gb) gb->data[co] += go;
                        for (int ci = 0; ci < Cin; ++ci)
                            for (int di = -1; di <= 1; ++di) {
                                int ii = i + di;
                                if (ii < 0 || ii >= H) continue;
                                for (int dj = -1; dj <= 1; ++dj) {
                                    int jj = j + dj;
                                    if (jj < 0 || jj >= W) continue;
                                    size_t widx = ((static_cast<size_t>(co) * Cin + ci) * 3 +
                                                   (di + 1)) * 3 + (dj + 1);
                                    size_t xidx =
                                        ((static_cast<size_t>(bb) * Cin + ci) * H + ii) * W + jj;
                                    if (gx) gx->data[xidx] += go * wv.data[widx];
                                    if (gw) gw->data[widx] += go * xv.data[xidx];
                                }
                            }
                    }
    });
}

int maxpool3x3(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    check(xv.rank() == 4, "maxpool3x3: input must be (B, C, H, W), got " + xv.shape_str());
    const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);

    Tensor y(xv.shape);
    std::vector<int> argmax(xv.numel());
    for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double best = -std::numeric_limits<double>::infinity();
                    int best_idx = -1;
                    for (int di = -1; di <= 1; ++di) {
                        int ii = i + di;
                        if (ii < 0 || ii >= H) continue;
                        for (int dj = -1; dj <= 1; ++dj) {
                            int jj = j + dj;
                            if (jj < 0 || jj >= W) continue;
                            size_t idx = ((static_cast<size_t>(bb) * C + c) * H + ii) * W + jj;
                            if (xv.data[idx] > best) {  // ties keep the first scanned tap
                                best = xv.data[idx];
                                best_idx = static_cast<int>(idx);
                            }
                        }
                    }
                    size_t oidx = ((static_cast<size_t>(bb) * C + c) * H + i) * W + j;
                    y.data[oidx] = best;
                    argmax[oidx] = best_idx;
                }

    return g.add_node(std::move(y), {x}, [argmax = std::move(argmax)](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        Tensor& gx = gg.grad(ins[0]);
        for (size_t i = 0; i < argmax.size(); ++i) gx.data[argmax[i]] += gy.data[i];
    });
}

int max_over_set(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    check(xv.rank() == 3, "max_over_set: input must be (B, n, C), got " + xv.shape_str());
    const int B = xv.dim(0), n = xv.dim(1), C = xv.dim(2);

    Tensor y({B, C});
    std::vector<int> argmax(static_cast<size_t>(B) * C);
    for (int bb = 0; bb < B; ++bb)
        for (int c = 0; c < C; ++c) {
            double best = -std::numeric_limits<double>::infinity();
            int best_row = 0;
            for (int r = 0; r < n; ++r) {
                double v = xv.data[(static_cast<size_t>(bb) * n + r) * C + c];
                if (v > best) {  // ties keep the lowest row
                    best = v;
                    best_row = r;
                }
            }
            y.data[static_cast<size_t>(bb) * C + c] = best;
            argmax[static_cast<size_t>(bb) * C + c] = best_row;
        }

    return g.add_node(std::move(y), {x},
                      [B, n, C, argmax = std::move(argmax)](Graph& gg, int self) {
                          const auto& ins = gg.inputs(self);
                          if (!gg.requires_grad(ins[0])) return;
                          const Tensor& gy = gg.grad(self);
                          Tensor& gx = gg.grad(ins[0]);
                          for (int bb = 0; bb < B; ++bb)
                              for (int c = 0; c < C; ++c) {
                                  int r = argmax[static_cast<size_t>(bb) * C + c];
                                  gx.data[(static_cast<size_t>(bb) * n + r) * C + c] +=
                                      gy.data[static_cast<size_t>(bb) * C + c];
                              }
                      });
}

namespace {

// channel layout rule: rank 2 -> (B, C); rank 3 -> (B, n, C); rank 4 -> (B, C, H, W)
struct BnLayout {
    int channels = 0;
    int reduce = 0;
    std::function<int(int)> channel_of;  // flat index -> channel
};

BnLayout bn_layout(const Tensor& x) {
    BnLayout layout;
    if (x.rank() == 2 || x.rank() == 3) {
        int c = x.shape.back();
        layout.channels = c;
        layout.reduce = x.numel() / c;
        layout.channel_of = [c](int i) { return i % c; };
    } else if (x.rank() == 4) {
        int c = x.dim(1);
        int hw = x.dim(2) * x.dim(3);
        layout.channels = c;
        layout.reduce = x.numel() / c;
        layout.channel_of = [c, hw](int i) { return (i / hw) % c; };
    } else {
        shape_error("batchnorm: unsupported rank " + x.shape_str());
    }
    return layout;
}

constexpr double kBnEps = 1e-5;

}  // namespace

int batchnorm(Graph& g, int x, int gamma, int beta, const Tensor& running_mean,
              const Tensor& running_var, Mode mode, BnStats* batch_stats) {
    const Tensor& xv = g.value(x);
    BnLayout layout = bn_layout(xv);
    const int C = layout.channels;
    check(g.value(gamma).numel() == C && g.value(beta).numel() == C &&
              running_mean.numel() == C && running_var.numel() == C,
          "batchnorm: parameter size mismatch");

    Tensor mean({C}), var({C});
    if (mode == Mode::Train) {
        for (int i = 0; i < xv.numel(); ++i) mean.data[layout.channel_of(i)] += xv.data[i];
        for (int c = 0; c < C; ++c) mean.data[c] /= layout.reduce;
        for (int i = 0; i < xv.numel(); ++i) {
            double d = xv.data[i] - mean.data[layout.channel_of(i)];
            var.data[layout.channel_of(i)] += d * d;
        }
        for (int c = 0; c < C; ++c) var.data[c] /= layout.reduce;
        if (batch_stats) {
            batch_stats->mean = mean;
            batch_stats->var = var;
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    Tensor inv_std({C});
    for (int c = 0; c < C; ++c) inv_std.data[c] = 1.0 / std::sqrt(var.data[c] + kBnEps);

    const Tensor& gv = g.value(gamma);
    const Tensor& bv = g.value(beta);
    Tensor xhat(xv.shape);
    Tensor y(xv.shape);
    for (int i = 0; i < xv.numel(); ++i) {
        int c = layout.channel_of(i);
        xhat.data[i] = (xv.data[i] - mean.data[c]) * inv_std.data[c];
        y.data[i] = gv.data[c] * xhat.data[i] + bv.data[c];
    }

    const bool train = mode == Mode::Train;
    return g.add_node(
        std::move(y), {x, gamma, beta},
        [C, layout, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](Graph& gg,
                                                                                 int self) {
            const auto& ins = gg.inputs(self);
            const Tensor& gy = gg.grad(self);
            const Tensor& gv = gg.value(ins[1]);
            const int n = gy.numel();

            if (gg.requires_grad(ins[2])) {
                Tensor& gbeta = gg.grad(ins[2]);
                for (int i = 0; i < n; ++i) gbeta.data[layout.channel_of(i)] += gy.data[i];
            }
            if (gg.requires_grad(ins[1])) {
                Tensor& ggamma = gg.grad(ins[1]);
                for (int i = 0; i < n; ++i)
                    ggamma.data[layout.channel_of(i)] += gy.data[i] * xhat.data[i];
            }
            if (!gg.requires_grad(ins[0])) return;
            Tensor& gx = gg.grad(ins[0]);
            if (!train) {
                for (int i = 0; i < n; ++i) {
                    int c = layout.channel_of(i);
                    gx.data[i] += gy.data[i] * gv.data[c] * inv_std.data[c];
                }
                return;
            }
            // gradients flow through the batch statistics
            std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
            for (int i = 0; i < n; ++i) {
                int c = layout.channel_of(i);
                sum_g[c] += gy.data[i];
                sum_gx[c] += gy.data[i] * xhat.data[i];
            }
            const double inv_m = 1.0 / layout.reduce;
            for (int i = 0; i < n; ++i) {
                int c = layout.channel_of(i);
                gx.data[i] += gv.data[c] * inv_std.data[c] *
                              (gy.data[i] - inv_m * sum_g[c] - xhat.data[i] * inv_m * sum_gx[c]);
            }
        });
}

int dropout(Graph& g, int x, double keep, Mode mode, Rng& rng) {
    if (mode == Mode::Eval || keep >= 1.0) return x;
    check(keep > 0.0, "dropout: keep probability must be positive");
    const Tensor& xv = g.value(x);
    std::vector<double> mask(xv.numel());
    for (double& m : mask) m = rng.uniform() < keep ? 1.0 / keep : 0.0;
    Tensor y(xv.shape);
    for (int i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] * mask[i];
    return g.add_node(std::move(y), {x}, [mask = std::move(mask)](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        Tensor& gx = gg.grad(ins[0]);
        for (size_t i = 0; i < mask.size(); ++i) gx.data[i] += gy.data[i] * mask[i];
    });
}

int reshape(Graph& g, int x, std::vector<int> new_shape) {
    const Tensor& xv = g.value(x);
    check(numel_of(new_shape) == xv.numel(), "reshape: element count mismatch");
    Tensor y = xv;
    y.shape = std::move(new_shape);
    return g.add_node(std::move(y), {x}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        Tensor& gx = gg.grad(ins[0]);
        for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gy.data[i];
    });
}

int flatten(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    check(xv.rank() >= 2, "flatten: input must have a batch axis");
    return reshape(g, x, {xv.dim(0), xv.numel() / xv.dim(0)});
}

int bmm_vec(Graph& g, int a, int b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    check(av.rank() == 3 && bv.rank() == 2 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1),
          "bmm_vec: incompatible shapes " + av.shape_str() + " x " + bv.shape_str());
    const int B = av.dim(0), p = av.dim(1), q = av.dim(2);

    Tensor y({B, p});
    for (int bb = 0; bb < B; ++bb)
        for (int i = 0; i < p; ++i) {
            double acc = 0.0;
            for (int j = 0; j < q; ++j)
                acc += av.data[(static_cast<size_t>(bb) * p + i) * q + j] *
                       bv.data[static_cast<size_t>(bb) * q + j];
            y.data[static_cast<size_t>(bb) * p + i] = acc;
        }

    return g.add_node(std::move(y), {a, b}, [B, p, q](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        const Tensor& av = gg.value(ins[0]);
        const Tensor& bv = gg.value(ins[1]);
        if (gg.requires_grad(ins[0])) {
            Tensor& ga = gg.grad(ins[0]);
            for (int bb = 0; bb < B; ++bb)
                for (int i = 0; i < p; ++i) {
                    double go = gy.data[static_cast<size_t>(bb) * p + i];
                    for (int j = 0; j < q; ++j)
                        ga.data[(static_cast<size_t>(bb) * p + i) * q + j] +=
                            go * bv.data[static_cast<size_t>(bb) * q + j];
                }
        }
        if (gg.requires_grad(ins[1])) {
            Tensor& gb = gg.grad(ins[1]);
            for (int bb = 0; bb < B; ++bb)
                for (int i = 0; i < p; ++i) {
                    double go = gy.data[static_cast<size_t>(bb) * p + i];
                    for (int j = 0; j < q; ++j)
                        gb.data[static_cast<size_t>(bb) * q + j] +=
                            go * av.data[(static_cast<size_t>(bb) * p + i) * q + j];
                }
        }
    });
}

namespace {

inline void cross3(const double* a, const double* b, double* out) {
    out[0] = a[1] * b[2] - a[2] * b[1];
    out[1] = a[2] * b[0] - a[0] * b[2];
    out[2] = a[0] * b[1] - a[1] * b[0];
}

}  // namespace

int quat_rotate(Graph& g, int q, int v) {
    const Tensor& qv = g.value(q);
    const Tensor& vv = g.value(v);
    check(qv.rank() == 2 && qv.dim(1) == 4 && vv.rank() == 2 && vv.dim(1) == 3 &&
              qv.dim(0) == vv.dim(0),
          "quat_rotate: expected (B,4) and (B,3), got " + qv.shape_str() + " " + vv.shape_str());
    const int B = qv.dim(0);

    Tensor y({B, 3});
    for (int bb = 0; bb < B; ++bb) {
        const double* qr = qv.data.data() + static_cast<size_t>(bb) * 4;
        const double* vr = vv.data.data() + static_cast<size_t>(bb) * 3;
        double nq = std::sqrt(qr[0] * qr[0] + qr[1] * qr[1] + qr[2] * qr[2] + qr[3] * qr[3]);
        if (nq < 1e-12) throw ZeroQuaternion("quat_rotate: zero quaternion in row " +
                                             std::to_string(bb));
        double w = qr[0] / nq;
        double u[3] = {qr[1] / nq, qr[2] / nq, qr[3] / nq};
        double uxv[3], uxuxv[3];
        cross3(u, vr, uxv);
        cross3(u, uxv, uxuxv);
        double* yr = y.data.data() + static_cast<size_t>(bb) * 3;
        for (int k = 0; k < 3; ++k) yr[k] = vr[k] + 2.0 * w * uxv[k] + 2.0 * uxuxv[k];
    }

    return g.add_node(std::move(y), {q, v}, [B](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        const Tensor& qv = gg.value(ins[0]);
        const Tensor& vv = gg.value(ins[1]);
        const bool need_q = gg.requires_grad(ins[0]);
        const bool need_v = gg.requires_grad(ins[1]);
        Tensor* gq = need_q ? &gg.grad(ins[0]) : nullptr;
        Tensor* gvv = need_v ? &gg.grad(ins[1]) : nullptr;
        for (int bb = 0; bb < B; ++bb) {
            const double* qr = qv.data.data() + static_cast<size_t>(bb) * 4;
            const double* vr = vv.data.data() + static_cast<size_t>(bb) * 3;
            const double* gr = gy.data.data() + static_cast<size_t>(bb) * 3;
            double nq = std::sqrt(qr[0] * qr[0] + qr[1] * qr[1] + qr[2] * qr[2] + qr[3] * qr[3]);
            double qh[4] = {qr[0] / nq, qr[1] / nq, qr[2] / nq, qr[3] / nq};
            double w = qh[0];
            const double* u = qh + 1;
            double uxv[3];
            cross3(u, vr, uxv);

            if (gvv) {
                // y = R v; dv = R^T g. R from the unit quaternion (w, u).
                double r[3][3];
                double xx = u[0] * u[0], yy = u[1] * u[1], zz = u[2] * u[2];
                double xy = u[0] * u[1], xz = u[0] * u[2], yz = u[1] * u[2];
                double wx = w * u[0], wy = w * u[1], wz = w * u[2];
                r[0][0] = 1 - 2 * (yy + zz); r[0][1] = 2 * (xy - wz); r[0][2] = 2 * (xz + wy);
                r[1][0] = 2 * (xy + wz); r[1][1] = 1 - 2 * (xx + zz); r[1][2] = 2 * (yz - wx);
                r[2][0] = 2 * (xz - wy); r[2][1] = 2 * (yz + wx); r[2][2] = 1 - 2 * (xx + yy);
                double* out = gvv->data.data() + static_cast<size_t>(bb) * 3;
                for (int k = 0; k < 3; ++k)
                    out[k] += r[0][k] * gr[0] + r[1][k] * gr[1] + r[2][k] * gr[2];
            }
            if (gq) {
                // gradient w.r.t. the unit quaternion, then through normalization
                double ghat[4];
                ghat[0] = 2.0 * (gr[0] * uxv[0] + gr[1] * uxv[1] + gr[2] * uxv[2]);
                for (int k = 0; k < 3; ++k) {
                    double ek[3] = {0, 0, 0};
                    ek[k] = 1.0;
                    double ekxv[3], ekxuxv[3], uxekxv[3];
                    cross3(ek, vr, ekxv);
                    cross3(ek, uxv, ekxuxv);
                    cross3(u, ekxv, uxekxv);
                    double dy[3];
                    for (int d = 0; d < 3; ++d)
                        dy[d] = 2.0 * w * ekxv[d] + 2.0 * (ekxuxv[d] + uxekxv[d]);
                    ghat[k + 1] = gr[0] * dy[0] + gr[1] * dy[1] + gr[2] * dy[2];
                }
                double dot = ghat[0] * qh[0] + ghat[1] * qh[1] + ghat[2] * qh[2] + ghat[3] * qh[3];
                double* out = gq->data.data() + static_cast<size_t>(bb) * 4;
                for (int k = 0; k < 4; ++k) out[k] += (ghat[k] - dot * qh[k]) / nq;
            }
        }
    });
}

int add(Graph& g, int a, int b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    check(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor y(av.shape);
    for (int i = 0; i < av.numel(); ++i) y.data[i] = av.data[i] + bv.data[i];
    return g.add_node(std::move(y), {a, b}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        for (int in : ins) {
            if (!gg.requires_grad(in)) continue;
            Tensor& gx = gg.grad(in);
            for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gy.data[i];
        }
    });
}

int sub(Graph& g, int a, int b) {
    const Tensor& av = g.value(a);
    const Tensor& bv = g.value(b);
    check(av.same_shape(bv), "sub: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
    Tensor y(av.shape);
    for (int i = 0; i < av.numel(); ++i) y.data[i] = av.data[i] - bv.data[i];
    return g.add_node(std::move(y), {a, b}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        if (gg.requires_grad(ins[0])) {
            Tensor& ga = gg.grad(ins[0]);
            for (size_t i = 0; i < ga.data.size(); ++i) ga.data[i] += gy.data[i];
        }
        if (gg.requires_grad(ins[1])) {
            Tensor& gb = gg.grad(ins[1]);
            for (size_t i = 0; i < gb.data.size(); ++i) gb.data[i] -= gy.data[i];
        }
    });
}

int scale(Graph& g, int x, double c) {
    const Tensor& xv = g.value(x);
    Tensor y(xv.shape);
    for (int i = 0; i < xv.numel(); ++i) y.data[i] = xv.data[i] * c;
    return g.add_node(std::move(y), {x}, [c](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        Tensor& gx = gg.grad(ins[0]);
        for (size_t i = 0; i < gx.data.size(); ++i) gx.data[i] += gy.data[i] * c;
    });
}

int sum_sq(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    double acc = 0.0;
    for (double v : xv.data) acc += v * v;
    return g.add_node(Tensor::scalar(acc), {x}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        double go = gg.grad(self).data[0];
        const Tensor& xv = gg.value(ins[0]);
        Tensor& gx = gg.grad(ins[0]);
        for (int i = 0; i < xv.numel(); ++i) gx.data[i] += 2.0 * go * xv.data[i];
    });
}

int sum_abs(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    double acc = 0.0;
    for (double v : xv.data) acc += std::abs(v);
    return g.add_node(Tensor::scalar(acc), {x}, [](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        double go = gg.grad(self).data[0];
        const Tensor& xv = gg.value(ins[0]);
        Tensor& gx = gg.grad(ins[0]);
        for (int i = 0; i < xv.numel(); ++i) {
            if (xv.data[i] > 0.0) gx.data[i] += go;
            else if (xv.data[i] < 0.0) gx.data[i] -= go;
        }
    });
}

int add_all(Graph& g, std::span<const int> xs) {
    check(!xs.empty(), "add_all: empty input list");
    int acc = xs[0];
    for (size_t i = 1; i < xs.size(); ++i) acc = add(g, acc, xs[i]);
    return acc;
}

int normalize_rows(Graph& g, int x) {
    const Tensor& xv = g.value(x);
    check(xv.rank() == 2 && xv.dim(1) == 3, "normalize_rows: input must be (B, 3)");
    const int B = xv.dim(0);
    Tensor y(xv.shape);
    std::vector<double> norms(B);
    for (int bb = 0; bb < B; ++bb) {
        const double* xr = xv.data.data() + static_cast<size_t>(bb) * 3;
        double n = std::sqrt(xr[0] * xr[0] + xr[1] * xr[1] + xr[2] * xr[2]);
        if (n < 1e-12)
            throw ZeroVector("normalize_rows: zero vector in row " + std::to_string(bb));
        norms[bb] = n;
        for (int k = 0; k < 3; ++k) y.data[static_cast<size_t>(bb) * 3 + k] = xr[k] / n;
    }
    return g.add_node(std::move(y), {x}, [B, norms = std::move(norms)](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        const Tensor& yv = gg.value(self);
        Tensor& gx = gg.grad(ins[0]);
        for (int bb = 0; bb < B; ++bb) {
            const double* yr = yv.data.data() + static_cast<size_t>(bb) * 3;
            const double* gr = gy.data.data() + static_cast<size_t>(bb) * 3;
            double dot = yr[0] * gr[0] + yr[1] * gr[1] + yr[2] * gr[2];
            double* out = gx.data.data() + static_cast<size_t>(bb) * 3;
            for (int k = 0; k < 3; ++k) out[k] += (gr[k] - yr[k] * dot) / norms[bb];
        }
    });
}

int concat_features(Graph& g, std::span<const int> xs) {
    check(!xs.empty(), "concat_features: empty input list");
    const int B = g.value(xs[0]).dim(0);
    int total = 0;
    for (int x : xs) {
        const Tensor& t = g.value(x);
        check(t.rank() == 2 && t.dim(0) == B, "concat_features: inputs must be (B, F)");
        total += t.dim(1);
    }
    Tensor y({B, total});
    int offset = 0;
    for (int x : xs) {
        const Tensor& t = g.value(x);
        int f = t.dim(1);
        for (int bb = 0; bb < B; ++bb)
            std::copy_n(t.data.data() + static_cast<size_t>(bb) * f, f,
                        y.data.data() + static_cast<size_t>(bb) * total + offset);
        offset += f;
    }
    std::vector<int> inputs(xs.begin(), xs.end());
    return g.add_node(std::move(y), std::move(inputs), [B, total](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        const Tensor& gy = gg.grad(self);
        int offset = 0;
        for (int in : ins) {
            int f = gg.value(in).dim(1);
            if (gg.requires_grad(in)) {
                Tensor& gx = gg.grad(in);
                for (int bb = 0; bb < B; ++bb)
                    for (int k = 0; k < f; ++k)
                        gx.data[static_cast<size_t>(bb) * f + k] +=
                            gy.data[static_cast<size_t>(bb) * total + offset + k];
            }
            offset += f;
        }
    });
}

int select_axis1(Graph& g, int x, int index) {
    const Tensor& xv = g.value(x);
    check(xv.rank() == 3, "select_axis1: input must be (B, X, C)");
    check(index >= 0 && index < xv.dim(1), "select_axis1: index out of range");
    const int B = xv.dim(0), X = xv.dim(1), C = xv.dim(2);
    Tensor y({B, C});
    for (int bb = 0; bb < B; ++bb)
        std::copy_n(xv.data.data() + (static_cast<size_t>(bb) * X + index) * C, C,
                    y.data.data() + static_cast<size_t>(bb) * C);
    return g.add_node(std::move(y), {x}, [B, X, C, index](Graph& gg, int self) {
        const auto& ins = gg.inputs(self);
        if (!gg.requires_grad(ins[0])) return;
        const Tensor& gy = gg.grad(self);
        Tensor& gx = gg.grad(ins[0]);
        for (int bb = 0; bb < B; ++bb)
            for (int k = 0; k < C; ++k)
                gx.data[(static_cast<size_t>(bb) * X + index) * C + k] +=
                    gy.data[static_cast<size_t>(bb) * C + k];
    });
}

// ---- parameter store --------------------------------------------------------

ParamStore::Entry& ParamStore::at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeMismatch("ParamStore: no entry named '" + name + "'");
    return it->second;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ShapeMismatch("ParamStore: no entry named '" + name + "'");
    return it->second;
}

void ParamStore::put(const std::string& name, Tensor t, bool trainable, bool is_weight) {
    entries_[name] = Entry{std::move(t), trainable, is_weight};
}

namespace {

template <typename T>
void write_raw(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ParseError("ParamStore: truncated stream");
    return v;
}

constexpr std::uint32_t kParamStoreMagic = 0x5350464e;  // "NFPS"
constexpr std::uint32_t kParamStoreVersion = 1;

}  // namespace

void ParamStore::save(std::ostream& out) const {
    write_raw<std::uint32_t>(out, kParamStoreMagic);
    write_raw<std::uint32_t>(out, kParamStoreVersion);
    write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, entry] : entries_) {
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_raw<std::uint8_t>(out, entry.trainable ? 1 : 0);
        write_raw<std::uint8_t>(out, entry.is_weight ? 1 : 0);
        write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(entry.tensor.shape.size()));
        for (int d : entry.tensor.shape) write_raw<std::uint32_t>(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(entry.tensor.data.data()),
                  static_cast<std::streamsize>(entry.tensor.data.size() * sizeof(double)));
    }
}

ParamStore ParamStore::load(std::istream& in) {
    if (read_raw<std::uint32_t>(in) != kParamStoreMagic)
        throw ParseError("ParamStore: bad magic");
    if (read_raw<std::uint32_t>(in) != kParamStoreVersion)
        throw ParseError("ParamStore: unsupported version");
    ParamStore store;
    const auto count = read_raw<std::uint32_t>(in);
    for (std::uint32_t r = 0; r < count; ++r) {
        auto name_len = read_raw<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        Entry entry;
        entry.trainable = read_raw<std::uint8_t>(in) != 0;
        entry.is_weight = read_raw<std::uint8_t>(in) != 0;
        auto ndim = read_raw<std::uint32_t>(in);
        std::vector<int> shape(ndim);
        for (auto& d : shape) d = static_cast<int>(read_raw<std::uint32_t>(in));
        entry.tensor = Tensor(shape);
        in.read(reinterpret_cast<char*>(entry.tensor.data.data()),
                static_cast<std::streamsize>(entry.tensor.data.size() * sizeof(double)));
        if (!in) throw ParseError("ParamStore: truncated tensor data");
        store.entries_[name] = std::move(entry);
    }
    return store;
}

// ---- layer stacks -----------------------------------------------------------

LayerSpec mlp_layer(const std::string& name, int in, int out) {
    return {LayerSpec::Kind::SharedMlp, in, out, 1.0, name};
}
LayerSpec fc_layer(const std::string& name, int in, int out) {
    return {LayerSpec::Kind::FullyConnected, in, out, 1.0, name};
}
LayerSpec conv_layer(const std::string& name, int in, int out) {
    return {LayerSpec::Kind::Conv3x3, in, out, 1.0, name};
}
LayerSpec bn_layer(const std::string& name, int channels) {
    return {LayerSpec::Kind::BatchNorm, 0, channels, 1.0, name};
}

void init_stack_params(const std::vector<LayerSpec>& layers, ParamStore& store, Rng& rng) {
    auto uniform_tensor = [&](std::vector<int> shape, double bound) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = rng.uniform(-bound, bound);
        return t;
    };
    for (const LayerSpec& layer : layers) {
        switch (layer.kind) {
            case LayerSpec::Kind::SharedMlp:
            case LayerSpec::Kind::FullyConnected: {
                if (!store.contains(layer.name + ".weight")) {
                    double bound = 1.0 / std::sqrt(static_cast<double>(layer.in));
                    store.put(layer.name + ".weight",
                              uniform_tensor({layer.out, layer.in}, bound), true, true);
                    // nonzero bias keeps zero-padded inputs off the relu kink,
                    // where finite differences are undefined
                    store.put(layer.name + ".bias", uniform_tensor({layer.out}, bound), true,
                              false);
                }
                break;
            }
            case LayerSpec::Kind::Conv3x3: {
                if (!store.contains(layer.name + ".weight")) {
                    double bound = 1.0 / std::sqrt(static_cast<double>(layer.in) * 9.0);
                    store.put(layer.name + ".weight",
                              uniform_tensor({layer.out, layer.in, 3, 3}, bound), true, true);
                    store.put(layer.name + ".bias", uniform_tensor({layer.out}, bound), true,
                              false);
                }
                break;
            }
            case LayerSpec::Kind::BatchNorm: {
                if (!store.contains(layer.name + ".gamma")) {
                    Tensor gamma({layer.out});
                    std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
                    Tensor rv = gamma;
                    store.put(layer.name + ".gamma", std::move(gamma), true, false);
                    store.put(layer.name + ".beta", Tensor({layer.out}), true, false);
                    store.put(layer.name + ".rm", Tensor({layer.out}), false, false);
                    store.put(layer.name + ".rv", std::move(rv), false, false);
                }
                break;
            }
            default: break;
        }
    }
}

namespace {

int param_node(Graph& g, ParamStore& store, std::map<std::string, int>& param_nodes,
               const std::string& name) {
    auto it = param_nodes.find(name);
    if (it != param_nodes.end()) return it->second;
    const ParamStore::Entry& entry = store.at(name);
    int node = g.leaf(entry.tensor, entry.trainable);
    param_nodes.emplace(name, node);
    return node;
}

}  // namespace

int run_stack(Graph& g, const std::vector<LayerSpec>& layers, ParamStore& store,
              std::map<std::string, int>& param_nodes, int x, Mode mode, Rng& rng,
              std::vector<BnPending>* bn_pending) {
    int cur = x;
    for (const LayerSpec& layer : layers) {
        switch (layer.kind) {
            case LayerSpec::Kind::SharedMlp:
            case LayerSpec::Kind::FullyConnected: {
                int w = param_node(g, store, param_nodes, layer.name + ".weight");
                int b = param_node(g, store, param_nodes, layer.name + ".bias");
                cur = linear(g, cur, w, b);
                break;
            }
            case LayerSpec::Kind::Conv3x3: {
                int w = param_node(g, store, param_nodes, layer.name + ".weight");
                int b = param_node(g, store, param_nodes, layer.name + ".bias");
                cur = conv3x3(g, cur, w, b);
                break;
            }
            case LayerSpec::Kind::MaxPool3x3:
                cur = maxpool3x3(g, cur);
                break;
            case LayerSpec::Kind::MaxOverSet:
                cur = max_over_set(g, cur);
                break;
            case LayerSpec::Kind::Relu:
                cur = relu(g, cur);
                break;
            case LayerSpec::Kind::BatchNorm: {
                int gamma = param_node(g, store, param_nodes, layer.name + ".gamma");
                int beta = param_node(g, store, param_nodes, layer.name + ".beta");
                BnStats stats;
                cur = batchnorm(g, cur, gamma, beta, store.at(layer.name + ".rm").tensor,
                                store.at(layer.name + ".rv").tensor, mode,
                                mode == Mode::Train ? &stats : nullptr);
                if (mode == Mode::Train && bn_pending)
                    bn_pending->push_back({layer.name, std::move(stats)});
                break;
            }
            case LayerSpec::Kind::Dropout:
                cur = dropout(g, cur, layer.keep, mode, rng);
                break;
            case LayerSpec::Kind::Flatten:
                cur = flatten(g, cur);
                break;
        }
    }
    return cur;
}

ForwardResult forward(const std::vector<LayerSpec>& layers, ParamStore& store, const Tensor& x,
                      Mode mode, Rng rng) {
    ForwardResult result;
    result.in_node = result.tape.leaf(x, true);
    result.out_node = run_stack(result.tape, layers, store, result.param_nodes, result.in_node,
                                mode, rng, &result.bn_pending);
    result.output = result.tape.value(result.out_node);
    return result;
}

Gradients backward(ForwardResult& fwd, const Tensor& upstream) {
    fwd.tape.backward(fwd.out_node, upstream);
    Gradients grads;
    for (const auto& [name, node] : fwd.param_nodes) {
        if (!fwd.tape.requires_grad(node)) continue;
        grads.by_name[name] =
            fwd.tape.has_grad(node) ? fwd.tape.grad(node) : Tensor(fwd.tape.value(node).shape);
    }
    grads.input = fwd.tape.has_grad(fwd.in_node) ? fwd.tape.grad(fwd.in_node)
                                                 : Tensor(fwd.tape.value(fwd.in_node).shape);
    return grads;
}

void sgd_step(ParamStore& store, const std::map<std::string, Tensor>& grads, double lr) {
    for (const auto& [name, grad] : grads) {
        ParamStore::Entry& entry = store.at(name);
        if (!entry.trainable) continue;
        check(entry.tensor.same_shape(grad), "sgd_step: gradient shape mismatch for " + name);
        for (size_t i = 0; i < grad.data.size(); ++i) entry.tensor.data[i] -= lr * grad.data[i];
    }
}

void apply_bn_updates(ParamStore& store, std::span<const BnPending> pending, double momentum) {
    for (const BnPending& p : pending) {
        Tensor& rm = store.at(p.name + ".rm").tensor;
        Tensor& rv = store.at(p.name + ".rv").tensor;
        for (size_t i = 0; i < rm.data.size(); ++i) {
            rm.data[i] = momentum * rm.data[i] + (1.0 - momentum) * p.stats.mean.data[i];
            rv.data[i] = momentum * rv.data[i] + (1.0 - momentum) * p.stats.var.data[i];
        }
    }
}

GradCheckReport grad_check(const std::vector<LayerSpec>& layers, ParamStore& store,
                           const Tensor& x, const std::function<int(Graph&, int)>& loss_builder,
                           double h, Mode mode, std::uint64_t seed) {
    auto loss_value = [&](const Tensor& input) {
        Graph g;
        std::map<std::string, int> nodes;
        Rng rng(seed);
        int in = g.leaf(input, false);
        int out = run_stack(g, layers, store, nodes, in, mode, rng, nullptr);
        int loss = loss_builder(g, out);
        return g.value(loss).data[0];
    };

    // analytic gradients
    Graph g;
    std::map<std::string, int> nodes;
    Rng rng(seed);
    int in = g.leaf(x, true);
    int out = run_stack(g, layers, store, nodes, in, mode, rng, nullptr);
    int loss = loss_builder(g, out);
    g.backward(loss, Tensor::scalar(1.0));

    auto rel_err = [](double a, double n) {
        return std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-3});
    };

    GradCheckReport report;
    for (auto& [name, node] : nodes) {
        if (!g.requires_grad(node)) continue;
        Tensor& param = store.at(name).tensor;
        const Tensor analytic =
            g.has_grad(node) ? g.grad(node) : Tensor(param.shape);
        GradCheckReport::Entry entry{name, 0.0};
        for (int i = 0; i < param.numel(); ++i) {
            double saved = param.data[i];
            param.data[i] = saved + h;
            double up = loss_value(x);
            param.data[i] = saved - h;
            double down = loss_value(x);
            param.data[i] = saved;
            double numeric = (up - down) / (2.0 * h);
            entry.max_rel_err = std::max(entry.max_rel_err, rel_err(analytic.data[i], numeric));
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }

    // input gradient
    {
        const Tensor analytic = g.has_grad(in) ? g.grad(in) : Tensor(x.shape);
        GradCheckReport::Entry entry{"__input__", 0.0};
        Tensor probe = x;
        for (int i = 0; i < probe.numel(); ++i) {
            double saved = probe.data[i];
            probe.data[i] = saved + h;
            double up = loss_value(probe);
            probe.data[i] = saved - h;
            double down = loss_value(probe);
            probe.data[i] = saved;
            double numeric = (up - down) / (2.0 * h);
            entry.max_rel_err = std::max(entry.max_rel_err, rel_err(analytic.data[i], numeric));
        }
        report.worst = std::max(report.worst, entry.max_rel_err);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace normalforge::nn
