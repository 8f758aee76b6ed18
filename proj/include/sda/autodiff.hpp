#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "tensor.hpp"

namespace sda {

// Reverse-mode autodiff over a tape of shared nodes. Graphs are rebuilt per
// step; leaves persist across steps and accumulate gradients until cleared.
struct Node {
    Tensor val;
    Tensor grad;
    bool has_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> back;
    uint64_t id = 0;

    void ensure_grad() {
        if (!has_grad) {
            grad = Tensor(val.rows, val.cols);
            has_grad = true;
        }
    }
};

using NodePtr = std::shared_ptr<Node>;

inline uint64_t next_node_id() {
    static std::atomic<uint64_t> counter{0};
    return ++counter;
}

inline NodePtr make_node(Tensor val, std::vector<NodePtr> parents, std::function<void(Node&)> back) {
    auto n = std::make_shared<Node>();
    n->val = std::move(val);
    n->parents = std::move(parents);
    n->back = std::move(back);
    n->id = next_node_id();
    return n;
}

class Var {
public:
    NodePtr node;

    Var() = default;
    explicit Var(NodePtr n) : node(std::move(n)) {}

    static Var leaf(Tensor t) { return Var(make_node(std::move(t), {}, nullptr)); }
    static Var constant(Tensor t) { return leaf(std::move(t)); }

    bool defined() const { return node != nullptr; }
    const Tensor& value() const { return node->val; }
    Tensor& value_mut() { return node->val; }

    const Tensor& grad() const {
        node->ensure_grad();
        return node->grad;
    }

    void zero_grad() {
        if (!node) return;
        node->grad = Tensor(node->val.rows, node->val.cols);
        node->has_grad = true;
    }

    // Accumulates d(this)/d(leaf) into every reachable leaf. Requires a
    // scalar root. Node ids increase with creation order, so sorting the
    // reachable set by id descending is a valid reverse topological order.
    void backward() const {
        if (!node) throw std::logic_error("backward: undefined Var");
        if (node->val.size() != 1) throw std::logic_error("backward: root must be scalar");

        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        std::vector<Node*> stack{node.get()};
        seen.insert(node.get());
        while (!stack.empty()) {
            Node* n = stack.back();
            stack.pop_back();
            order.push_back(n);
            for (const auto& p : n->parents)
                if (seen.insert(p.get()).second) stack.push_back(p.get());
        }
        std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

        node->ensure_grad();
        node->grad.v[0] += 1.0;
        for (Node* n : order)
            if (n->back && n->has_grad) n->back(*n);
    }
};

// ---- elementwise and arithmetic ops ----

inline Var add(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    for (int i = 0; i < out.size(); ++i) out.v[i] += b.value().v[i];
    NodePtr pa = a.node, pb = b.node;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) {
            pa->grad.v[i] += n.grad.v[i];
            pb->grad.v[i] += n.grad.v[i];
        }
    }));
}

inline Var sub(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    for (int i = 0; i < out.size(); ++i) out.v[i] -= b.value().v[i];
    NodePtr pa = a.node, pb = b.node;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) {
            pa->grad.v[i] += n.grad.v[i];
            pb->grad.v[i] -= n.grad.v[i];
        }
    }));
}

inline Var mul(const Var& a, const Var& b) {
    check_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (int i = 0; i < out.size(); ++i) out.v[i] *= b.value().v[i];
    NodePtr pa = a.node, pb = b.node;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) {
            pa->grad.v[i] += n.grad.v[i] * pb->val.v[i];
            pb->grad.v[i] += n.grad.v[i] * pa->val.v[i];
        }
    }));
}

inline Var neg(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = -x;
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] -= n.grad.v[i];
    }));
}

inline Var smul(const Var& a, double c) {
    Tensor out = a.value();
    for (double& x : out.v) x *= c;
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa, c](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += c * n.grad.v[i];
    }));
}

inline Var sadd(const Var& a, double c) {
    Tensor out = a.value();
    for (double& x : out.v) x += c;
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += n.grad.v[i];
    }));
}

// m x n plus a 1 x n row vector broadcast down the rows.
inline Var add_rowvec(const Var& a, const Var& r) {
    const Tensor& av = a.value();
    const Tensor& rv = r.value();
    if (rv.rows != 1 || rv.cols != av.cols) throw std::invalid_argument("add_rowvec: need 1 x cols vector");
    Tensor out = av;
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < av.cols; ++j) out.at(i, j) += rv.at(0, j);
    NodePtr pa = a.node, pr = r.node;
    return Var(make_node(std::move(out), {pa, pr}, [pa, pr](Node& n) {
        pa->ensure_grad();
        pr->ensure_grad();
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) {
                pa->grad.at(i, j) += n.grad.at(i, j);
                pr->grad.at(0, j) += n.grad.at(i, j);
            }
    }));
}

inline Var matmul(const Var& a, const Var& b) {
    Tensor out = matmul(a.value(), b.value());
    NodePtr pa = a.node, pb = b.node;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        Tensor ga = matmul_nt(n.grad, pb->val);
        Tensor gb = matmul_tn(pa->val, n.grad);
        for (int i = 0; i < ga.size(); ++i) pa->grad.v[i] += ga.v[i];
        for (int i = 0; i < gb.size(); ++i) pb->grad.v[i] += gb.v[i];
    }));
}

inline Var vexp(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = std::exp(x);
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += n.grad.v[i] * n.val.v[i];
    }));
}

inline Var vlog(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) {
        if (x <= 0.0) throw std::domain_error("vlog: non-positive input");
        x = std::log(x);
    }
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += n.grad.v[i] / pa->val.v[i];
    }));
}

inline double sigmoid_scalar(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = sigmoid_scalar(x);
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) {
            const double s = n.val.v[i];
            pa->grad.v[i] += n.grad.v[i] * s * (1.0 - s);
        }
    }));
}

// log(1 + exp(x)) computed without overflow; derivative is sigmoid(x).
inline Var softplus(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += n.grad.v[i] * sigmoid_scalar(pa->val.v[i]);
    }));
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = std::max(x, 0.0);
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i)
            if (pa->val.v[i] > 0.0) pa->grad.v[i] += n.grad.v[i];
    }));
}

inline Var square(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x *= x;
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i) pa->grad.v[i] += 2.0 * n.grad.v[i] * pa->val.v[i];
    }));
}

// sqrt(max(x, 0)) with subgradient 0 at x <= 0, so exact zeros stay
// differentiable instead of producing NaN.
inline Var sqrt_safe(const Var& a) {
    Tensor out = a.value();
    for (double& x : out.v) x = x > 0.0 ? std::sqrt(x) : 0.0;
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.size(); ++i)
            if (pa->val.v[i] > 0.0) pa->grad.v[i] += n.grad.v[i] * 0.5 / n.val.v[i];
    }));
}

inline Var vsum(const Var& a) {
    double s = 0.0;
    for (double x : a.value().v) s += x;
    NodePtr pa = a.node;
    return Var(make_node(Tensor::scalar(s), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        const double g = n.grad.v[0];
        for (double& x : pa->grad.v) x += g;
    }));
}

inline Var vmean(const Var& a) {
    if (a.value().size() == 0) throw std::invalid_argument("vmean: empty tensor");
    return smul(vsum(a), 1.0 / a.value().size());
}

inline Var row_sums(const Var& a) {
    const Tensor& av = a.value();
    Tensor out(av.rows, 1);
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < av.cols; ++j) out.at(i, 0) += av.at(i, j);
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < pa->grad.rows; ++i)
            for (int j = 0; j < pa->grad.cols; ++j) pa->grad.at(i, j) += n.grad.at(i, 0);
    }));
}

// Row-wise log(sum(exp(.))) with max shift; stable for large logits.
inline Var logsumexp_rows(const Var& a) {
    const Tensor& av = a.value();
    if (av.cols < 1) throw std::invalid_argument("logsumexp_rows: empty rows");
    Tensor out(av.rows, 1);
    for (int i = 0; i < av.rows; ++i) {
        double mx = av.at(i, 0);
        for (int j = 1; j < av.cols; ++j) mx = std::max(mx, av.at(i, j));
        double s = 0.0;
        for (int j = 0; j < av.cols; ++j) s += std::exp(av.at(i, j) - mx);
        out.at(i, 0) = mx + std::log(s);
    }
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < pa->grad.rows; ++i) {
            const double g = n.grad.at(i, 0);
            if (g == 0.0) continue;
            for (int j = 0; j < pa->grad.cols; ++j)
                pa->grad.at(i, j) += g * std::exp(pa->val.at(i, j) - n.val.at(i, 0));
        }
    }));
}

inline Var gather_rows(const Var& a, const std::vector<int>& idx) {
    const Tensor& av = a.value();
    Tensor out(static_cast<int>(idx.size()), av.cols);
    for (size_t t = 0; t < idx.size(); ++t) {
        if (idx[t] < 0 || idx[t] >= av.rows) throw std::out_of_range("gather_rows: index out of range");
        for (int j = 0; j < av.cols; ++j) out.at(static_cast<int>(t), j) = av.at(idx[t], j);
    }
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa, idx](Node& n) {
        pa->ensure_grad();
        for (size_t t = 0; t < idx.size(); ++t)
            for (int j = 0; j < n.grad.cols; ++j) pa->grad.at(idx[t], j) += n.grad.at(static_cast<int>(t), j);
    }));
}

// out[i] = a[i, idx[i]]; one column index per row.
inline Var select_per_row(const Var& a, const std::vector<int>& idx) {
    const Tensor& av = a.value();
    if (static_cast<int>(idx.size()) != av.rows) throw std::invalid_argument("select_per_row: need one index per row");
    Tensor out(av.rows, 1);
    for (int i = 0; i < av.rows; ++i) {
        if (idx[i] < 0 || idx[i] >= av.cols) throw std::out_of_range("select_per_row: index out of range");
        out.at(i, 0) = av.at(i, idx[i]);
    }
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa, idx](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.rows; ++i) pa->grad.at(i, idx[i]) += n.grad.at(i, 0);
    }));
}

// out[t] = a[ri[t], ci[t]]; gradient scatters back to the picked entries,
// which is the subgradient of value-dependent max/min selections.
inline Var gather2(const Var& a, const std::vector<int>& ri, const std::vector<int>& ci) {
    if (ri.size() != ci.size()) throw std::invalid_argument("gather2: index lists differ in length");
    const Tensor& av = a.value();
    Tensor out(static_cast<int>(ri.size()), 1);
    for (size_t t = 0; t < ri.size(); ++t) {
        if (ri[t] < 0 || ri[t] >= av.rows || ci[t] < 0 || ci[t] >= av.cols)
            throw std::out_of_range("gather2: index out of range");
        out.at(static_cast<int>(t), 0) = av.at(ri[t], ci[t]);
    }
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa, ri, ci](Node& n) {
        pa->ensure_grad();
        for (size_t t = 0; t < ri.size(); ++t) pa->grad.at(ri[t], ci[t]) += n.grad.at(static_cast<int>(t), 0);
    }));
}

inline Var concat_cols(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.rows != bv.rows) throw std::invalid_argument("concat_cols: row counts differ");
    Tensor out(av.rows, av.cols + bv.cols);
    for (int i = 0; i < av.rows; ++i) {
        for (int j = 0; j < av.cols; ++j) out.at(i, j) = av.at(i, j);
        for (int j = 0; j < bv.cols; ++j) out.at(i, av.cols + j) = bv.at(i, j);
    }
    NodePtr pa = a.node, pb = b.node;
    const int ac = av.cols;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb, ac](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        for (int i = 0; i < n.grad.rows; ++i) {
            for (int j = 0; j < ac; ++j) pa->grad.at(i, j) += n.grad.at(i, j);
            for (int j = ac; j < n.grad.cols; ++j) pb->grad.at(i, j - ac) += n.grad.at(i, j);
        }
    }));
}

inline Var slice_cols(const Var& a, int c0, int c1) {
    const Tensor& av = a.value();
    if (c0 < 0 || c1 > av.cols || c0 >= c1) throw std::invalid_argument("slice_cols: bad column range");
    Tensor out(av.rows, c1 - c0);
    for (int i = 0; i < av.rows; ++i)
        for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
    NodePtr pa = a.node;
    return Var(make_node(std::move(out), {pa}, [pa, c0](Node& n) {
        pa->ensure_grad();
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) pa->grad.at(i, c0 + j) += n.grad.at(i, j);
    }));
}

// out[i][j] = squared Euclidean distance between row i of a and row j of b.
inline Var pairwise_sqdist(const Var& a, const Var& b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (av.cols != bv.cols) throw std::invalid_argument("pairwise_sqdist: feature dims differ");
    Tensor out(av.rows, bv.rows);
    for (int i = 0; i < av.rows; ++i)
        for (int j = 0; j < bv.rows; ++j) out.at(i, j) = sqdist_rows(av, i, bv, j);
    NodePtr pa = a.node, pb = b.node;
    return Var(make_node(std::move(out), {pa, pb}, [pa, pb](Node& n) {
        pa->ensure_grad();
        pb->ensure_grad();
        for (int i = 0; i < n.grad.rows; ++i)
            for (int j = 0; j < n.grad.cols; ++j) {
                const double g = n.grad.at(i, j);
                if (g == 0.0) continue;
                for (int k = 0; k < pa->val.cols; ++k) {
                    const double d = pa->val.at(i, k) - pb->val.at(j, k);
                    pa->grad.at(i, k) += 2.0 * g * d;
                    pb->grad.at(j, k) -= 2.0 * g * d;
                }
            }
    }));
}

}  // namespace sda
