#pragma once

#include <functional>
#include <string>
#include <vector>

#include "elit/op_counter.hpp"
#include "elit/tensor.hpp"

namespace elit {

template <typename T>
struct Parameter {
    std::string name;
    Mat<T> value;
    Mat<T> grad;

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

// Handle to a node of a Graph.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// A rectangular block of the attention problem: rows
// [q_begin, q_begin + q_count) of the queries attend to rows
// [k_begin, k_begin + k_count) of the keys/values.
struct AttentionSegment {
    Index q_begin = 0;
    Index q_count = 0;
    Index k_begin = 0;
    Index k_count = 0;
};

// true = key visible to the query.
using KeyMask = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct AttentionLayout {
    std::vector<AttentionSegment> segments;
    // Either empty or one q_count x k_count mask per segment.
    std::vector<KeyMask> masks;
};

// Rotation angles per position; cols = head_dim / 2 (one per rotated pair).
template <typename T>
struct RopeTable {
    Mat<T> cos;
    Mat<T> sin;
};

// Reverse-mode tape over row-major matrices. Nodes are appended in
// evaluation order, so reverse creation order is a valid topological order.
template <typename T>
class Graph {
public:
    using M = Mat<T>;

    explicit Graph(bool record = true, OpCounter* counter = nullptr) : record_(record), counter_(counter) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var input(M value);
    Var param(Parameter<T>& p);

    const M& value(Var v) const { return nodes_[v.id].value; }
    // Empty when no gradient reached the node.
    const M& grad(Var v) const { return nodes_[v.id].grad; }
    bool recording() const { return record_; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(out)/d(out) = 1 for a 1x1 output.
    void backward(Var out);
    void backward(Var out, const M& seed);

    // y = x W (+ b)
    Var linear(Var x, Var w, Var b, CostTag tag);
    Var add(Var a, Var b);
    // y = x + tile(table) where x.rows() is a multiple of table.rows()
    Var add_tiled(Var x, Var table);
    Var scale(Var x, T s);
    // Per-sample modulation: y = x * (1 + scale[b]) + shift[b] for rows of sample b.
    Var modulate(Var x, Var shift, Var scale, Index rows_per_sample);
    // y = x + gate[b] * h
    Var gated_residual(Var x, Var h, Var gate, Index rows_per_sample);
    Var layer_norm(Var x, T eps);
    // RMS normalization of every head slice, scaled by a shared weight of size head_dim.
    Var head_rms_norm(Var x, Var weight, int heads, T eps);
    // Rotates consecutive pairs inside every head; row r uses table row r % table.rows().
    Var rope(Var x, const RopeTable<T>& table, int heads);
    Var attention(Var q, Var k, Var v, int heads, const AttentionLayout& layout, CostTag tag);
    Var silu(Var x);
    Var gelu(Var x);
    Var gather_rows(Var x, std::vector<Index> rows);
    Var slice_cols(Var x, Index begin, Index count);
    // Masked mean squared error against a constant target: mean over unmasked
    // elements of each sample, then mean over samples. Output is 1x1.
    Var masked_mse(Var pred, const M& target, const M& mask, Index rows_per_sample);

    // Softmax weights of an attention node, ordered [segment][head].
    const std::vector<M>& attention_probs(Var v) const { return nodes_[v.id].probs; }

private:
    struct Node {
        M value;
        M grad;
        bool needs_grad = false;
        std::function<void()> backward;
        std::vector<M> probs;
    };

    Var push(M value, bool needs_grad);
    bool needs(Var v) const { return record_ && nodes_[v.id].needs_grad; }
    M& grad_ref(Var v);
    void count_weight(const CostTag& tag, std::uint64_t macs);
    void count_activation(const CostTag& tag, std::uint64_t macs);

    bool record_;
    OpCounter* counter_;
    std::vector<Node> nodes_;
};

extern template class Graph<float>;
extern template class Graph<double>;

} // namespace elit
