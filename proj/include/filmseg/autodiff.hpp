#pragma once

// Reverse-mode differentiation over a linear tape.
//
// A Tape owns every value produced during one forward pass. Nodes are
// appended in execution order, so the tape is topologically sorted by
// construction and backward() is a single reverse sweep that visits each
// node once. Gradients live on the tape next to the value they belong to.

#include <atomic>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "filmseg/errors.hpp"
#include "filmseg/tensor.hpp"

#ifndef FILMSEG_CHECK_FINITE
#ifdef NDEBUG
#define FILMSEG_CHECK_FINITE 0
#else
#define FILMSEG_CHECK_FINITE 1
#endif
#endif

namespace filmseg {

// Handle to a node on a specific tape.
struct Var {
    std::uint32_t index = 0;
    std::uint32_t tape = 0;
};

namespace detail {
inline std::uint32_t next_tape_id() {
    static std::atomic<std::uint32_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}
} // namespace detail

template <typename T>
class Tape {
public:
    // Backward rule: reads grad(out) and accumulates into the inputs' grads.
    using BackwardFn = std::function<void(Tape&, Var out)>;

    Tape() : id_(detail::next_tape_id()) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) noexcept = default;
    Tape& operator=(Tape&&) noexcept = default;

    Var constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }
    Var parameter(Tensor<T> value) { return push("parameter", std::move(value), true, {}); }

    // Appends an op result. The node requires a gradient iff any input does.
    Var record(std::string op, Tensor<T> value, std::initializer_list<Var> inputs, BackwardFn backward) {
        bool needs = false;
        std::vector<Var> ins(inputs);
        for (Var v : inputs) {
            check(v);
            needs = needs || nodes_[v.index].requires_grad;
        }
#if FILMSEG_CHECK_FINITE
        if (!value.all_finite()) throw ValidationError("non-finite value produced by " + op);
#endif
        Var out = push(std::move(op), std::move(value), needs, needs ? std::move(backward) : BackwardFn{});
        nodes_.back().inputs = std::move(ins);
        return out;
    }

    const Tensor<T>& value(Var v) const {
        check(v);
        return nodes_[v.index].value;
    }

    bool requires_grad(Var v) const {
        check(v);
        return nodes_[v.index].requires_grad;
    }

    const std::string& op(Var v) const {
        check(v);
        return nodes_[v.index].op;
    }

    // Gradient of the last backward() loss with respect to v; zeros when v
    // did not influence the loss.
    const Tensor<T>& grad(Var v) {
        check(v);
        return grad_buffer(v);
    }

    // Mutable, lazily allocated gradient buffer; backward rules accumulate here.
    Tensor<T>& grad_buffer(Var v) {
        Node& n = nodes_[v.index];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape());
        return n.grad;
    }

    const std::vector<Var>& inputs(Var v) const {
        check(v);
        return nodes_[v.index].inputs;
    }

    Var at(std::size_t index) const {
        if (index >= nodes_.size()) throw UsageError("tape index out of range");
        return Var{static_cast<std::uint32_t>(index), id_};
    }

    bool has_grad(Var v) const { return !nodes_[v.index].grad.empty(); }

    void backward(Var loss) {
        if (loss.tape != id_ || loss.index >= nodes_.size()) {
            throw UsageError("backward(): loss was not produced on this tape");
        }
        if (nodes_[loss.index].value.size() != 1) {
            throw UsageError("backward(): loss must be scalar, got shape " +
                             shape_str(nodes_[loss.index].value.shape()));
        }
        for (Node& n : nodes_) n.grad = Tensor<T>();
        grad_buffer(loss).fill(T{1});
        for (std::size_t i = loss.index + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.backward || n.grad.empty()) continue;
            const Var out{static_cast<std::uint32_t>(i), id_};
            if (!fault_op_.empty() && n.op == fault_op_) {
                for (auto& g : n.grad.values()) g *= fault_scale_;
            }
            n.backward(*this, out);
        }
    }

    // Test hook: scales the incoming gradient of every node recorded under
    // `op`, corrupting that op's backward rule.
    void inject_fault(std::string op, T scale) {
        fault_op_ = std::move(op);
        fault_scale_ = scale;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    std::uint32_t id() const noexcept { return id_; }

private:
    struct Node {
        std::string op;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        BackwardFn backward;
        std::vector<Var> inputs;
    };

    Var push(std::string op, Tensor<T> value, bool requires_grad, BackwardFn backward) {
        nodes_.push_back(Node{std::move(op), std::move(value), Tensor<T>(), requires_grad, std::move(backward), {}});
        return Var{static_cast<std::uint32_t>(nodes_.size() - 1), id_};
    }

    void check(Var v) const {
        if (v.tape != id_ || v.index >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    }

    std::uint32_t id_;
    std::vector<Node> nodes_;
    std::string fault_op_;
    T fault_scale_{1};
};

} // namespace filmseg
