#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ymask/tensor.h"

namespace ymask {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t i) const { return value().dim(i); }
    std::size_t rank() const { return value().rank(); }
    bool requires_grad() const;

    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode recording. Nodes are appended in evaluation order, so the
/// node list is already topologically sorted.
template <typename T>
class Tape {
public:
    using Backward = std::function<void(Tape&, const Tensor<T>& grad_out)>;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool grad_enabled() const noexcept { return grad_enabled_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    // Leaf that never receives gradient.
    Var<T> constant(Tensor<T> value) {
        nodes_.push_back(Node{"const", {}, std::move(value), {}, false, nullptr});
        return Var<T>(this, nodes_.size() - 1);
    }

    // Leaf tracked by the address of `source` (a parameter or an input under
    // test). Watching the same tensor twice yields the same node, so shared
    // weights accumulate a single gradient.
    Var<T> watch(const Tensor<T>& source) {
        if (auto it = watched_.find(&source); it != watched_.end()) return Var<T>(this, it->second);
        nodes_.push_back(Node{"leaf", {}, source, {}, grad_enabled_, nullptr});
        watched_.emplace(&source, nodes_.size() - 1);
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> record(std::string_view op, Tensor<T> value, std::span<const Var<T>> inputs, Backward fn) {
        Node node{op, {}, std::move(value), {}, false, nullptr};
        node.inputs.reserve(inputs.size());
        for (const auto& in : inputs) {
            if (in.tape_ != this) throw TapeError(std::string(op) + ": input recorded on a different tape");
            node.inputs.push_back(in.id_);
            node.requires_grad = node.requires_grad || nodes_[in.id_].requires_grad;
        }
        if (node.requires_grad) node.backward = std::move(fn);
        nodes_.push_back(std::move(node));
        return Var<T>(this, nodes_.size() - 1);
    }

    Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward fn) {
        return record(op, std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()), std::move(fn));
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool needs_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::string_view op_name(std::size_t id) const { return nodes_.at(id).op; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }

    // Zero-initialized gradient buffer for node `id`, created on first use.
    Tensor<T>& grad_buffer(std::size_t id) {
        auto& n = nodes_.at(id);
        if (n.grad.empty()) n.grad = Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    void accumulate(std::size_t id, const Tensor<T>& g) {
        auto& n = nodes_.at(id);
        if (!n.requires_grad) return;
        if (g.shape() != n.value.shape()) {
            throw DimensionError("gradient shape " + shape_str(g.shape()) + " for node '" + std::string(n.op) +
                                 "' of shape " + shape_str(n.value.shape()));
        }
        if (n.grad.empty()) {
            n.grad = g;
            return;
        }
        auto dst = n.grad.data();
        auto src = g.data();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }

    /// Propagates d(loss)/d(node) to every reachable node. The tape must be
    /// reset before a second call.
    void backward(const Var<T>& loss) {
        if (loss.tape_ != this) throw TapeError("backward: loss is not recorded on this tape");
        if (backward_done_) throw TapeError("backward called twice without reset");
        auto& root = nodes_.at(loss.id_);
        if (root.value.numel() != 1) throw TapeError("backward: loss must be scalar, got " + shape_str(root.value.shape()));
        if (!root.requires_grad) throw TapeError("backward: loss is detached from every watched tensor");
        backward_done_ = true;
        root.grad = Tensor<T>(root.value.shape(), T(1));
        for (std::size_t id = loss.id_ + 1; id-- > 0;) {
            auto& n = nodes_[id];
            if (!n.backward || n.grad.empty()) continue;
            n.backward(*this, n.grad);
            // interior gradients and closures are no longer needed
            n.backward = nullptr;
            n.grad = Tensor<T>();
        }
    }

    // Gradient of a leaf after backward; nullptr when no gradient reached it.
    const Tensor<T>* grad(const Var<T>& v) const {
        const auto& n = nodes_.at(v.id_);
        return n.grad.empty() ? nullptr : &n.grad;
    }

    // Gradient for a watched tensor, zeros when it was unused or unreached.
    Tensor<T> grad_of(const Tensor<T>& source) const {
        auto it = watched_.find(&source);
        if (it == watched_.end() || nodes_[it->second].grad.empty()) return Tensor<T>::zeros(source.shape());
        return nodes_[it->second].grad;
    }

    bool watches(const Tensor<T>& source) const { return watched_.count(&source) != 0; }

    void reset() {
        nodes_.clear();
        watched_.clear();
        backward_done_ = false;
    }

private:
    friend class Var<T>;

    struct Node {
        std::string_view op;
        std::vector<std::size_t> inputs;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad;
        Backward backward;
    };

    bool grad_enabled_;
    bool backward_done_ = false;
    std::deque<Node> nodes_;
    std::unordered_map<const Tensor<T>*, std::size_t> watched_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
    if (!tape_) throw TapeError("use of an empty Var");
    return tape_->nodes_[id_].value;
}

template <typename T>
bool Var<T>::requires_grad() const {
    return tape_ && tape_->nodes_[id_].requires_grad;
}

}  // namespace ymask
