#pragma once

#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "jsmtk/tensor.hpp"

namespace jsmtk {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
public:
    Var() = default;

    bool valid() const { return tape_ != nullptr; }
    Tape *tape() const { return tape_; }
    int id() const { return id_; }

    const Tensor &value() const;
    const Shape &shape() const { return value().shape(); }
    bool requires_grad() const;

private:
    friend class Tape;
    Var(Tape *tape, int id) : tape_(tape), id_(id) {}

    Tape *tape_ = nullptr;
    int id_ = -1;
};

// Computes the gradients of a node's inputs from the gradient of its output. It must
// build its result from recorded ops so the backward pass can itself be recorded.
// `need[k]` says whether input k's gradient is wanted; unwanted entries may be left
// invalid.
using BackwardFn = std::function<std::vector<Var>(const Var &out, const Var &grad_out, const std::vector<bool> &need)>;

// Wengert list of primitive operations in creation (hence topological) order. Backward
// passes append to the same list when create_graph is set, which is what makes
// gradients of gradients available.
class Tape {
public:
    Tape() = default;
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Tensor value);
    Var variable(Tensor value);

    // Records an op result. If recording is paused or no input requires a gradient the
    // result is stored as a constant.
    Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char *name);

    const Tensor &value(const Var &v) const;
    bool requires_grad(const Var &v) const;
    const char *op_name(const Var &v) const;
    std::size_t size() const { return nodes_.size(); }
    bool recording() const { return recording_; }

    // Reverse-mode gradients of a one-element root with respect to `wrt`. Inputs the root
    // does not depend on get zero tensors. With create_graph the returned gradients are
    // differentiable nodes of this tape.
    std::vector<Var> gradient(const Var &root, const std::vector<Var> &wrt, bool create_graph = false);

private:
    struct Node {
        Tensor value;
        std::vector<Var> inputs;
        BackwardFn backward;
        bool requires_grad = false;
        const char *name = "";
    };

    const Node &node(const Var &v) const;

    std::deque<Node> nodes_;
    bool recording_ = true;
};

} // namespace jsmtk
