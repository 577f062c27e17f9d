#include "jsmtk/tape.hpp"

#include "jsmtk/errors.hpp"
#include "jsmtk/ops.hpp"

namespace jsmtk {

const Tensor &Var::value() const {
    if (!tape_) throw InputError("access to an invalid Var");
    return tape_->value(*this);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(*this); }

const Tape::Node &Tape::node(const Var &v) const {
    if (v.tape_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size())
        throw InputError("Var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id_)];
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, false, "constant"});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::variable(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, {}, true, "variable"});
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char *name) {
    bool any = false;
    for (const auto &in : inputs) {
        if (in.valid() && in.tape_ != this) throw InputError(std::string(name) + ": inputs live on another tape");
        any = any || (in.valid() && requires_grad(in));
    }
    if (!recording_ || !any) {
        nodes_.push_back(Node{std::move(value), {}, {}, false, name});
    } else {
        nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(backward), true, name});
    }
    return Var(this, static_cast<int>(nodes_.size() - 1));
}

const Tensor &Tape::value(const Var &v) const { return node(v).value; }
bool Tape::requires_grad(const Var &v) const { return node(v).requires_grad; }
const char *Tape::op_name(const Var &v) const { return node(v).name; }

std::vector<Var> Tape::gradient(const Var &root, const std::vector<Var> &wrt, bool create_graph) {
    if (node(root).value.size() != 1)
        throw InputError("gradient: root must be a scalar, got shape " + shape_str(node(root).value.shape()));
    const auto n = static_cast<std::size_t>(root.id_) + 1;

    // A node needs a gradient if some requested input is reachable through it.
    std::vector<bool> needed(n, false);
    for (const auto &w : wrt) {
        node(w);
        if (static_cast<std::size_t>(w.id_) < n && nodes_[static_cast<std::size_t>(w.id_)].requires_grad)
            needed[static_cast<std::size_t>(w.id_)] = true;
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (needed[i]) continue;
        for (const auto &in : nodes_[i].inputs)
            if (in.valid() && needed[static_cast<std::size_t>(in.id_)]) {
                needed[i] = true;
                break;
            }
    }

    const bool saved = recording_;
    recording_ = create_graph;
    std::vector<Var> grads(n);
    try {
        if (needed[n - 1]) grads[n - 1] = constant(Tensor(node(root).value.shape(), 1.0));
        for (std::size_t i = n; i-- > 0;) {
            if (!grads[i].valid() || !needed[i]) continue;
            // Copy: the deque may grow while the backward function records new nodes.
            const std::vector<Var> inputs = nodes_[i].inputs;
            const BackwardFn fn = nodes_[i].backward;
            if (!fn) continue;
            std::vector<bool> need(inputs.size(), false);
            bool any = false;
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                need[k] = inputs[k].valid() && needed[static_cast<std::size_t>(inputs[k].id_)];
                any = any || need[k];
            }
            if (!any) continue;
            const std::vector<Var> in_grads = fn(Var(this, static_cast<int>(i)), grads[i], need);
            for (std::size_t k = 0; k < inputs.size(); ++k) {
                if (!need[k] || k >= in_grads.size() || !in_grads[k].valid()) continue;
                auto &slot = grads[static_cast<std::size_t>(inputs[k].id_)];
                slot = slot.valid() ? ops::add(slot, in_grads[k]) : in_grads[k];
            }
        }
    } catch (...) {
        recording_ = saved;
        throw;
    }
    recording_ = saved;

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const auto &w : wrt) {
        const auto id = static_cast<std::size_t>(w.id_);
        if (id < n && grads[id].valid())
            out.push_back(grads[id]);
        else
            out.push_back(constant(Tensor(node(w).value.shape(), 0.0)));
    }
    return out;
}

} // namespace jsmtk
