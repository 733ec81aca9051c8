#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace entran::ad {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

// Dense 64-bit float buffer participating in a reverse-mode tape.
// Leaves persist across tapes; interior nodes are created per forward pass.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;

    std::int64_t size() const { return std::int64_t(data.size()); }

    double item() const {
        if (data.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape));
        return data[0];
    }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

inline std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline TensorPtr make_tensor(std::vector<int> shape, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    auto n = std::size_t(numel(t->shape));
    t->data.assign(n, 0.0);
    t->grad.assign(n, 0.0);
    t->requires_grad = requires_grad;
    return t;
}

inline TensorPtr make_tensor(std::vector<int> shape, std::vector<double> data, bool requires_grad = false) {
    auto t = make_tensor(std::move(shape), requires_grad);
    if (data.size() != t->data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(t->shape));
    t->data = std::move(data);
    return t;
}

inline TensorPtr scalar_tensor(double v, bool requires_grad = false) {
    return make_tensor({1}, {v}, requires_grad);
}

struct TapeRecord {
    const char* op;
    TensorPtr out;
    std::function<void()> backward;
};

// Ordered record of primitive applications. Single-threaded per tape.
// Also collects a "kink signature" per forward pass: one word per
// nonsmooth primitive (ReLU masks, arg-max indices). Finite-difference
// checks compare signatures of perturbed evaluations to detect that a
// perturbation crossed a kink.
class Tape {
public:
    explicit Tape(bool recording = true) : recording_(recording) {}

    bool recording() const { return recording_; }

    void record(const char* op, const TensorPtr& out, std::function<void()> backward) {
        if (recording_ && out->requires_grad)
            records_.push_back(TapeRecord{op, out, std::move(backward)});
    }

    void note_kink(std::uint64_t signature_word) { kinks_.push_back(signature_word); }

    const std::vector<std::uint64_t>& kink_signature() const { return kinks_; }

    std::size_t size() const { return records_.size(); }

    const TapeRecord& record_at(std::size_t i) const { return records_[i]; }

    // Populates grad for every tensor the loss depends on; gradients
    // accumulate additively across fan-out.
    void backward(const TensorPtr& loss) {
        if (loss->size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss->shape));
        bool on_tape = false;
        for (const auto& r : records_)
            if (r.out == loss) { on_tape = true; break; }
        if (!on_tape)
            throw std::invalid_argument("backward: loss tensor was not produced on this tape");
        loss->grad[0] += 1.0;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it)
            if (it->backward) it->backward();
    }

private:
    std::vector<TapeRecord> records_;
    std::vector<std::uint64_t> kinks_;
    bool recording_;
};

}  // namespace entran::ad
