#pragma once

#include <functional>

#include "ops.hpp"

namespace entran::ad {

struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
    std::vector<int> skipped;  // coordinates whose perturbation crossed a ReLU/arg-max kink
    bool pass = false;

    bool all_skipped() const { return checked == 0 && !skipped.empty(); }
};

// Compares tape gradients of a scalar-valued function against central finite
// differences, coordinate by coordinate. A coordinate is reported (not failed)
// as skipped when the two perturbed evaluations disagree on the kink
// signature, i.e. the interval [x-eps, x+eps] straddles a ReLU boundary or an
// arg-max tie.
inline GradCheckResult grad_check(const std::function<TensorPtr(Tape&, const TensorPtr&)>& f, const TensorPtr& at,
                                  double eps = 1e-5, double tol = 1e-4) {
    if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");
    GradCheckResult res;

    at->requires_grad = true;
    at->zero_grad();
    Tape tape;
    auto loss = f(tape, at);
    if (loss->size() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    tape.backward(loss);
    std::vector<double> analytic = at->grad;

    auto eval = [&](std::vector<std::uint64_t>& sig_out) {
        Tape t(false);
        double v = f(t, at)->item();
        sig_out = t.kink_signature();
        return v;
    };

    for (std::size_t i = 0; i < at->data.size(); ++i) {
        double saved = at->data[i];
        std::vector<std::uint64_t> sig_plus, sig_minus;
        at->data[i] = saved + eps;
        double fp = eval(sig_plus);
        at->data[i] = saved - eps;
        double fm = eval(sig_minus);
        at->data[i] = saved;
        if (sig_plus != sig_minus) {
            res.skipped.push_back(int(i));
            continue;
        }
        double fd = (fp - fm) / (2.0 * eps);
        double denom = std::max({std::abs(analytic[i]), std::abs(fd), 1e-3});
        double rel = std::abs(analytic[i] - fd) / denom;
        res.max_rel_err = std::max(res.max_rel_err, rel);
        ++res.checked;
    }
    res.pass = res.max_rel_err < tol;
    return res;
}

}  // namespace entran::ad
