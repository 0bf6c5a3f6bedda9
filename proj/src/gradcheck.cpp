#include "vla/gradcheck.hpp"

#include <cmath>

namespace vla {

double grad_check(const TensorFn& f, const Shape& shape, const std::vector<double>& point, double h) {
    std::vector<double> analytic(point.size(), 0.0);
    {
        Tape tape;
        Tensor x = tape.input(shape, point);
        Tensor loss = f(tape, x);
        tape.backward(loss);
        if (x.has_grad()) analytic = x.grad();
    }
    auto eval_at = [&](const std::vector<double>& p) {
        Tape tape(false);
        Tensor x = tape.input(shape, p);
        return f(tape, x).item();
    };
    double worst = 0.0;
    std::vector<double> p = point;
    for (std::size_t i = 0; i < p.size(); ++i) {
        double keep = p[i];
        p[i] = keep + h;
        double fp = eval_at(p);
        p[i] = keep - h;
        double fm = eval_at(p);
        p[i] = keep;
        double numeric = (fp - fm) / (2.0 * h);
        double rel = std::abs(analytic[i] - numeric) /
                     (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

double grad_check_coords(const std::function<double()>& eval, std::vector<double>& values,
                         const std::vector<double>& analytic_grad,
                         const std::vector<std::size_t>& coords, double h) {
    double worst = 0.0;
    for (std::size_t idx : coords) {
        double keep = values[idx];
        values[idx] = keep + h;
        double fp = eval();
        values[idx] = keep - h;
        double fm = eval();
        values[idx] = keep;
        double numeric = (fp - fm) / (2.0 * h);
        double rel = std::abs(analytic_grad[idx] - numeric) /
                     (std::abs(analytic_grad[idx]) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace vla
