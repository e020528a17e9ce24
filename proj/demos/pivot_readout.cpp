// Length equalization of three pivots onto a five-token target, and the
// resulting reconstruction loss, for both readouts.

#include <iomanip>
#include <iostream>

#include "bai/objective.hpp"

namespace {

void print_rows(const char* title, const bai::Tensor<double>& t) {
    std::cout << title << "\n";
    const std::size_t h = t.shape().back();
    for (std::size_t r = 0; r < t.numel() / h; ++r) {
        std::cout << "  ";
        for (std::size_t k = 0; k < h; ++k) std::cout << std::setw(9) << std::fixed << std::setprecision(4) << t[r * h + k];
        std::cout << "\n";
    }
}

}  // namespace

int main() {
    bai::Rng rng(3);
    std::normal_distribution<double> n(0.0, 1.0);
    auto randn = [&](bai::Shape s) {
        std::vector<double> v(bai::numel_of(s));
        for (auto& x : v) x = n(rng);
        return bai::Tensor<double>(std::move(s), std::move(v));
    };

    const auto pivots = randn({1, 3, 4});
    const auto targets = randn({1, 5, 4});
    print_rows("pivots E", pivots);
    print_rows("targets D", targets);

    const auto r = bai::equalize_transformer(pivots, targets, {}, {});
    print_rows("attention readout R", r);
    std::cout << "beta = " << bai::bai_mse(r, targets, {}).item() << "\n";

    std::vector<bai::ExpansionPivot<double>> groups{{2, randn({1, 2, 4}), randn({1, 2, 4})}, {3, randn({1, 3, 4}), randn({1, 3, 4})}};
    const auto re = bai::equalize_expansion(groups, targets, {});
    print_rows("expansion readout R", re);
    std::cout << "beta = " << bai::bai_mse(re, targets, {}).item() << "\n";
    return 0;
}
