#pragma once

#include <span>
#include <string>
#include <vector>

namespace facepaint {

enum class OptimizerKind { sgd, adam };

std::string to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

// First-order update on a flat parameter vector. State is sized on first use.
class Optimizer {
public:
    Optimizer(OptimizerKind kind, double learning_rate);

    void step(std::span<double> params, std::span<const double> grads);

    OptimizerKind kind() const { return kind_; }
    double learning_rate() const { return lr_; }
    long steps_taken() const { return t_; }

private:
    OptimizerKind kind_;
    double lr_;
    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long t_ = 0;
    std::vector<double> m_;
    std::vector<double> v_;
};

}  // namespace facepaint
