#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace facepaint {

struct ParamBlock {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

// Named tensors packed into one flat buffer. Optimizers and finite-difference
// probes work on the flat view; layers address their block by index.
class ParamStore {
public:
    std::size_t add(std::string name, std::vector<int> shape);

    std::span<double> block(std::size_t index);
    std::span<const double> block(std::size_t index) const;
    // Same block slice taken from a buffer laid out like this store (gradients).
    std::span<double> slice(std::vector<double>& buffer, std::size_t index) const;

    std::span<double> flat() { return values_; }
    std::span<const double> flat() const { return values_; }
    std::size_t size() const { return values_.size(); }

    const std::vector<ParamBlock>& blocks() const { return blocks_; }
    std::size_t find(std::string_view name) const;

    std::vector<double> zeros_like() const { return std::vector<double>(values_.size(), 0.0); }

    friend bool operator==(const ParamStore& a, const ParamStore& b) {
        return a.values_ == b.values_;
    }

private:
    std::vector<ParamBlock> blocks_;
    std::vector<double> values_;
};

}  // namespace facepaint
