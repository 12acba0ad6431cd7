#include "facepaint/params.hpp"

#include <functional>
#include <numeric>

#include "facepaint/errors.hpp"

namespace facepaint {

std::size_t ParamStore::add(std::string name, std::vector<int> shape) {
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                              std::multiplies<>());
    blocks_.push_back(ParamBlock{std::move(name), std::move(shape), values_.size(), count});
    values_.resize(values_.size() + count, 0.0);
    return blocks_.size() - 1;
}

std::span<double> ParamStore::block(std::size_t index) {
    const auto& b = blocks_.at(index);
    return std::span<double>(values_).subspan(b.offset, b.size);
}

std::span<const double> ParamStore::block(std::size_t index) const {
    const auto& b = blocks_.at(index);
    return std::span<const double>(values_).subspan(b.offset, b.size);
}

std::span<double> ParamStore::slice(std::vector<double>& buffer, std::size_t index) const {
    if (buffer.size() != values_.size()) throw ShapeMismatch("gradient buffer size mismatch");
    const auto& b = blocks_.at(index);
    return std::span<double>(buffer).subspan(b.offset, b.size);
}

std::size_t ParamStore::find(std::string_view name) const {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        if (blocks_[i].name == name) return i;
    }
    throw InvalidArgument("unknown parameter block: " + std::string(name));
}

}  // namespace facepaint
