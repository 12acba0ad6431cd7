#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace facepaint {

// Self-describing binary container used for predictor checkpoints, control
// branches and style tokens. Byte layout is documented in docs/container-format.md.
class Container {
public:
    static constexpr std::uint32_t kSchemaVersion = 1;

    struct Tensor {
        std::vector<std::uint32_t> shape;
        std::vector<double> values;
        friend bool operator==(const Tensor&, const Tensor&) = default;
    };
    using Value = std::variant<Tensor, std::int64_t, std::string>;

    void set_tensor(const std::string& name, std::vector<std::uint32_t> shape,
                    std::vector<double> values);
    void set_int(const std::string& name, std::int64_t value);
    void set_string(const std::string& name, std::string value);

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    const Tensor& tensor(const std::string& name) const;
    std::int64_t integer(const std::string& name) const;
    const std::string& string(const std::string& name) const;

    const std::map<std::string, Value>& entries() const { return entries_; }

    std::vector<std::uint8_t> to_bytes() const;
    static Container from_bytes(const std::vector<std::uint8_t>& bytes);

    void write(const std::filesystem::path& path) const;
    static Container read(const std::filesystem::path& path);

    friend bool operator==(const Container&, const Container&) = default;

private:
    std::map<std::string, Value> entries_;
};

}  // namespace facepaint
