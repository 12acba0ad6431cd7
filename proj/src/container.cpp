#include "facepaint/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

#include "facepaint/backend.hpp"
#include "facepaint/errors.hpp"

namespace facepaint {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");

constexpr char kMagic[4] = {'F', 'P', 'C', 'T'};
enum class Tag : std::uint8_t { tensor = 1, integer = 2, text = 3 };

class Writer {
public:
    template <typename T>
    void put(T value) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        bytes.insert(bytes.end(), p, p + n);
    }
    std::vector<std::uint8_t> bytes;
};

class Reader {
public:
    Reader(const std::vector<std::uint8_t>& b, std::size_t limit) : bytes(b), end(limit) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T value;
        std::memcpy(&value, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return value;
    }
    std::string get_string(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
    void need(std::size_t n) const {
        if (pos + n > end) throw FormatError("container truncated");
    }

    const std::vector<std::uint8_t>& bytes;
    std::size_t end;
    std::size_t pos = 0;
};

std::uint64_t checksum(const std::uint8_t* data, std::size_t n) {
    return fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n));
}

}  // namespace

void Container::set_tensor(const std::string& name, std::vector<std::uint32_t> shape,
                           std::vector<double> values) {
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                                              std::multiplies<>());
    if (count != values.size()) {
        throw ShapeMismatch("tensor '" + name + "' shape does not match value count");
    }
    entries_[name] = Tensor{std::move(shape), std::move(values)};
}

void Container::set_int(const std::string& name, std::int64_t value) { entries_[name] = value; }

void Container::set_string(const std::string& name, std::string value) {
    entries_[name] = std::move(value);
}

const Container::Tensor& Container::tensor(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("missing entry '" + name + "'");
    if (const auto* t = std::get_if<Tensor>(&it->second)) return *t;
    throw FormatError("entry '" + name + "' is not a tensor");
}

std::int64_t Container::integer(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("missing entry '" + name + "'");
    if (const auto* v = std::get_if<std::int64_t>(&it->second)) return *v;
    throw FormatError("entry '" + name + "' is not an integer");
}

const std::string& Container::string(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw FormatError("missing entry '" + name + "'");
    if (const auto* v = std::get_if<std::string>(&it->second)) return *v;
    throw FormatError("entry '" + name + "' is not a string");
}

std::vector<std::uint8_t> Container::to_bytes() const {
    Writer w;
    w.put_bytes(kMagic, 4);
    w.put<std::uint32_t>(kSchemaVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(entries_.size()));
    for (const auto& [name, value] : entries_) {
        if (name.size() > 0xffff) throw FormatError("entry name too long");
        w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.put_bytes(name.data(), name.size());
        if (const auto* t = std::get_if<Tensor>(&value)) {
            w.put(Tag::tensor);
            w.put<std::uint8_t>(static_cast<std::uint8_t>(t->shape.size()));
            for (auto d : t->shape) w.put<std::uint32_t>(d);
            w.put_bytes(t->values.data(), t->values.size() * sizeof(double));
        } else if (const auto* i = std::get_if<std::int64_t>(&value)) {
            w.put(Tag::integer);
            w.put<std::int64_t>(*i);
        } else {
            const auto& s = std::get<std::string>(value);
            w.put(Tag::text);
            w.put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
            w.put_bytes(s.data(), s.size());
        }
    }
    w.put<std::uint64_t>(checksum(w.bytes.data(), w.bytes.size()));
    return std::move(w.bytes);
}

Container Container::from_bytes(const std::vector<std::uint8_t>& bytes) {
    if (bytes.size() < 4 + 4 + 4 + 8) throw FormatError("container too short");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("not a facepaint container");

    const std::size_t body = bytes.size() - 8;
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body, 8);
    if (stored != checksum(bytes.data(), body)) throw FormatError("container checksum mismatch");

    Reader r(bytes, body);
    r.pos = 4;
    const auto version = r.get<std::uint32_t>();
    if (version != kSchemaVersion) {
        throw VersionMismatch("container schema version " + std::to_string(version) +
                              " is not supported (expected " + std::to_string(kSchemaVersion) +
                              ")");
    }
    const auto count = r.get<std::uint32_t>();
    Container c;
    for (std::uint32_t e = 0; e < count; ++e) {
        const auto name_len = r.get<std::uint16_t>();
        std::string name = r.get_string(name_len);
        const auto tag = static_cast<Tag>(r.get<std::uint8_t>());
        switch (tag) {
            case Tag::tensor: {
                const auto rank = r.get<std::uint8_t>();
                std::vector<std::uint32_t> shape(rank);
                std::size_t n = 1;
                for (auto& d : shape) {
                    d = r.get<std::uint32_t>();
                    n *= d;
                }
                r.need(n * sizeof(double));
                std::vector<double> values(n);
                std::memcpy(values.data(), bytes.data() + r.pos, n * sizeof(double));
                r.pos += n * sizeof(double);
                c.set_tensor(name, std::move(shape), std::move(values));
                break;
            }
            case Tag::integer:
                c.set_int(name, r.get<std::int64_t>());
                break;
            case Tag::text: {
                const auto len = r.get<std::uint32_t>();
                c.set_string(name, r.get_string(len));
                break;
            }
            default:
                throw FormatError("unknown entry tag in '" + name + "'");
        }
    }
    if (r.pos != body) throw FormatError("trailing bytes in container");
    return c;
}

void Container::write(const std::filesystem::path& path) const {
    const auto bytes = to_bytes();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

Container Container::read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return from_bytes(bytes);
}

}  // namespace facepaint
