#include "fedsim/params.hpp"

#include <cstring>
#include <fstream>

#include "fedsim/errors.hpp"

namespace fedsim {

void ParamSet::add(std::string name, Tensor value) {
    if (has(name)) throw StructuralError("paramset: duplicate entry '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
}

bool ParamSet::has(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return true;
    }
    return false;
}

const Tensor& ParamSet::get(const std::string& name) const {
    for (const auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw StructuralError("paramset: no entry '" + name + "'");
}

Tensor& ParamSet::get(const std::string& name) {
    for (auto& [n, t] : entries_) {
        if (n == name) return t;
    }
    throw StructuralError("paramset: no entry '" + name + "'");
}

bool ParamSet::shape_compatible(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].first != other.entries_[i].first) return false;
        if (!entries_[i].second.same_shape(other.entries_[i].second)) return false;
    }
    return true;
}

bool ParamSet::bit_equal(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].first != other.entries_[i].first) return false;
        if (!entries_[i].second.bit_equal(other.entries_[i].second)) return false;
    }
    return true;
}

ParamSet ParamSet::subset(const std::string& prefix) const {
    ParamSet out;
    for (const auto& [n, t] : entries_) {
        if (n.rfind(prefix, 0) == 0) out.add(n, t);
    }
    return out;
}

void ParamSet::replace_prefix(const std::string& prefix, const ParamSet& src) {
    for (auto& [n, t] : entries_) {
        if (n.rfind(prefix, 0) != 0) continue;
        const Tensor& repl = src.get(n);
        if (!repl.same_shape(t)) {
            throw StructuralError("paramset: shape mismatch replacing '" + n + "': " +
                                  t.shape_str() + " vs " + repl.shape_str());
        }
        t = repl;
    }
}

ParamSet linear_combination(const std::vector<const ParamSet*>& sets,
                            const std::vector<double>& alphas) {
    if (sets.empty()) throw StructuralError("linear_combination: empty input");
    if (sets.size() != alphas.size()) {
        throw StructuralError("linear_combination: " + std::to_string(sets.size()) + " sets vs " +
                              std::to_string(alphas.size()) + " coefficients");
    }
    const ParamSet& ref = *sets[0];
    for (std::size_t i = 1; i < sets.size(); ++i) {
        if (!ref.shape_compatible(*sets[i])) {
            throw StructuralError("linear_combination: set " + std::to_string(i) +
                                  " is not shape-compatible with set 0");
        }
    }
    // w0 + sum_{i>=1} alpha_i (w_i - w0): under the unit-sum convention the
    // first coefficient enters only through the identity alpha_0 = 1 - rest.
    ParamSet out = ref;
    for (std::size_t e = 0; e < out.size(); ++e) {
        Tensor& acc = out.entries()[e].second;
        const Tensor& base = ref.entries()[e].second;
        for (std::size_t i = 1; i < sets.size(); ++i) {
            const Tensor& wi = sets[i]->entries()[e].second;
            const double a = alphas[i];
            for (std::size_t j = 0; j < acc.size(); ++j) {
                acc[j] += a * (wi[j] - base[j]);
            }
        }
    }
    return out;
}

namespace {

constexpr char kMagic[8] = {'F', 'S', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("checkpoint: truncated " + what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint: truncated " + what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::istream& is, const std::string& what) {
    std::uint64_t bits = get_u64(is, what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

} // namespace

void save_params(const ParamSet& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params.entries()) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put_u64(os, d);
        for (std::size_t i = 0; i < t.size(); ++i) put_f64(os, t[i]);
    }
    if (!os) throw DataError("checkpoint: write failed on '" + path + "'");
}

ParamSet load_params(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
        throw DataError("checkpoint: bad magic in '" + path + "'");
    }
    std::uint32_t version = get_u32(is, "version");
    if (version != kVersion) {
        throw DataError("checkpoint: unsupported version " + std::to_string(version));
    }
    std::uint32_t count = get_u32(is, "entry count");
    ParamSet out;
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint32_t name_len = get_u32(is, "name length");
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw DataError("checkpoint: truncated name");
        std::uint32_t rank = get_u32(is, "rank");
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(get_u64(is, "dim"));
        std::vector<double> data(shape_size(shape));
        for (auto& v : data) v = get_f64(is, "payload");
        out.add(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

std::uint64_t params_checksum(const ParamSet& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& [name, t] : params.entries()) {
        mix(reinterpret_cast<const unsigned char*>(name.data()), name.size());
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double v = t[i];
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            unsigned char b[8];
            for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>((bits >> (8 * k)) & 0xff);
            mix(b, 8);
        }
    }
    return h;
}

} // namespace fedsim
