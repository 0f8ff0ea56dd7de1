#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// Named, ordered collection of weight tensors; the unit of model exchange.
// Two sets are shape-compatible iff they carry the same names in the same
// order with identical shapes; linear combinations are only defined between
// shape-compatible sets.
class ParamSet {
public:
    using Entry = std::pair<std::string, Tensor>;

    void add(std::string name, Tensor value);
    bool has(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    bool shape_compatible(const ParamSet& other) const;
    bool bit_equal(const ParamSet& other) const;

    // entries whose name starts with `prefix`, in order
    ParamSet subset(const std::string& prefix) const;
    // overwrite entries under `prefix` with the matching entries of `src`;
    // StructuralError when a prefixed entry is missing or shaped differently
    void replace_prefix(const std::string& prefix, const ParamSet& src);

private:
    std::vector<Entry> entries_;
};

// sum_i alphas[i] * sets[i], accumulated in index order. Computed in
// reference-point form (w0 + sum_i alphas[i] * (wi - w0)) so that identical
// inputs, and the single-set case, reproduce the input bit for bit.
// Callers are responsible for sum(alphas) == 1.
ParamSet linear_combination(const std::vector<const ParamSet*>& sets,
                            const std::vector<double>& alphas);

// Versioned binary checkpoint; round-trips bit-exactly.
void save_params(const ParamSet& params, const std::string& path);
ParamSet load_params(const std::string& path);

// FNV-1a over entry names and little-endian payload bits, in entry order.
std::uint64_t params_checksum(const ParamSet& params);

} // namespace fedsim
