#pragma once

#include <cstddef>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace spcl {

// Dense named tensor, row-major. Shape [] denotes a scalar (numel 1).
template <typename S>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<S> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shp, std::vector<S> values)
        : shape(std::move(shp)), data(std::move(values)) {
        if (data.size() != numel_of(shape))
            throw std::invalid_argument("Tensor: data length does not match shape");
    }

    static std::size_t numel_of(const std::vector<std::size_t>& shp) {
        return std::accumulate(shp.begin(), shp.end(), std::size_t{1},
                               std::multiplies<>());
    }

    static Tensor zeros(std::vector<std::size_t> shp) {
        std::size_t n = numel_of(shp);
        return Tensor(std::move(shp), std::vector<S>(n, S{0}));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }
};

// Ordered collection of named tensors; std::map gives the lexicographic,
// deterministic iteration order the rest of the toolkit relies on.
template <typename S>
struct ParamSetT {
    std::map<std::string, Tensor<S>> tensors;

    bool contains(const std::string& name) const { return tensors.count(name) > 0; }

    Tensor<S>& at(const std::string& name) {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw std::invalid_argument("ParamSet: no tensor named '" + name + "'");
        return it->second;
    }
    const Tensor<S>& at(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end())
            throw std::invalid_argument("ParamSet: no tensor named '" + name + "'");
        return it->second;
    }

    void put(const std::string& name, Tensor<S> t) {
        if (!tensors.emplace(name, std::move(t)).second)
            throw std::invalid_argument("ParamSet: duplicate tensor name '" + name + "'");
    }

    std::size_t size() const { return tensors.size(); }

    auto begin() { return tensors.begin(); }
    auto end() { return tensors.end(); }
    auto begin() const { return tensors.begin(); }
    auto end() const { return tensors.end(); }
};

// Returns an empty string when compatible, otherwise a diagnostic naming the
// first mismatched tensor (by name odering) or shape.
template <typename S1, typename S2>
std::string first_incompatibility(const ParamSetT<S1>& a, const ParamSetT<S2>& b) {
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    while (ia != a.tensors.end() || ib != b.tensors.end()) {
        if (ia == a.tensors.end()) return "tensor '" + ib->first + "' missing from first set";
        if (ib == b.tensors.end()) return "tensor '" + ia->first + "' missing from second set";
        if (ia->first != ib->first) {
            const std::string& lo = std::min(ia->first, ib->first);
            return "tensor '" + lo + "' present in only one set";
        }
        if (ia->second.shape != ib->second.shape)
            return "tensor '" + ia->first + "' shape mismatch";
        ++ia;
        ++ib;
    }
    return "";
}

template <typename S1, typename S2>
bool compatible(const ParamSetT<S1>& a, const ParamSetT<S2>& b) {
    return first_incompatibility(a, b).empty();
}

template <typename S1, typename S2>
void require_compatible(const ParamSetT<S1>& a, const ParamSetT<S2>& b,
                        const char* context) {
    std::string why = first_incompatibility(a, b);
    if (!why.empty())
        throw std::invalid_argument(std::string(context) + ": incompatible parameter sets: " + why);
}

inline ParamSetT<double> widen(const ParamSetT<float>& p) {
    ParamSetT<double> out;
    for (const auto& [name, t] : p) {
        std::vector<double> d(t.data.begin(), t.data.end());
        out.put(name, Tensor<double>(t.shape, std::move(d)));
    }
    return out;
}

inline ParamSetT<float> narrow(const ParamSetT<double>& p) {
    ParamSetT<float> out;
    for (const auto& [name, t] : p) {
        std::vector<float> d(t.data.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<float>(t.data[i]);
        out.put(name, Tensor<float>(t.shape, std::move(d)));
    }
    return out;
}

// a += b, elementwise over matching tensors
template <typename S>
void add_in_place(ParamSetT<S>& a, const ParamSetT<S>& b) {
    require_compatible(a, b, "add_in_place");
    auto ib = b.tensors.begin();
    for (auto& [name, t] : a) {
        const auto& src = ib->second.data;
        for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] += src[i];
        ++ib;
    }
}

template <typename S>
ParamSetT<S> zeros_like(const ParamSetT<S>& p) {
    ParamSetT<S> out;
    for (const auto& [name, t] : p) out.put(name, Tensor<S>::zeros(t.shape));
    return out;
}

using ParamSet = ParamSetT<float>;

} // namespace spcl
