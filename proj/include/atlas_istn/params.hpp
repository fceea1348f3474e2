#pragma once

#include <algorithm>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "atlas_istn/tensor.hpp"

namespace atlas_istn {

// Named trainable tensors in insertion order. Names are unique.
template <class T>
class ParamSet {
public:
    using Entry = std::pair<std::string, Tensor<T>>;

    Tensor<T>& add(const std::string& name, Tensor<T> value) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        value.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.emplace_back(name, std::move(value));
        return entries_.back().second;
    }

    const Tensor<T>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
        return entries_[it->second].second;
    }
    Tensor<T>& at(const std::string& name) {
        return const_cast<Tensor<T>&>(static_cast<const ParamSet&>(*this).at(name));
    }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return entries_.size(); }
    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

    // Independent copy (new buffers, no shared gradients).
    ParamSet clone() const {
        ParamSet out;
        for (const auto& [name, t] : entries_) out.add(name, t.detach());
        return out;
    }

    bool values_equal(const ParamSet& other) const {
        if (other.size() != size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            const auto& [na, ta] = entries_[i];
            const auto& [nb, tb] = other.entries_[i];
            if (na != nb || ta.shape() != tb.shape() ||
                !std::equal(ta.data().begin(), ta.data().end(), tb.data().begin()))
                return false;
        }
        return true;
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace atlas_istn
