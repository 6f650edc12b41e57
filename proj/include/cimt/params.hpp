#pragma once

#include <map>
#include <string>
#include <vector>

#include "cimt/errors.hpp"
#include "cimt/tensor.hpp"

namespace cimt {

// Named parameter tensors for a model. Keys are dotted paths
// ("backbone.enc0.conv1.w"). Iteration order is the sorted key order, which
// keeps optimizer walks and checkpoints deterministic.
template <typename T>
class ParamStoreT {
public:
    using Map = std::map<std::string, TensorT<T>>;

    void put(const std::string& name, TensorT<T> t) {
        if (map_.count(name)) throw ContractError("param already present: " + name);
        map_.emplace(name, std::move(t));
    }

    bool has(const std::string& name) const { return map_.count(name) != 0; }

    const TensorT<T>& get(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw ContractError("missing param: " + name);
        return it->second;
    }

    TensorT<T>& get(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw ContractError("missing param: " + name);
        return it->second;
    }

    size_t size() const { return map_.size(); }
    typename Map::iterator begin() { return map_.begin(); }
    typename Map::iterator end() { return map_.end(); }
    typename Map::const_iterator begin() const { return map_.begin(); }
    typename Map::const_iterator end() const { return map_.end(); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(map_.size());
        for (const auto& [k, v] : map_) out.push_back(k);
        return out;
    }

    void set_requires_grad_prefix(const std::string& prefix, bool flag) {
        for (auto& [k, v] : map_)
            if (k.rfind(prefix, 0) == 0) v.set_requires_grad(flag);
    }

    void set_requires_grad_all(bool flag) {
        for (auto& [k, v] : map_) v.set_requires_grad(flag);
    }

    void zero_grad_all() {
        for (auto& [k, v] : map_) v.zero_grad();
    }

    int64_t numel() const {
        int64_t n = 0;
        for (const auto& [k, v] : map_) n += v.numel();
        return n;
    }

    // Order-independent digest of names, shapes, and raw values.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [k, v] : map_) {
            h = fnv1a(k.data(), k.size(), h);
            for (int e : v.shape()) h = fnv1a(&e, sizeof(e), h);
            h = fnv1a(v.values().data(), v.values().size() * sizeof(T), h);
        }
        return h;
    }

    template <typename U>
    ParamStoreT<U> cast() const {
        ParamStoreT<U> out;
        for (const auto& [k, v] : map_) {
            TensorT<U> t = TensorT<U>::zeros(v.shape());
            for (int64_t i = 0; i < v.numel(); ++i)
                t.values()[static_cast<size_t>(i)] = static_cast<U>(v.values()[static_cast<size_t>(i)]);
            t.set_requires_grad(v.requires_grad());
            out.put(k, std::move(t));
        }
        return out;
    }

private:
    Map map_;
};

using ParamStore = ParamStoreT<float>;
using ParamStore64 = ParamStoreT<double>;

}  // namespace cimt
