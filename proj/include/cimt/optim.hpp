#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "cimt/params.hpp"

namespace cimt {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const;
};

// Rectified Adam. Updates every parameter that requires grad and received one;
// a parameter group (matched by name prefix) can scale the learning rate.
template <typename T>
class RAdamT {
public:
    explicit RAdamT(OptimConfig cfg = {});

    // Longest matching prefix wins; unmatched names use multiplier 1.
    void set_group_multiplier(const std::string& prefix, double mult);
    double lr_for(const std::string& name) const;

    // One update. Returns false and moves nothing when any gradient is
    // non-finite; the skip counter then advances instead of the step counter.
    bool step(ParamStoreT<T>& ps);

    int64_t t() const { return t_; }
    int64_t skips() const { return skips_; }

    // checkpoint surface
    const std::map<std::string, std::vector<T>>& moment1() const { return m_; }
    const std::map<std::string, std::vector<T>>& moment2() const { return v_; }
    void restore(int64_t t, int64_t skips, std::map<std::string, std::vector<T>> m,
                 std::map<std::string, std::vector<T>> v);

private:
    OptimConfig cfg_;
    std::vector<std::pair<std::string, double>> groups_;
    std::map<std::string, std::vector<T>> m_, v_;
    int64_t t_ = 0;
    int64_t skips_ = 0;
};

using RAdam = RAdamT<float>;
using RAdam64 = RAdamT<double>;

#define CIMT_OPTIM_DECLARE_FOR(T) extern template class RAdamT<T>;
CIMT_OPTIM_DECLARE_FOR(float)
CIMT_OPTIM_DECLARE_FOR(double)
#undef CIMT_OPTIM_DECLARE_FOR

}  // namespace cimt
