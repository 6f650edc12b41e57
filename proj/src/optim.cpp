#include "cimt/optim.hpp"

#include <algorithm>
#include <cmath>

#include "cimt/tensor.hpp"

namespace cimt {

void OptimConfig::validate() const {
    if (!(lr > 0)) throw ConfigError("optimizer lr must be > 0");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must be in [0, 1)");
    if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2 must be in [0, 1)");
    if (!(eps > 0)) throw ConfigError("eps must be > 0");
}

template <typename T>
RAdamT<T>::RAdamT(OptimConfig cfg) : cfg_(cfg) {
    cfg_.validate();
}

template <typename T>
void RAdamT<T>::set_group_multiplier(const std::string& prefix, double mult) {
    if (!(mult > 0)) throw ConfigError("group lr multiplier must be > 0");
    groups_.emplace_back(prefix, mult);
    std::stable_sort(groups_.begin(), groups_.end(), [](const auto& a, const auto& b) {
        return a.first.size() > b.first.size();
    });
}

template <typename T>
double RAdamT<T>::lr_for(const std::string& name) const {
    for (const auto& [prefix, mult] : groups_)
        if (name.compare(0, prefix.size(), prefix) == 0) return cfg_.lr * mult;
    return cfg_.lr;
}

template <typename T>
bool RAdamT<T>::step(ParamStoreT<T>& ps) {
    std::vector<std::pair<const std::string*, TensorT<T>*>> active;
    for (auto& [name, p] : ps) {
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (T g : p.grad_values())
            if (!std::isfinite(static_cast<double>(g))) {
                ++skips_;
                return false;
            }
        active.emplace_back(&name, &p);
    }
    ++t_;

    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double b1t = std::pow(b1, static_cast<double>(t_));
    const double b2t = std::pow(b2, static_cast<double>(t_));
    const double rho_inf = 2.0 / (1.0 - b2) - 1.0;
    const double rho_t = rho_inf - 2.0 * static_cast<double>(t_) * b2t / (1.0 - b2t);
    const bool rectified = rho_t > 4.0;
    double rect = 0.0;
    if (rectified)
        rect = std::sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf /
                         ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t));

    for (auto& [name, p] : active) {
        auto& m = m_[*name];
        auto& v = v_[*name];
        const size_t n = static_cast<size_t>(p->numel());
        if (m.empty()) m.assign(n, T(0));
        if (v.empty()) v.assign(n, T(0));
        if (m.size() != n || v.size() != n)
            throw ContractError("optimizer moments for " + *name +
                                " do not match the parameter size");
        const double lr = lr_for(*name);
        auto g = p->grad_values();
        auto w = p->values();
        for (size_t i = 0; i < n; ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = b1 * static_cast<double>(m[i]) + (1.0 - b1) * gi;
            const double vi = b2 * static_cast<double>(v[i]) + (1.0 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / (1.0 - b1t);
            const double upd = rectified
                                   ? lr * rect * mhat / (std::sqrt(vi / (1.0 - b2t)) + cfg_.eps)
                                   : lr * mhat;
            w[i] -= static_cast<T>(upd);
        }
    }
    return true;
}

template <typename T>
void RAdamT<T>::restore(int64_t t, int64_t skips, std::map<std::string, std::vector<T>> m,
                        std::map<std::string, std::vector<T>> v) {
    if (t < 0 || skips < 0) throw ContractError("optimizer counters must be non-negative");
    t_ = t;
    skips_ = skips;
    m_ = std::move(m);
    v_ = std::move(v);
}

template class RAdamT<float>;
template class RAdamT<double>;

}  // namespace cimt
