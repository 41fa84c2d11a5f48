#include "uhr/params.hpp"

namespace uhr {

int ParamStore::add(const std::string& name, Shape shape, const std::string& role,
                    std::vector<double> value) {
    if (index_.count(name)) throw ContractError("duplicate parameter: " + name);
    if (shape_numel(shape) != static_cast<int64_t>(value.size())) {
        throw ShapeError("parameter " + name + " data/shape mismatch");
    }
    entries_.push_back(Entry{name, std::move(shape), role, std::move(value)});
    index_[name] = static_cast<int>(entries_.size()) - 1;
    return index_[name];
}

int ParamStore::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return it->second;
}

Tensor ParamStore::tensor(const std::string& name) const {
    const Entry& e = entries_[index_of(name)];
    return Tensor::from(e.shape, e.value);
}

int64_t ParamStore::total_params() const {
    int64_t n = 0;
    for (const Entry& e : entries_) n += static_cast<int64_t>(e.value.size());
    return n;
}

int64_t ParamStore::total_params_with_role(const std::string& role) const {
    int64_t n = 0;
    for (const Entry& e : entries_) {
        if (e.role == role) n += static_cast<int64_t>(e.value.size());
    }
    return n;
}

Tensor Binding::operator()(const std::string& name) {
    auto it = watched_.find(name);
    if (it != watched_.end()) return it->second;
    Tensor t = store_->tensor(name);
    if (tape_) t = tape_->watch(t);
    watched_.emplace(name, t);
    return t;
}

std::vector<std::vector<double>> Binding::collect_grads() const {
    std::vector<std::vector<double>> out(store_->size());
    for (int i = 0; i < store_->size(); ++i) {
        const auto& e = store_->entry(i);
        auto it = watched_.find(e.name);
        if (it != watched_.end() && tape_) {
            out[i] = tape_->grad(it->second);
        } else {
            out[i].assign(e.value.size(), 0.0);
        }
    }
    return out;
}

}  // namespace uhr
