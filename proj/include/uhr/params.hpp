#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "uhr/tensor.hpp"

namespace uhr {

// Ordered, named parameter storage. Iteration order is creation order, which
// fixes both RNG consumption at init and gradient-reduction order during
// training.
class ParamStore {
  public:
    struct Entry {
        std::string name;
        Shape shape;
        std::string role;  // "encoder" | "guidance" | "ughr" | "decoder" | ...
        std::vector<double> value;
    };

    int add(const std::string& name, Shape shape, const std::string& role,
            std::vector<double> value);
    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int index_of(const std::string& name) const;

    Tensor tensor(const std::string& name) const;
    Entry& entry(int i) { return entries_[i]; }
    const Entry& entry(int i) const { return entries_[i]; }
    int size() const { return static_cast<int>(entries_.size()); }

    int64_t total_params() const;
    int64_t total_params_with_role(const std::string& role) const;

  private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Per-tape view of a ParamStore: watch each parameter once and reuse the
// tracked handle. With a null tape it hands out untracked tensors (inference).
class Binding {
  public:
    Binding(const ParamStore& store, Tape* tape) : store_(&store), tape_(tape) {}

    Tensor operator()(const std::string& name);
    Tape* tape() const { return tape_; }
    const ParamStore& store() const { return *store_; }

    // Gradients for every entry, in store order; zeros where unused.
    std::vector<std::vector<double>> collect_grads() const;

  private:
    const ParamStore* store_;
    Tape* tape_;
    std::unordered_map<std::string, Tensor> watched_;
};

}  // namespace uhr
