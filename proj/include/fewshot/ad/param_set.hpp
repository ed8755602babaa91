#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fewshot/ad/var.hpp"

namespace fewshot::ad {

// Ordered collection of named parameters.
class ParamSet {
public:
    void add(std::string name, Var value);

    std::size_t size() const { return vars_.size(); }
    bool empty() const { return vars_.empty(); }
    const std::string& name(std::size_t i) const { return names_.at(i); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Var>& vars() const { return vars_; }
    const Var& operator[](std::size_t i) const { return vars_.at(i); }
    Var& operator[](std::size_t i) { return vars_.at(i); }
    const Var& get(const std::string& name) const;
    bool contains(const std::string& name) const;

    // Total number of scalar entries.
    std::size_t parameter_count() const;

    // Fresh leaves holding copies of the current values.
    ParamSet clone(bool requires_grad = true) const;
    // Same names, different variables (used for adapted parameters that are not leaves).
    ParamSet with_vars(std::vector<Var> vars) const;

    // Bitwise equality of names, shapes and values.
    bool same_values(const ParamSet& other) const;

    std::vector<std::uint8_t> serialize() const;
    static ParamSet deserialize(const std::vector<std::uint8_t>& bytes);
    void save(const std::filesystem::path& path) const;
    static ParamSet load(const std::filesystem::path& path);

private:
    std::vector<std::string> names_;
    std::vector<Var> vars_;
};

} // namespace fewshot::ad
