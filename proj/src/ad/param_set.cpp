#include "fewshot/ad/param_set.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "fewshot/error.hpp"

namespace fewshot::ad {

namespace {

constexpr char kMagic[8] = {'F', 'S', 'P', 'A', 'R', 'A', 'M', 'S'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& value)
{
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T take(const std::vector<std::uint8_t>& in, std::size_t& pos)
{
    if (pos + sizeof(T) > in.size()) throw FormatError("parameter file truncated");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

} // namespace

void ParamSet::add(std::string name, Var value)
{
    if (contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    names_.push_back(std::move(name));
    vars_.push_back(std::move(value));
}

const Var& ParamSet::get(const std::string& name) const
{
    auto it = std::find(names_.begin(), names_.end(), name);
    if (it == names_.end()) throw ContractError("unknown parameter '" + name + "'");
    return vars_[static_cast<std::size_t>(it - names_.begin())];
}

bool ParamSet::contains(const std::string& name) const
{
    return std::find(names_.begin(), names_.end(), name) != names_.end();
}

std::size_t ParamSet::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& v : vars_) n += v.size();
    return n;
}

ParamSet ParamSet::clone(bool requires_grad) const
{
    ParamSet out;
    out.names_ = names_;
    out.vars_.reserve(vars_.size());
    for (const auto& v : vars_) out.vars_.push_back(v.detach(requires_grad));
    return out;
}

ParamSet ParamSet::with_vars(std::vector<Var> vars) const
{
    if (vars.size() != vars_.size()) throw ContractError("with_vars: parameter count mismatch");
    for (std::size_t i = 0; i < vars.size(); ++i) {
        if (vars[i].shape() != vars_[i].shape()) {
            throw ShapeError("with_vars: shape mismatch for '" + names_[i] + "'");
        }
    }
    ParamSet out;
    out.names_ = names_;
    out.vars_ = std::move(vars);
    return out;
}

bool ParamSet::same_values(const ParamSet& other) const
{
    if (names_ != other.names_) return false;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        const Tensor& a = vars_[i].value();
        const Tensor& b = other.vars_[i].value();
        if (a.shape() != b.shape()) return false;
        if (std::memcmp(a.ptr(), b.ptr(), a.size() * sizeof(double)) != 0) return false;
    }
    return true;
}

std::vector<std::uint8_t> ParamSet::serialize() const
{
    nlohmann::json manifest;
    manifest["version"] = kFormatVersion;
    manifest["dtype"] = "float64-le";
    manifest["params"] = nlohmann::json::array();
    std::size_t offset = 0;
    for (std::size_t i = 0; i < vars_.size(); ++i) {
        manifest["params"].push_back(
            {{"name", names_[i]}, {"shape", vars_[i].shape()}, {"offset", offset}, {"count", vars_[i].size()}});
        offset += vars_[i].size();
    }
    const std::string text = manifest.dump();

    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put(out, kFormatVersion);
    put(out, static_cast<std::uint64_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    for (const auto& v : vars_) {
        for (double x : v.value().data()) put(out, x);
    }
    return out;
}

ParamSet ParamSet::deserialize(const std::vector<std::uint8_t>& bytes)
{
    if (bytes.size() < sizeof(kMagic) || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
        throw FormatError("not a parameter file (bad magic)");
    }
    std::size_t pos = sizeof(kMagic);
    const auto version = take<std::uint32_t>(bytes, pos);
    if (version != kFormatVersion) {
        throw FormatError("unsupported parameter file version " + std::to_string(version));
    }
    const auto length = take<std::uint64_t>(bytes, pos);
    if (pos + length > bytes.size()) throw FormatError("parameter file truncated");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                         bytes.begin() + static_cast<std::ptrdiff_t>(pos + length));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("parameter manifest: ") + e.what());
    }
    pos += length;
    const std::size_t data_start = pos;

    ParamSet out;
    for (const auto& entry : manifest.at("params")) {
        Shape shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto count = entry.at("count").get<std::size_t>();
        if (count != numel(shape)) throw FormatError("parameter manifest: count does not match shape");
        std::size_t p = data_start + offset * sizeof(double);
        std::vector<double> values(count);
        for (auto& x : values) x = take<double>(bytes, p);
        out.add(entry.at("name").get<std::string>(), parameter(Tensor(std::move(shape), std::move(values))));
    }
    return out;
}

void ParamSet::save(const std::filesystem::path& path) const
{
    const auto bytes = serialize();
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw Error("cannot open '" + path.string() + "' for writing");
    file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!file) throw Error("failed writing '" + path.string() + "'");
}

ParamSet ParamSet::load(const std::filesystem::path& path)
{
    std::ifstream file(path, std::ios::binary);
    if (!file) throw Error("cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

} // namespace fewshot::ad
