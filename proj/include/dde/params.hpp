#pragma once

// Named parameter tables, Adam, weight EMA, and the binary checkpoint format.

#include "dde/autodiff.hpp"
#include "dde/random.hpp"
#include "dde/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace dde {

/// Ordered collection of named parameters. Order is insertion order and is part of the
/// checkpoint layout.
template <class T>
class ParamSet {
public:
    ad::Parameter<T>& add(const std::string& name, Mat<T> value, bool trainable = true) {
        require(!index_.count(name), "ParamSet: duplicate parameter " + name);
        index_[name] = entries_.size();
        entries_.push_back({name, ad::Parameter<T>{std::move(value), Mat<T>(), trainable}});
        return entries_.back().param;
    }

    ad::Parameter<T>& operator[](const std::string& name) { return entries_.at(lookup(name)).param; }
    const ad::Parameter<T>& operator[](const std::string& name) const { return entries_.at(lookup(name)).param; }
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return entries_.size(); }
    const std::string& name(std::size_t i) const { return entries_[i].name; }
    ad::Parameter<T>& at(std::size_t i) { return entries_[i].param; }
    const ad::Parameter<T>& at(std::size_t i) const { return entries_[i].param; }

    long trainable_count() const {
        long n = 0;
        for (const auto& e : entries_)
            if (e.param.trainable) n += e.param.value.size();
        return n;
    }

    void zero_grad() {
        for (auto& e : entries_) e.param.zero_grad();
    }

    bool all_finite() const {
        for (const auto& e : entries_)
            if (!e.param.value.allFinite()) return false;
        return true;
    }

    template <class U>
    ParamSet<U> cast() const {
        ParamSet<U> out;
        for (const auto& e : entries_) out.add(e.name, e.param.value.template cast<U>(), e.param.trainable);
        return out;
    }

    bool same_structure(const ParamSet& other) const {
        if (size() != other.size()) return false;
        for (std::size_t i = 0; i < size(); ++i) {
            if (name(i) != other.name(i)) return false;
            if (at(i).value.rows() != other.at(i).value.rows() || at(i).value.cols() != other.at(i).value.cols())
                return false;
        }
        return true;
    }

private:
    struct Entry {
        std::string name;
        ad::Parameter<T> param;
    };

    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        require(it != index_.end(), "ParamSet: unknown parameter " + name);
        return it->second;
    }

    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

/// decay * ema + (1 - decay) * params, elementwise.
template <class T>
ParamSet<T> ema_update(const ParamSet<T>& ema, const ParamSet<T>& params, double decay) {
    require(decay >= 0.0 && decay <= 1.0, "ema_update: decay must lie in [0, 1]");
    require(ema.same_structure(params), "ema_update: parameter structure mismatch");
    ParamSet<T> out = ema.template cast<T>();
    const T d = static_cast<T>(decay);
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (decay == 1.0) continue;
        if (decay == 0.0) {
            out.at(i).value = params.at(i).value;
            continue;
        }
        out.at(i).value = d * ema.at(i).value + (T(1) - d) * params.at(i).value;
    }
    return out;
}

/// In-place variant used inside training loops.
template <class T>
void ema_update_inplace(ParamSet<T>& ema, const ParamSet<T>& params, double decay) {
    require(ema.same_structure(params), "ema_update: parameter structure mismatch");
    const T d = static_cast<T>(decay);
    for (std::size_t i = 0; i < ema.size(); ++i) ema.at(i).value = d * ema.at(i).value + (T(1) - d) * params.at(i).value;
}

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double eps = 1e-8;
};

template <class T>
class Adam {
public:
    Adam(const ParamSet<T>& params, AdamConfig cfg) : cfg_(cfg) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& v = params.at(i).value;
            m_.push_back(Mat<T>::Zero(v.rows(), v.cols()));
            v_.push_back(Mat<T>::Zero(v.rows(), v.cols()));
        }
    }

    void step(ParamSet<T>& params, double lr_scale = 1.0) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        const T lr = static_cast<T>(cfg_.lr * lr_scale / bc1);
        const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
        const T inv_bc2 = static_cast<T>(1.0 / bc2), eps = static_cast<T>(cfg_.eps);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = params.at(i);
            if (!p.trainable || p.grad.size() == 0) continue;
            m_[i] = b1 * m_[i] + (T(1) - b1) * p.grad;
            v_[i] = b2 * v_[i] + (T(1) - b2) * p.grad.cwiseAbs2();
            p.value.array() -= lr * m_[i].array() / ((v_[i].array() * inv_bc2).sqrt() + eps);
        }
    }

    long steps() const { return t_; }

private:
    AdamConfig cfg_;
    std::vector<Mat<T>> m_, v_;
    long t_ = 0;
};

// --------------------------------------------------------------------------- checkpoints
//
// Layout (all integers little-endian):
//   magic    8 bytes  "DDECKPT\0"
//   version  u32      = 1
//   n_meta   u32, then n_meta x { key: u32 len + bytes, value: u32 len + bytes }
//   n_param  u32, then n_param x {
//       name: u32 len + bytes, trainable: u8, rank: u32 (= 2), dims: rank x u32,
//       data: prod(dims) x f32 little-endian, row-major }

using Metadata = std::map<std::string, std::string>;

namespace detail {
inline constexpr char kMagic[8] = {'D', 'D', 'E', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kVersion = 1;

template <class U>
U to_le(U v) {
    if constexpr (std::endian::native == std::endian::big) {
        U out;
        auto* s = reinterpret_cast<unsigned char*>(&v);
        auto* d = reinterpret_cast<unsigned char*>(&out);
        for (std::size_t i = 0; i < sizeof(U); ++i) d[i] = s[sizeof(U) - 1 - i];
        return out;
    } else {
        return v;
    }
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
    v = to_le(v);
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void put_str(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::uint32_t get_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return to_le(v);
}
inline std::string get_str(std::istream& is) {
    const std::uint32_t n = get_u32(is);
    if (n > (1u << 24)) throw std::runtime_error("checkpoint: corrupt string length");
    std::string s(n, '\0');
    is.read(s.data(), n);
    if (!is) throw std::runtime_error("checkpoint: truncated file");
    return s;
}
}  // namespace detail

/// Writes to `path` via a temporary file and rename.
template <class T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params, const Metadata& meta) {
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("checkpoint: cannot open " + tmp.string());
        os.write(detail::kMagic, 8);
        detail::put_u32(os, detail::kVersion);
        detail::put_u32(os, static_cast<std::uint32_t>(meta.size()));
        for (const auto& [k, v] : meta) {
            detail::put_str(os, k);
            detail::put_str(os, v);
        }
        detail::put_u32(os, static_cast<std::uint32_t>(params.size()));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& p = params.at(i);
            detail::put_str(os, params.name(i));
            const char tr = p.trainable ? 1 : 0;
            os.write(&tr, 1);
            detail::put_u32(os, 2);
            detail::put_u32(os, static_cast<std::uint32_t>(p.value.rows()));
            detail::put_u32(os, static_cast<std::uint32_t>(p.value.cols()));
            for (long j = 0; j < p.value.size(); ++j) {
                float f = static_cast<float>(p.value.data()[j]);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                detail::put_u32(os, bits);
            }
        }
        if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <class T>
struct Checkpoint {
    ParamSet<T> params;
    Metadata meta;
};

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    const auto version = detail::get_u32(is);
    if (version != detail::kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint<T> ck;
    const auto n_meta = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = detail::get_str(is);
        ck.meta[k] = detail::get_str(is);
    }
    const auto n_param = detail::get_u32(is);
    for (std::uint32_t i = 0; i < n_param; ++i) {
        auto name = detail::get_str(is);
        char tr = 0;
        is.read(&tr, 1);
        const auto rank = detail::get_u32(is);
        if (rank != 2) throw std::runtime_error("checkpoint: unsupported rank for " + name);
        const auto rows = detail::get_u32(is);
        const auto cols = detail::get_u32(is);
        if (static_cast<std::uint64_t>(rows) * cols > (1ull << 28))
            throw std::runtime_error("checkpoint: corrupt shape for " + name);
        Mat<T> m(rows, cols);
        for (long j = 0; j < m.size(); ++j) {
            const std::uint32_t bits = detail::get_u32(is);
            float f;
            std::memcpy(&f, &bits, 4);
            m.data()[j] = static_cast<T>(f);
        }
        ck.params.add(name, std::move(m), tr != 0);
    }
    return ck;
}

}  // namespace dde
