#pragma once

// The decomposition F: expanded object <-> list of base-domain patches, plus overlap averaging.

#include "dde/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace dde {

/// Regular 1D patch grid: total_len = patch_len + stride * (count - 1), 1 <= stride <= patch_len.
struct PatchGrid1D {
    long total_len = 0;
    long patch_len = 0;
    long stride = 0;
    long count = 0;

    static PatchGrid1D from_count(long patch_len, long stride, long count) {
        PatchGrid1D g{patch_len + stride * (count - 1), patch_len, stride, count};
        g.validate();
        return g;
    }

    /// Rejects totals that the grid cannot tile exactly.
    static PatchGrid1D from_total(long total_len, long patch_len, long stride) {
        require(patch_len >= 1 && stride >= 1, "PatchGrid1D: patch_len and stride must be positive");
        require(total_len >= patch_len, "PatchGrid1D: total_len " + std::to_string(total_len) +
                                            " shorter than patch_len " + std::to_string(patch_len));
        require((total_len - patch_len) % stride == 0,
                "PatchGrid1D: (total_len - patch_len) = " + std::to_string(total_len - patch_len) +
                    " not divisible by stride " + std::to_string(stride));
        return from_count(patch_len, stride, (total_len - patch_len) / stride + 1);
    }

    void validate() const {
        require(patch_len >= 1, "PatchGrid1D: patch_len must be positive");
        require(count >= 1, "PatchGrid1D: count must be positive");
        require(stride >= 1 && stride <= patch_len, "PatchGrid1D: stride must lie in [1, patch_len]");
        require(total_len == patch_len + stride * (count - 1), "PatchGrid1D: total_len != B + s(k-1)");
    }

    long offset(long i) const { return i * stride; }
};

/// Patch (i, j) covers rows [i*s, i*s + B) and columns [j*s, j*s + B).
struct PatchGrid2D {
    PatchGrid1D rows;
    PatchGrid1D cols;

    static PatchGrid2D square(long patch, long stride, long count) {
        auto g = PatchGrid1D::from_count(patch, stride, count);
        return {g, g};
    }
};

/// Flattened description of where each patch lives inside the (height x width) object.
/// Patches are ordered row-major over the grid. Offsets may repeat: a replicated layout
/// places all patches on the same region, which is how a single image is expanded into
/// L conditioning slots.
struct PatchLayout {
    long height = 1;
    long width = 1;
    long patch_h = 1;
    long patch_w = 1;
    std::vector<std::pair<long, long>> offsets;  // (row, col) of each patch's top-left corner

    long object_size() const { return height * width; }
    long patch_size() const { return patch_h * patch_w; }
    long count() const { return static_cast<long>(offsets.size()); }

    void validate() const {
        require(height >= 1 && width >= 1 && patch_h >= 1 && patch_w >= 1, "PatchLayout: sizes must be positive");
        require(!offsets.empty(), "PatchLayout: at least one patch required");
        for (auto [r, c] : offsets) {
            require(r >= 0 && c >= 0 && r + patch_h <= height && c + patch_w <= width,
                    "PatchLayout: patch outside object bounds");
        }
    }

    /// index[p * patch_size + e] = flat object position of element e of patch p.
    std::vector<long> gather_index() const {
        std::vector<long> idx;
        idx.reserve(count() * patch_size());
        for (auto [r0, c0] : offsets)
            for (long r = 0; r < patch_h; ++r)
                for (long c = 0; c < patch_w; ++c) idx.push_back((r0 + r) * width + (c0 + c));
        return idx;
    }

    static PatchLayout from(const PatchGrid1D& g) {
        g.validate();
        PatchLayout l{1, g.total_len, 1, g.patch_len, {}};
        for (long i = 0; i < g.count; ++i) l.offsets.emplace_back(0, g.offset(i));
        return l;
    }

    static PatchLayout from(const PatchGrid2D& g) {
        g.rows.validate();
        g.cols.validate();
        PatchLayout l{g.rows.total_len, g.cols.total_len, g.rows.patch_len, g.cols.patch_len, {}};
        for (long i = 0; i < g.rows.count; ++i)
            for (long j = 0; j < g.cols.count; ++j) l.offsets.emplace_back(g.rows.offset(i), g.cols.offset(j));
        return l;
    }

    /// `copies` patches all covering the full (height x width) object.
    static PatchLayout replicated(long copies, long height, long width) {
        require(copies >= 1, "PatchLayout: copies must be positive");
        return PatchLayout{height, width, height, width, std::vector<std::pair<long, long>>(copies, {0, 0})};
    }
};

/// Patches of a batch of objects: row (b * count + p) holds patch p of object b.
template <class T>
struct Decomposition {
    Mat<T> patches;
    PatchLayout layout;
    long batch = 1;
};

inline std::vector<int> coverage_counts(const PatchLayout& layout) {
    layout.validate();
    std::vector<int> counts(layout.object_size(), 0);
    for (long i : layout.gather_index()) ++counts[i];
    return counts;
}

template <class G>
std::vector<int> coverage_counts(const G& grid) {
    return coverage_counts(PatchLayout::from(grid));
}

template <class T>
Decomposition<T> decompose(const Mat<T>& objects, const PatchLayout& layout) {
    layout.validate();
    if (objects.cols() != layout.object_size()) {
        throw std::invalid_argument("decompose: object size mismatch, expected " +
                                    std::to_string(layout.object_size()) + " (" +
                                    shape_str(layout.height, layout.width) + ") got " +
                                    std::to_string(objects.cols()));
    }
    const long k = layout.count();
    const long p = layout.patch_size();
    const auto idx = layout.gather_index();
    Decomposition<T> out{Mat<T>(objects.rows() * k, p), layout, objects.rows()};
    for (long b = 0; b < objects.rows(); ++b)
        for (long i = 0; i < k; ++i)
            for (long e = 0; e < p; ++e) out.patches(b * k + i, e) = objects(b, idx[i * p + e]);
    return out;
}

template <class T, class G>
Decomposition<T> decompose(const Mat<T>& objects, const G& grid) {
    return decompose(objects, PatchLayout::from(grid));
}

/// Each object position becomes the arithmetic mean of all patch values covering it.
template <class T>
Mat<T> recompose_average(const Mat<T>& patches, const PatchLayout& layout, long batch) {
    layout.validate();
    const long k = layout.count();
    const long p = layout.patch_size();
    require_same_shape(patches, batch * k, p, "recompose_average: patches");
    const auto idx = layout.gather_index();
    const auto counts = coverage_counts(layout);
    Mat<T> out = Mat<T>::Zero(batch, layout.object_size());
    for (long b = 0; b < batch; ++b)
        for (long i = 0; i < k; ++i)
            for (long e = 0; e < p; ++e) out(b, idx[i * p + e]) += patches(b * k + i, e);
    for (long b = 0; b < batch; ++b)
        for (long n = 0; n < layout.object_size(); ++n) out(b, n) /= static_cast<T>(counts[n]);
    return out;
}

template <class T>
Mat<T> recompose_average(const Decomposition<T>& d) {
    return recompose_average(d.patches, d.layout, d.batch);
}

}  // namespace dde
