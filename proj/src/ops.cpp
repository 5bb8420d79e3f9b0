#include "ymask/ops.h"

#include <cmath>
#include <limits>
#include <string>

namespace ymask {

namespace kernels {

// c[m×n] += A·b where A(i, p) = a[i·rs + p·cs] and b is [k×n] row-major.
// Four rows of c are updated per pass over a column chunk so each loaded row
// of b feeds four multiply-adds.
template <typename T>
void gemm_core(std::size_t m, std::size_t n, std::size_t k, const T* a, std::size_t rs, std::size_t cs, const T* b, T* c) {
    constexpr std::size_t kChunk = 512;
    for (std::size_t j0 = 0; j0 < n; j0 += kChunk) {
        const std::size_t nj = std::min(kChunk, n - j0);
        std::size_t i = 0;
        for (; i + 4 <= m; i += 4) {
            T* c0 = c + i * n + j0;
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            for (std::size_t p = 0; p < k; ++p) {
                const T* ap = a + i * rs + p * cs;
                const T a0 = ap[0], a1 = ap[rs], a2 = ap[2 * rs], a3 = ap[3 * rs];
                const T* bp = b + p * n + j0;
                for (std::size_t j = 0; j < nj; ++j) {
                    const T bv = bp[j];
                    c0[j] += a0 * bv;
                    c1[j] += a1 * bv;
                    c2[j] += a2 * bv;
                    c3[j] += a3 * bv;
                }
            }
        }
        for (; i < m; ++i) {
            T* c0 = c + i * n + j0;
            for (std::size_t p = 0; p < k; ++p) {
                const T a0 = a[i * rs + p * cs];
                const T* bp = b + p * n + j0;
                for (std::size_t j = 0; j < nj; ++j) c0[j] += a0 * bp[j];
            }
        }
    }
}

// c[m×n] (+)= a[m×k] · b[k×n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, T(0));
    gemm_core(m, n, k, a, k, 1, b, c);
}

// c[m×n] += aᵀ · b with a stored as [k×m].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    gemm_core(m, n, k, a, 1, m, b, c);
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dst[j * rows + i] = src[i * cols + j];
}

// c[m×n] += a · bᵀ with b stored as [n×k].
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
    std::vector<T> bt(n * k);
    transpose_into(n, k, b, bt.data());
    gemm_nn(m, n, k, a, bt.data(), c, true);
}

template <typename T>
void im2col(const T* x, std::size_t channels, std::size_t height, std::size_t width, std::size_t kernel,
            std::size_t stride, std::size_t padding, std::size_t out_h, std::size_t out_w, T* cols) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
                T* row = cols + ((c * kernel + ky) * kernel + kx) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    T* dst = row + oy * out_w;
                    if (iy < 0 || iy >= static_cast<long>(height)) {
                        std::fill(dst, dst + out_w, T(0));
                        continue;
                    }
                    const T* src = x + (c * height + static_cast<std::size_t>(iy)) * width;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        dst[ox] = (ix < 0 || ix >= static_cast<long>(width)) ? T(0) : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width, std::size_t kernel,
            std::size_t stride, std::size_t padding, std::size_t out_h, std::size_t out_w, T* x) {
    const std::size_t plane = out_h * out_w;
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < kernel; ++ky) {
            for (std::size_t kx = 0; kx < kernel; ++kx) {
                const T* row = cols + ((c * kernel + ky) * kernel + kx) * plane;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(height)) continue;
                    T* dst = x + (c * height + static_cast<std::size_t>(iy)) * width;
                    const T* src = row + oy * out_w;
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        if (ix >= 0 && ix < static_cast<long>(width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace kernels

namespace {

using kernels::gemm_nn;
using kernels::gemm_nt;
using kernels::gemm_tn;

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// Iterates an output shape while tracking linear offsets into two operands
// whose strides are aligned to the output rank (0 on broadcast axes).
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a, stride_b;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    BroadcastPlan plan;
    plan.out.assign(rank, 1);
    plan.stride_a.assign(rank, 0);
    plan.stride_b.assign(rank, 0);
    const auto sa = shape_strides(a);
    const auto sb = shape_strides(b);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ea = i + a.size() >= rank ? a[i + a.size() - rank] : 1;
        const std::size_t eb = i + b.size() >= rank ? b[i + b.size() - rank] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        plan.out[i] = std::max(ea, eb);
        if (ea != 1) plan.stride_a[i] = sa[i + a.size() - rank];
        if (eb != 1) plan.stride_b[i] = sb[i + b.size() - rank];
    }
    return plan;
}

// Merges neighbouring axes that both operands traverse contiguously (or both
// broadcast), so the innermost loop runs as long as possible.
BroadcastPlan coalesce(const BroadcastPlan& p) {
    BroadcastPlan out;
    for (std::size_t d = 0; d < p.out.size(); ++d) {
        if (p.out[d] == 1) continue;
        if (!out.out.empty() && out.stride_a.back() == p.stride_a[d] * p.out[d] &&
            out.stride_b.back() == p.stride_b[d] * p.out[d]) {
            out.out.back() *= p.out[d];
            out.stride_a.back() = p.stride_a[d];
            out.stride_b.back() = p.stride_b[d];
            continue;
        }
        out.out.push_back(p.out[d]);
        out.stride_a.push_back(p.stride_a[d]);
        out.stride_b.push_back(p.stride_b[d]);
    }
    return out;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
    const std::size_t rank = p.out.size();
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = p.out[rank - 1], sa = p.stride_a[rank - 1], sb = p.stride_b[rank - 1];
    const std::size_t outer = shape_numel(p.out) / inner;
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0, ib = 0, o = 0;
    for (std::size_t r = 0; r < outer; ++r) {
        for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * sa, ib + j * sb);
        o += inner;
        // advance the outer multi-index
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            ia += p.stride_a[d];
            ib += p.stride_b[d];
            if (idx[d] < p.out[d]) break;
            ia -= p.stride_a[d] * p.out[d];
            ib -= p.stride_b[d] * p.out[d];
            idx[d] = 0;
        }
    }
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinaryKind kind, const char* name) {
    auto& tape = a.tape();
    const auto& av = a.value();
    const auto& bv = b.value();
    const auto ida = a.id();
    const auto idb = b.id();
    auto apply = [kind](T x, T y) {
        switch (kind) {
            case BinaryKind::Add: return x + y;
            case BinaryKind::Sub: return x - y;
            default: return x * y;
        }
    };

    if (av.shape() == bv.shape()) {
        Tensor<T> out(av.shape());
        auto o = out.data();
        auto x = av.data();
        auto y = bv.data();
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply(x[i], y[i]);
        return tape.record(name, std::move(out), {a, b}, [ida, idb, kind](Tape<T>& t, const Tensor<T>& g) {
            const auto gd = g.data();
            if (t.needs_grad(ida)) {
                auto& ga = t.grad_buffer(ida);
                auto gad = ga.data();
                if (kind == BinaryKind::Mul) {
                    auto y = t.value(idb).data();
                    for (std::size_t i = 0; i < gd.size(); ++i) gad[i] += gd[i] * y[i];
                } else {
                    for (std::size_t i = 0; i < gd.size(); ++i) gad[i] += gd[i];
                }
            }
            if (t.needs_grad(idb)) {
                auto& gb = t.grad_buffer(idb);
                auto gbd = gb.data();
                if (kind == BinaryKind::Mul) {
                    auto x = t.value(ida).data();
                    for (std::size_t i = 0; i < gd.size(); ++i) gbd[i] += gd[i] * x[i];
                } else if (kind == BinaryKind::Sub) {
                    for (std::size_t i = 0; i < gd.size(); ++i) gbd[i] -= gd[i];
                } else {
                    for (std::size_t i = 0; i < gd.size(); ++i) gbd[i] += gd[i];
                }
            }
        });
    }

    auto full = plan_broadcast(av.shape(), bv.shape(), name);
    Tensor<T> out(full.out);
    auto plan = coalesce(full);
    auto o = out.data();
    auto x = av.data();
    auto y = bv.data();
    for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) { o[io] = apply(x[ia], y[ib]); });
    return tape.record(name, std::move(out), {a, b},
                       [ida, idb, kind, plan = std::move(plan)](Tape<T>& t, const Tensor<T>& g) {
                           const auto gd = g.data();
                           const bool need_a = t.needs_grad(ida);
                           const bool need_b = t.needs_grad(idb);
                           T* gad = need_a ? t.grad_buffer(ida).data().data() : nullptr;
                           T* gbd = need_b ? t.grad_buffer(idb).data().data() : nullptr;
                           const T* x = t.value(ida).data().data();
                           const T* y = t.value(idb).data().data();
                           for_each_broadcast(plan, [&](std::size_t io, std::size_t ia, std::size_t ib) {
                               switch (kind) {
                                   case BinaryKind::Add:
                                       if (gad) gad[ia] += gd[io];
                                       if (gbd) gbd[ib] += gd[io];
                                       break;
                                   case BinaryKind::Sub:
                                       if (gad) gad[ia] += gd[io];
                                       if (gbd) gbd[ib] -= gd[io];
                                       break;
                                   case BinaryKind::Mul:
                                       if (gad) gad[ia] += gd[io] * y[ib];
                                       if (gbd) gbd[ib] += gd[io] * x[ia];
                                       break;
                               }
                           });
                       });
}

// Views an image-shaped tensor as (batch, channels, height, width).
struct ImageDims {
    std::size_t b, c, h, w;
};

ImageDims image_dims(const Shape& s, const char* op) {
    if (s.size() == 3) return {1, s[0], s[1], s[2]};
    if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
    throw DimensionError(std::string(op) + ": expected C×H×W or B×C×H×W input, got " + shape_str(s));
}

Shape image_shape(bool batched, std::size_t b, std::size_t c, std::size_t h, std::size_t w) {
    return batched ? Shape{b, c, h, w} : Shape{c, h, w};
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Add, "add");
}
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Sub, "sub");
}
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    return binary(a, b, BinaryKind::Mul, "mul");
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out(a.value());
    for (auto& v : out.data()) v *= factor;
    const auto id = a.id();
    return a.tape().record("scale", std::move(out), {a}, [id, factor](Tape<T>& t, const Tensor<T>& g) {
        auto gd = t.grad_buffer(id).data();
        auto src = g.data();
        for (std::size_t i = 0; i < src.size(); ++i) gd[i] += factor * src[i];
    });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
    Tensor<T> out(a.value());
    for (auto& v : out.data()) v += offset;
    const auto id = a.id();
    return a.tape().record("add_scalar", std::move(out), {a},
                           [id](Tape<T>& t, const Tensor<T>& g) { t.accumulate(id, g); });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total = 0;
    for (auto v : a.value().data()) total += v;
    const auto id = a.id();
    return a.tape().record("sum", Tensor<T>::scalar(total), {a}, [id](Tape<T>& t, const Tensor<T>& g) {
        const T gv = g[0];
        for (auto& v : t.grad_buffer(id).data()) v += gv;
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const T n = static_cast<T>(a.value().numel());
    T total = 0;
    for (auto v : a.value().data()) total += v;
    const auto id = a.id();
    return a.tape().record("mean", Tensor<T>::scalar(total / n), {a}, [id, n](Tape<T>& t, const Tensor<T>& g) {
        const T gv = g[0] / n;
        for (auto& v : t.grad_buffer(id).data()) v += gv;
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    auto out = a.value().reshaped(std::move(shape));
    const auto id = a.id();
    const Shape in_shape = a.shape();
    return a.tape().record("reshape", std::move(out), {a}, [id, in_shape](Tape<T>& t, const Tensor<T>& g) {
        t.accumulate(id, g.reshaped(in_shape));
    });
}

namespace {

// Forward: out[o] = in[offset(o)], where output axis i walks input axis axes[i].
// Backward (scatter_add): buf[offset(o)] += grad[o] with the same mapping.
template <typename T>
void permute_copy(const Tensor<T>& src_t, const std::vector<std::size_t>& axes, Tensor<T>& dst_t, bool scatter_add) {
    const Shape& walk = scatter_add ? src_t.shape() : dst_t.shape();
    const auto strides = shape_strides(scatter_add ? dst_t.shape() : src_t.shape());
    BroadcastPlan plan;
    plan.out = walk;
    plan.stride_a.resize(axes.size());
    plan.stride_b.assign(axes.size(), 0);
    for (std::size_t i = 0; i < axes.size(); ++i) plan.stride_a[i] = strides[axes[i]];
    plan = coalesce(plan);
    const T* src = src_t.data().data();
    T* dst = dst_t.data().data();
    if (scatter_add) {
        for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { dst[ia] += src[o]; });
    } else {
        for_each_broadcast(plan, [&](std::size_t o, std::size_t ia, std::size_t) { dst[o] = src[ia]; });
    }
}

}  // namespace

template <typename T>
Var<T> permute(const Var<T>& a, const std::vector<std::size_t>& axes) {
    const auto& in = a.value();
    if (axes.size() != in.rank()) {
        throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for tensor " + shape_str(in.shape()));
    }
    std::vector<bool> seen(axes.size(), false);
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= axes.size() || seen[axes[i]]) throw DimensionError("permute: invalid axis order");
        seen[axes[i]] = true;
        out_shape[i] = in.dim(axes[i]);
    }
    Tensor<T> out(out_shape);
    permute_copy(in, axes, out, false);
    const auto id = a.id();
    return a.tape().record("permute", std::move(out), {a}, [id, axes](Tape<T>& t, const Tensor<T>& g) {
        permute_copy(g, axes, t.grad_buffer(id), true);
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    std::vector<std::size_t> axes(a.rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    if (axes.size() < 2) throw DimensionError("transpose: rank < 2");
    std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
    return permute(a, axes);
}

template <typename T>
Var<T> concat(std::span<const Var<T>> parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
        if (!ok) throw DimensionError("concat: " + shape_str(first) + " vs " + shape_str(s));
        out_shape[axis] += s[axis];
    }
    const std::size_t outer = shape_numel(Shape(first.begin(), first.begin() + static_cast<long>(axis)));
    const std::size_t inner = shape_numel(Shape(first.begin() + static_cast<long>(axis) + 1, first.end()));
    Tensor<T> out(out_shape);
    const std::size_t out_row = out_shape[axis] * inner;
    std::vector<std::size_t> ids, widths;
    std::size_t base = 0;
    for (const auto& p : parts) {
        const std::size_t width = p.dim(axis) * inner;
        const T* src = p.value().data().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(src + o * width, src + (o + 1) * width, out.data().data() + o * out_row + base);
        ids.push_back(p.id());
        widths.push_back(width);
        base += width;
    }
    return parts[0].tape().record("concat", std::move(out), parts,
                                  [ids, widths, outer, out_row](Tape<T>& t, const Tensor<T>& g) {
                                      std::size_t off = 0;
                                      for (std::size_t k = 0; k < ids.size(); ++k) {
                                          if (t.needs_grad(ids[k])) {
                                              T* dst = t.grad_buffer(ids[k]).data().data();
                                              const T* src = g.data().data();
                                              for (std::size_t o = 0; o < outer; ++o)
                                                  for (std::size_t j = 0; j < widths[k]; ++j)
                                                      dst[o * widths[k] + j] += src[o * out_row + off + j];
                                          }
                                          off += widths[k];
                                      }
                                  });
}

template <typename T>
Var<T> slice(const Var<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = a.shape();
    if (axis >= s.size() || begin >= end || end > s[axis]) {
        throw DimensionError("slice: [" + std::to_string(begin) + ", " + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(s));
    }
    const std::size_t outer = shape_numel(Shape(s.begin(), s.begin() + static_cast<long>(axis)));
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    Tensor<T> out(out_shape);
    const std::size_t in_row = s[axis] * inner;
    const std::size_t width = (end - begin) * inner;
    const std::size_t off = begin * inner;
    const T* src = a.value().data().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(src + o * in_row + off, src + o * in_row + off + width, out.data().data() + o * width);
    const auto id = a.id();
    return a.tape().record("slice", std::move(out), {a},
                           [id, outer, in_row, width, off](Tape<T>& t, const Tensor<T>& g) {
                               T* dst = t.grad_buffer(id).data().data();
                               const T* src = g.data().data();
                               for (std::size_t o = 0; o < outer; ++o)
                                   for (std::size_t j = 0; j < width; ++j) dst[o * in_row + off + j] += src[o * width + j];
                           });
}

template <typename T>
Var<T> gather(const Var<T>& a, std::vector<std::size_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != index.size()) {
        throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " + shape_str(out_shape));
    }
    const auto& src = a.value();
    Tensor<T> out(std::move(out_shape));
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= src.numel()) throw DimensionError("gather: index out of range");
        out[i] = src[index[i]];
    }
    const auto id = a.id();
    return a.tape().record("gather", std::move(out), {a}, [id, index = std::move(index)](Tape<T>& t, const Tensor<T>& g) {
        auto dst = t.grad_buffer(id).data();
        for (std::size_t i = 0; i < index.size(); ++i) dst[index[i]] += g[i];
    });
}

template <typename T>
Var<T> pad2d(const Var<T>& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw DimensionError("pad2d: rank < 2");
    const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
    const std::size_t planes = x.value().numel() / (h * w);
    const std::size_t oh = h + top + bottom, ow = w + left + right;
    Shape out_shape = s;
    out_shape[s.size() - 2] = oh;
    out_shape[s.size() - 1] = ow;
    Tensor<T> out(out_shape);
    const T* src = x.value().data().data();
    T* dst = out.data().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < h; ++i)
            std::copy(src + (p * h + i) * w, src + (p * h + i + 1) * w, dst + (p * oh + i + top) * ow + left);
    const auto id = x.id();
    return x.tape().record("pad2d", std::move(out), {x},
                           [id, planes, h, w, oh, ow, top, left](Tape<T>& t, const Tensor<T>& g) {
                               T* gd = t.grad_buffer(id).data().data();
                               const T* gs = g.data().data();
                               for (std::size_t p = 0; p < planes; ++p)
                                   for (std::size_t i = 0; i < h; ++i)
                                       for (std::size_t j = 0; j < w; ++j)
                                           gd[(p * h + i) * w + j] += gs[(p * oh + i + top) * ow + left + j];
                           });
}

template <typename T>
Var<T> upsample_nearest(const Var<T>& x, std::size_t factor) {
    const Shape& s = x.shape();
    if (s.size() < 2 || factor == 0) throw DimensionError("upsample_nearest: bad input");
    const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
    const std::size_t planes = x.value().numel() / (h * w);
    const std::size_t oh = h * factor, ow = w * factor;
    Shape out_shape = s;
    out_shape[s.size() - 2] = oh;
    out_shape[s.size() - 1] = ow;
    Tensor<T> out(out_shape);
    const T* src = x.value().data().data();
    T* dst = out.data().data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < oh; ++i)
            for (std::size_t j = 0; j < ow; ++j) dst[(p * oh + i) * ow + j] = src[(p * h + i / factor) * w + j / factor];
    const auto id = x.id();
    return x.tape().record("upsample", std::move(out), {x}, [id, planes, h, w, oh, ow, factor](Tape<T>& t, const Tensor<T>& g) {
        T* gd = t.grad_buffer(id).data().data();
        const T* gs = g.data().data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) gd[(p * h + i / factor) * w + j / factor] += gs[(p * oh + i) * ow + j];
    });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const Shape& s = x.shape();
    if (s.size() < 2 || kernel == 0 || stride == 0) throw DimensionError("max_pool2d: bad configuration");
    const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
    if (kernel > h + 2 * padding || kernel > w + 2 * padding) {
        throw DimensionError("max_pool2d: window " + std::to_string(kernel) + " larger than padded input " + shape_str(s));
    }
    const std::size_t planes = x.value().numel() / (h * w);
    const std::size_t oh = conv_out_extent(h, kernel, stride, padding);
    const std::size_t ow = conv_out_extent(w, kernel, stride, padding);
    Shape out_shape = s;
    out_shape[s.size() - 2] = oh;
    out_shape[s.size() - 1] = ow;
    Tensor<T> out(out_shape);
    std::vector<std::size_t> arg(out.numel());
    const T* src = x.value().data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = 0;
                bool found = false;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < kernel; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t i = (p * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix);
                        if (!found || src[i] > best) {
                            best = src[i];
                            best_i = i;
                            found = true;
                        }
                    }
                }
                const std::size_t o = (p * oh + oy) * ow + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    const auto id = x.id();
    return x.tape().record("max_pool2d", std::move(out), {x}, [id, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
        auto gd = t.grad_buffer(id).data();
        for (std::size_t o = 0; o < arg.size(); ++o) gd[arg[o]] += g[o];
    });
}

template <typename T>
Var<T> roll2d(const Var<T>& x, long dy, long dx) {
    const Shape& s = x.shape();
    if (s.size() != 3 && s.size() != 4) throw DimensionError("roll2d: expected H×W×d or B×H×W×d, got " + shape_str(s));
    const std::size_t r = s.size();
    const std::size_t batch = r == 4 ? s[0] : 1;
    const long h = static_cast<long>(s[r - 3]), w = static_cast<long>(s[r - 2]);
    const std::size_t d = s[r - 1];
    const std::size_t hw = s[r - 3] * s[r - 2];
    auto wrap = [](long v, long n) { return static_cast<std::size_t>(((v % n) + n) % n); };
    std::vector<std::size_t> src_row(batch * hw);
    for (std::size_t b = 0; b < batch; ++b)
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j)
                src_row[b * hw + static_cast<std::size_t>(i * w + j)] =
                    b * hw + wrap(i + dy, h) * static_cast<std::size_t>(w) + wrap(j + dx, w);
    Tensor<T> out(s);
    const T* src = x.value().data().data();
    for (std::size_t p = 0; p < src_row.size(); ++p)
        std::copy(src + src_row[p] * d, src + (src_row[p] + 1) * d, out.data().data() + p * d);
    const auto id = x.id();
    return x.tape().record("roll2d", std::move(out), {x}, [id, d, src_row = std::move(src_row)](Tape<T>& t, const Tensor<T>& g) {
        T* gd = t.grad_buffer(id).data().data();
        const T* gs = g.data().data();
        for (std::size_t p = 0; p < src_row.size(); ++p)
            for (std::size_t k = 0; k < d; ++k) gd[src_row[p] * d + k] += gs[p * d + k];
    });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    auto mismatch = [&] { return DimensionError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb)); };
    if (sa.size() < 2 || sb.size() < 2) throw mismatch();
    const std::size_t m = sa[sa.size() - 2], k = sa.back(), n = sb.back();
    if (sb[sb.size() - 2] != k) throw mismatch();
    std::size_t batch = 1;
    bool shared_b = sb.size() == 2;
    if (shared_b) {
        // fold a's batch axes into its rows
        batch = 1;
    } else {
        if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 2, sb.begin())) throw mismatch();
        batch = shape_numel(Shape(sa.begin(), sa.end() - 2));
    }
    const std::size_t rows = shared_b ? a.value().numel() / k : m;
    Shape out_shape = sa;
    out_shape.back() = n;
    Tensor<T> out(out_shape);
    const T* ap = a.value().data().data();
    const T* bp = b.value().data().data();
    T* cp = out.data().data();
    for (std::size_t i = 0; i < batch; ++i) gemm_nn(rows, n, k, ap + i * rows * k, bp + i * k * n, cp + i * rows * n, false);
    const auto ida = a.id(), idb = b.id();
    return a.tape().record("matmul", std::move(out), {a, b}, [=](Tape<T>& t, const Tensor<T>& g) {
        const T* gp = g.data().data();
        const T* av = t.value(ida).data().data();
        const T* bv = t.value(idb).data().data();
        if (t.needs_grad(ida)) {
            T* ga = t.grad_buffer(ida).data().data();
            for (std::size_t i = 0; i < batch; ++i) gemm_nt(rows, k, n, gp + i * rows * n, bv + i * k * n, ga + i * rows * k);
        }
        if (t.needs_grad(idb)) {
            T* gb = t.grad_buffer(idb).data().data();
            for (std::size_t i = 0; i < batch; ++i) gemm_tn(k, n, rows, av + i * rows * k, gp + i * rows * n, gb + i * k * n);
        }
    });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, T scale, const Var<T>* bias, const Tensor<T>* mask) {
    const Shape& s = q.shape();
    if (s.size() < 2 || k.shape() != s || v.shape() != s) {
        throw DimensionError("attention: q " + shape_str(s) + ", k " + shape_str(k.shape()) + ", v " + shape_str(v.shape()));
    }
    const std::size_t len = s[s.size() - 2], d = s.back(), ll = len * len;
    const std::size_t count = q.value().numel() / (len * d);
    const std::size_t heads = s.size() >= 3 ? s[s.size() - 3] : 1;
    std::size_t bias_heads = 0, masks = 0;
    if (bias) {
        const std::size_t bn = bias->value().numel();
        if (bn % ll != 0 || (bn / ll != heads && bn / ll != 1) || bias->shape().back() != len) {
            throw DimensionError("attention: bias " + shape_str(bias->shape()) + " for " + std::to_string(heads) +
                                 " heads of length " + std::to_string(len));
        }
        bias_heads = bn / ll;
    }
    if (mask) {
        if (mask->numel() % ll != 0 || mask->shape().back() != len || (count / heads) % (mask->numel() / ll) != 0) {
            throw DimensionError("attention: mask " + shape_str(mask->shape()) + " for input " + shape_str(s));
        }
        masks = mask->numel() / ll;
    }

    const T* qp = q.value().data().data();
    const T* kp = k.value().data().data();
    const T* vp = v.value().data().data();
    const T* bp = bias ? bias->value().data().data() : nullptr;
    const T* mp = mask ? mask->data().data() : nullptr;
    std::vector<T> probs(count * ll);
    Tensor<T> out(s);
    T* op = out.data().data();
    std::vector<T> kt(d * len);
    for (std::size_t n = 0; n < count; ++n) {
        const T* qn = qp + n * len * d;
        const T* vn = vp + n * len * d;
        const T* bn = bp ? bp + (n % bias_heads) * ll : nullptr;
        const T* mn = mp ? mp + ((n / heads) % masks) * ll : nullptr;
        T* pn = probs.data() + n * ll;
        kernels::transpose_into(len, d, kp + n * len * d, kt.data());
        for (std::size_t i = 0; i < len; ++i) {
            T* row = pn + i * len;
            std::fill(row, row + len, T(0));
            for (std::size_t c = 0; c < d; ++c) {
                const T qc = qn[i * d + c] * scale;
                const T* kc = kt.data() + c * len;
                for (std::size_t j = 0; j < len; ++j) row[j] += qc * kc[j];
            }
            if (bn)
                for (std::size_t j = 0; j < len; ++j) row[j] += bn[i * len + j];
            if (mn)
                for (std::size_t j = 0; j < len; ++j) row[j] += mn[i * len + j];
            const T mx = *std::max_element(row, row + len);
            T total = 0;
            for (std::size_t j = 0; j < len; ++j) {
                row[j] = std::exp(row[j] - mx);
                total += row[j];
            }
            const T inv = T(1) / total;
            for (std::size_t j = 0; j < len; ++j) row[j] *= inv;
        }
        // out = P·v
        kernels::gemm_core(len, d, len, pn, len, std::size_t{1}, vn, op + n * len * d);
    }

    std::vector<Var<T>> inputs{q, k, v};
    if (bias) inputs.push_back(*bias);
    const auto idq = q.id(), idk = k.id(), idv = v.id();
    const std::size_t idb = bias ? bias->id() : 0;
    const bool has_bias = bias != nullptr;
    return q.tape().record("attention", std::move(out), inputs,
                           [=, probs = std::move(probs)](Tape<T>& t, const Tensor<T>& g) {
                               const T* qv = t.value(idq).data().data();
                               const T* kv = t.value(idk).data().data();
                               const T* vv = t.value(idv).data().data();
                               T* gq = t.needs_grad(idq) ? t.grad_buffer(idq).data().data() : nullptr;
                               T* gk = t.needs_grad(idk) ? t.grad_buffer(idk).data().data() : nullptr;
                               T* gv = t.needs_grad(idv) ? t.grad_buffer(idv).data().data() : nullptr;
                               T* gb = has_bias && t.needs_grad(idb) ? t.grad_buffer(idb).data().data() : nullptr;
                               const T* gp = g.data().data();
                               std::vector<T> ds(ll), dst(ll), vt(d * len);
                               for (std::size_t n = 0; n < count; ++n) {
                                   const std::size_t off = n * len * d;
                                   const T* pn = probs.data() + n * ll;
                                   const T* go = gp + off;
                                   kernels::transpose_into(len, d, vv + off, vt.data());
                                   // dS = P ⊙ (dO·vᵀ - rowsum(P ⊙ dO·vᵀ))
                                   for (std::size_t i = 0; i < len; ++i) {
                                       T* row = ds.data() + i * len;
                                       std::fill(row, row + len, T(0));
                                       for (std::size_t c = 0; c < d; ++c) {
                                           const T gc = go[i * d + c];
                                           const T* vc = vt.data() + c * len;
                                           for (std::size_t j = 0; j < len; ++j) row[j] += gc * vc[j];
                                       }
                                       const T* prow = pn + i * len;
                                       T dot = 0;
                                       for (std::size_t j = 0; j < len; ++j) dot += row[j] * prow[j];
                                       for (std::size_t j = 0; j < len; ++j) row[j] = prow[j] * (row[j] - dot);
                                   }
                                   if (gv) {
                                       // dv = Pᵀ·dO
                                       kernels::gemm_core(len, d, len, pn, std::size_t{1}, len, go, gv + off);
                                   }
                                   if (gb) {
                                       T* gbn = gb + (n % bias_heads) * ll;
                                       for (std::size_t e = 0; e < ll; ++e) gbn[e] += ds[e];
                                   }
                                   for (std::size_t e = 0; e < ll; ++e) dst[e] = ds[e] * scale;
                                   // dq = dS·k·scale, dk = dSᵀ·q·scale
                                   if (gq) kernels::gemm_core(len, d, len, dst.data(), len, std::size_t{1}, kv + off, gq + off);
                                   if (gk) kernels::gemm_core(len, d, len, dst.data(), std::size_t{1}, len, qv + off, gk + off);
                               }
                           });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, std::size_t stride, std::size_t padding) {
    const auto d = image_dims(x.shape(), "conv2d");
    const Shape& ks = kernel.shape();
    if (ks.size() != 4 || ks[2] != ks[3]) throw DimensionError("conv2d: kernel must be N×C×K×K, got " + shape_str(ks));
    if (ks[1] != d.c) {
        throw DimensionError("conv2d: kernel " + shape_str(ks) + " does not match input channels of " + shape_str(x.shape()));
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
    const std::size_t n = ks[0], kk = ks[2];
    if (kk > d.h + 2 * padding || kk > d.w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(ks) + " larger than padded input " + shape_str(x.shape()));
    }
    const std::size_t oh = conv_out_extent(d.h, kk, stride, padding);
    const std::size_t ow = conv_out_extent(d.w, kk, stride, padding);
    const std::size_t ckk = d.c * kk * kk, plane = oh * ow;
    const bool batched = x.rank() == 4;
    Tensor<T> out(image_shape(batched, d.b, n, oh, ow));
    std::vector<T> cols(ckk * plane);
    const T* xp = x.value().data().data();
    const T* wp = kernel.value().data().data();
    for (std::size_t b = 0; b < d.b; ++b) {
        kernels::im2col(xp + b * d.c * d.h * d.w, d.c, d.h, d.w, kk, stride, padding, oh, ow, cols.data());
        gemm_nn(n, plane, ckk, wp, cols.data(), out.data().data() + b * n * plane, false);
    }
    const auto idx = x.id(), idk = kernel.id();
    return x.tape().record("conv2d", std::move(out), {x, kernel}, [=](Tape<T>& t, const Tensor<T>& g) {
        const T* gp = g.data().data();
        const T* xv = t.value(idx).data().data();
        const T* wv = t.value(idk).data().data();
        const bool need_x = t.needs_grad(idx), need_w = t.needs_grad(idk);
        std::vector<T> buf(ckk * plane);
        T* gx = need_x ? t.grad_buffer(idx).data().data() : nullptr;
        T* gw = need_w ? t.grad_buffer(idk).data().data() : nullptr;
        for (std::size_t b = 0; b < d.b; ++b) {
            const T* gb = gp + b * n * plane;
            if (need_w) {
                kernels::im2col(xv + b * d.c * d.h * d.w, d.c, d.h, d.w, kk, stride, padding, oh, ow, buf.data());
                gemm_nt(n, ckk, plane, gb, buf.data(), gw);
            }
            if (need_x) {
                std::fill(buf.begin(), buf.end(), T(0));
                gemm_tn(ckk, plane, n, wv, gb, buf.data());
                kernels::col2im(buf.data(), d.c, d.h, d.w, kk, stride, padding, oh, ow, gx + b * d.c * d.h * d.w);
            }
        }
    });
}

template <typename T>
Var<T> unfold(const Var<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding) {
    const Shape& s = x.shape();
    if (s.size() != 3) throw DimensionError("unfold: expected C×H×W, got " + shape_str(s));
    if (kernel == 0 || stride == 0) throw DimensionError("unfold: kernel and stride must be >= 1");
    if (kernel > s[1] + 2 * padding || kernel > s[2] + 2 * padding) {
        throw DimensionError("unfold: window " + std::to_string(kernel) + " larger than padded input " + shape_str(s));
    }
    const std::size_t c = s[0], h = s[1], w = s[2];
    const std::size_t oh = conv_out_extent(h, kernel, stride, padding);
    const std::size_t ow = conv_out_extent(w, kernel, stride, padding);
    Tensor<T> out(Shape{c * kernel * kernel, oh * ow});
    kernels::im2col(x.value().data().data(), c, h, w, kernel, stride, padding, oh, ow, out.data().data());
    const auto id = x.id();
    return x.tape().record("unfold", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
        kernels::col2im(g.data().data(), c, h, w, kernel, stride, padding, oh, ow, t.grad_buffer(id).data().data());
    });
}

template <typename T>
Var<T> pool_global(const Var<T>& x, PoolMode mode, PoolAxis axis) {
    const auto d = image_dims(x.shape(), "pool_global");
    const bool batched = x.rank() == 4;
    const std::size_t hw = d.h * d.w;
    const T* src = x.value().data().data();
    Tensor<T> out = axis == PoolAxis::Spatial ? Tensor<T>(image_shape(batched, d.b, d.c, 1, 1))
                                              : Tensor<T>(image_shape(batched, d.b, 1, d.h, d.w));
    // every output reduces `count` inputs spaced `step` apart starting at base(o)
    const std::size_t count = axis == PoolAxis::Spatial ? hw : d.c;
    const std::size_t step = axis == PoolAxis::Spatial ? 1 : hw;
    auto base = [=](std::size_t o) {
        return axis == PoolAxis::Spatial ? o * hw : (o / hw) * d.c * hw + (o % hw);
    };
    std::vector<std::size_t> arg;
    if (mode == PoolMode::Max) arg.resize(out.numel());
    for (std::size_t o = 0; o < out.numel(); ++o) {
        const std::size_t b0 = base(o);
        if (mode == PoolMode::Avg) {
            T acc = 0;
            for (std::size_t i = 0; i < count; ++i) acc += src[b0 + i * step];
            out[o] = acc / static_cast<T>(count);
        } else {
            std::size_t best = b0;
            for (std::size_t i = 1; i < count; ++i)
                if (src[b0 + i * step] > src[best]) best = b0 + i * step;
            out[o] = src[best];
            arg[o] = best;
        }
    }
    const auto id = x.id();
    return x.tape().record("pool_global", std::move(out), {x}, [=, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
        auto gd = t.grad_buffer(id).data();
        for (std::size_t o = 0; o < g.numel(); ++o) {
            if (mode == PoolMode::Max) {
                gd[arg[o]] += g[o];
            } else {
                const T share = g[o] / static_cast<T>(count);
                const std::size_t b0 = base(o);
                for (std::size_t i = 0; i < count; ++i) gd[b0 + i * step] += share;
            }
        }
    });
}

std::vector<std::size_t> group_sizes(std::size_t columns, std::size_t groups) {
    if (groups == 0) throw DimensionError("group_pool: group count must be >= 1");
    if (columns < groups) {
        throw DimensionError("fewer patches than output channels (" + std::to_string(columns) + " < " +
                             std::to_string(groups) + ")");
    }
    std::vector<std::size_t> sizes(groups, columns / groups);
    for (std::size_t g = 0; g < columns % groups; ++g) ++sizes[g];
    return sizes;
}

template <typename T>
Var<T> group_pool(const Var<T>& x, std::size_t groups, PoolMode mode) {
    const Shape& s = x.shape();
    if (s.size() != 2) throw DimensionError("group_pool: expected D×P, got " + shape_str(s));
    const std::size_t rows = s[0], cols = s[1];
    const auto sizes = group_sizes(cols, groups);
    std::vector<std::size_t> start(groups, 0);
    for (std::size_t g = 1; g < groups; ++g) start[g] = start[g - 1] + sizes[g - 1];
    Tensor<T> out(Shape{rows, groups});
    std::vector<std::size_t> arg(mode == PoolMode::Max ? rows * groups : 0);
    const T* src = x.value().data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = src + r * cols;
        for (std::size_t g = 0; g < groups; ++g) {
            if (mode == PoolMode::Avg) {
                T acc = 0;
                for (std::size_t j = 0; j < sizes[g]; ++j) acc += row[start[g] + j];
                out.at(r, g) = acc / static_cast<T>(sizes[g]);
            } else {
                std::size_t best = start[g];
                for (std::size_t j = 1; j < sizes[g]; ++j)
                    if (row[start[g] + j] > row[best]) best = start[g] + j;
                out.at(r, g) = row[best];
                arg[r * groups + g] = r * cols + best;
            }
        }
    }
    const auto id = x.id();
    return x.tape().record("group_pool", std::move(out), {x},
                           [=, arg = std::move(arg)](Tape<T>& t, const Tensor<T>& g) {
                               auto gd = t.grad_buffer(id).data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   for (std::size_t k = 0; k < groups; ++k) {
                                       const T gv = g[r * groups + k];
                                       if (mode == PoolMode::Max) {
                                           gd[arg[r * groups + k]] += gv;
                                       } else {
                                           const T share = gv / static_cast<T>(sizes[k]);
                                           for (std::size_t j = 0; j < sizes[k]; ++j) gd[r * cols + start[k] + j] += share;
                                       }
                                   }
                               }
                           });
}

template <typename T>
Var<T> softmax(const Var<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw DimensionError("softmax: axis out of range for " + shape_str(s));
    const std::size_t len = s[axis];
    const std::size_t inner = shape_numel(Shape(s.begin() + static_cast<long>(axis) + 1, s.end()));
    const std::size_t outer = x.value().numel() / (len * inner);
    Tensor<T> out(s);
    const T* src = x.value().data().data();
    T* dst = out.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t b0 = o * len * inner + i;
            T mx = src[b0];
            for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, src[b0 + k * inner]);
            T total = 0;
            for (std::size_t k = 0; k < len; ++k) {
                const T e = std::exp(src[b0 + k * inner] - mx);
                dst[b0 + k * inner] = e;
                total += e;
            }
            for (std::size_t k = 0; k < len; ++k) dst[b0 + k * inner] /= total;
        }
    }
    auto& tape = x.tape();
    const auto id = x.id();
    // record() appends, so the new node's id is the current size; backward reads its own output
    const auto self = tape.size();
    return tape.record("softmax", std::move(out), {x}, [=](Tape<T>& t, const Tensor<T>& g) {
        const T* y = t.value(self).data().data();
        T* gx = t.grad_buffer(id).data().data();
        const T* gp = g.data().data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t b0 = o * len * inner + i;
                T dot = 0;
                for (std::size_t k = 0; k < len; ++k) dot += gp[b0 + k * inner] * y[b0 + k * inner];
                for (std::size_t k = 0; k < len; ++k) gx[b0 + k * inner] += y[b0 + k * inner] * (gp[b0 + k * inner] - dot);
            }
        }
    });
}

template <typename T>
Var<T> pointwise(const Var<T>& x, Activation fn) {
    Tensor<T> out(x.shape());
    auto src = x.value().data();
    auto dst = out.data();
    for (std::size_t i = 0; i < src.size(); ++i) {
        const T v = src[i];
        switch (fn) {
            case Activation::Sigmoid: dst[i] = stable_sigmoid(v); break;
            case Activation::Silu: dst[i] = v * stable_sigmoid(v); break;
            case Activation::Relu: dst[i] = v > T(0) ? v : T(0); break;
        }
    }
    const auto id = x.id();
    const char* name = fn == Activation::Sigmoid ? "sigmoid" : fn == Activation::Silu ? "silu" : "relu";
    return x.tape().record(name, std::move(out), {x}, [id, fn](Tape<T>& t, const Tensor<T>& g) {
        auto xv = t.value(id).data();
        auto gd = t.grad_buffer(id).data();
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const T v = xv[i];
            T dv;
            switch (fn) {
                case Activation::Sigmoid: {
                    const T s = stable_sigmoid(v);
                    dv = s * (T(1) - s);
                    break;
                }
                case Activation::Silu: {
                    const T s = stable_sigmoid(v);
                    dv = s * (T(1) + v * (T(1) - s));
                    break;
                }
                default: dv = v > T(0) ? T(1) : T(0); break;
            }
            gd[i] += g[i] * dv;
        }
    });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gamma.value().numel() != d || beta.value().numel() != d) {
        throw DimensionError("layer_norm: affine params " + shape_str(gamma.shape()) + " for feature width " +
                             std::to_string(d));
    }
    const std::size_t rows = x.value().numel() / d;
    Tensor<T> out(s);
    std::vector<T> xhat(x.value().numel()), rstd(rows);
    const T* src = x.value().data().data();
    const T* gp = gamma.value().data().data();
    const T* bp = beta.value().data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = src + r * d;
        T mu = 0;
        for (std::size_t j = 0; j < d; ++j) mu += row[j];
        mu /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
        var /= static_cast<T>(d);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (row[j] - mu) * rstd[r];
            out[r * d + j] = gp[j] * xhat[r * d + j] + bp[j];
        }
    }
    const auto idx = x.id(), idg = gamma.id(), idb = beta.id();
    return x.tape().record("layer_norm", std::move(out), {x, gamma, beta},
                           [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
                               const T* gp = t.value(idg).data().data();
                               const T* go = g.data().data();
                               if (t.needs_grad(idg) || t.needs_grad(idb)) {
                                   T* dg = t.grad_buffer(idg).data().data();
                                   T* db = t.grad_buffer(idb).data().data();
                                   for (std::size_t r = 0; r < rows; ++r)
                                       for (std::size_t j = 0; j < d; ++j) {
                                           dg[j] += go[r * d + j] * xhat[r * d + j];
                                           db[j] += go[r * d + j];
                                       }
                               }
                               if (!t.needs_grad(idx)) return;
                               T* dx = t.grad_buffer(idx).data().data();
                               for (std::size_t r = 0; r < rows; ++r) {
                                   T m1 = 0, m2 = 0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const T dxh = go[r * d + j] * gp[j];
                                       m1 += dxh;
                                       m2 += dxh * xhat[r * d + j];
                                   }
                                   m1 /= static_cast<T>(d);
                                   m2 /= static_cast<T>(d);
                                   for (std::size_t j = 0; j < d; ++j) {
                                       const T dxh = go[r * d + j] * gp[j];
                                       dx[r * d + j] += rstd[r] * (dxh - m1 - xhat[r * d + j] * m2);
                                   }
                               }
                           });
}

template <typename T>
Var<T> batch_norm_train(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps, BatchStats<T>* stats) {
    const auto d = image_dims(x.shape(), "batch_norm");
    if (gamma.value().numel() != d.c || beta.value().numel() != d.c) {
        throw DimensionError("batch_norm: params " + shape_str(gamma.shape()) + " for input " + shape_str(x.shape()));
    }
    const std::size_t hw = d.h * d.w, count = d.b * hw;
    if (count < 2) throw DimensionError("batch_norm: degenerate batch (B·H·W = 1) in train mode");
    const T* src = x.value().data().data();
    Tensor<T> out(x.shape());
    std::vector<T> xhat(x.value().numel()), rstd(d.c);
    Tensor<T> mean_t(Shape{d.c}), var_t(Shape{d.c});
    for (std::size_t c = 0; c < d.c; ++c) {
        T mu = 0;
        for (std::size_t b = 0; b < d.b; ++b) {
            const T* p = src + (b * d.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) mu += p[i];
        }
        mu /= static_cast<T>(count);
        T var = 0;
        for (std::size_t b = 0; b < d.b; ++b) {
            const T* p = src + (b * d.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
        }
        var /= static_cast<T>(count);
        mean_t[c] = mu;
        var_t[c] = var;
        rstd[c] = T(1) / std::sqrt(var + eps);
        const T gv = gamma.value()[c], bv = beta.value()[c];
        for (std::size_t b = 0; b < d.b; ++b) {
            const std::size_t off = (b * d.c + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                xhat[off + i] = (src[off + i] - mu) * rstd[c];
                out[off + i] = gv * xhat[off + i] + bv;
            }
        }
    }
    if (stats) *stats = BatchStats<T>{std::move(mean_t), std::move(var_t), count};
    const auto idx = x.id(), idg = gamma.id(), idb = beta.id();
    return x.tape().record("batch_norm", std::move(out), {x, gamma, beta},
                           [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, const Tensor<T>& g) {
                               const T* go = g.data().data();
                               const T* gp = t.value(idg).data().data();
                               const bool need_affine = t.needs_grad(idg) || t.needs_grad(idb);
                               T* dg = need_affine ? t.grad_buffer(idg).data().data() : nullptr;
                               T* db = need_affine ? t.grad_buffer(idb).data().data() : nullptr;
                               T* dx = t.needs_grad(idx) ? t.grad_buffer(idx).data().data() : nullptr;
                               for (std::size_t c = 0; c < d.c; ++c) {
                                   T sg = 0, sgx = 0;
                                   for (std::size_t b = 0; b < d.b; ++b) {
                                       const std::size_t off = (b * d.c + c) * hw;
                                       for (std::size_t i = 0; i < hw; ++i) {
                                           sg += go[off + i];
                                           sgx += go[off + i] * xhat[off + i];
                                       }
                                   }
                                   if (dg) {
                                       dg[c] += sgx;
                                       db[c] += sg;
                                   }
                                   if (!dx) continue;
                                   const T m1 = sg / static_cast<T>(count), m2 = sgx / static_cast<T>(count);
                                   const T k = gp[c] * rstd[c];
                                   for (std::size_t b = 0; b < d.b; ++b) {
                                       const std::size_t off = (b * d.c + c) * hw;
                                       for (std::size_t i = 0; i < hw; ++i)
                                           dx[off + i] += k * (go[off + i] - m1 - xhat[off + i] * m2);
                                   }
                               }
                           });
}

template <typename T>
Var<T> batch_norm_infer(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, const Tensor<T>& running_mean,
                        const Tensor<T>& running_var, T eps) {
    const auto d = image_dims(x.shape(), "batch_norm");
    if (gamma.value().numel() != d.c || running_mean.numel() != d.c || running_var.numel() != d.c) {
        throw DimensionError("batch_norm: params " + shape_str(gamma.shape()) + " for input " + shape_str(x.shape()));
    }
    const std::size_t hw = d.h * d.w;
    std::vector<T> rstd(d.c);
    for (std::size_t c = 0; c < d.c; ++c) rstd[c] = T(1) / std::sqrt(running_var[c] + eps);
    Tensor<T> out(x.shape());
    const T* src = x.value().data().data();
    for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t off = (b * d.c + c) * hw;
            const T k = gamma.value()[c] * rstd[c], m = running_mean[c], bv = beta.value()[c];
            for (std::size_t i = 0; i < hw; ++i) out[off + i] = k * (src[off + i] - m) + bv;
        }
    const auto idx = x.id(), idg = gamma.id(), idb = beta.id();
    return x.tape().record("batch_norm_infer", std::move(out), {x, gamma, beta},
                           [=, rm = running_mean](Tape<T>& t, const Tensor<T>& g) {
                               const T* xv = t.value(idx).data().data();
                               const T* gp = t.value(idg).data().data();
                               const bool need_affine = t.needs_grad(idg) || t.needs_grad(idb);
                               T* dg = need_affine ? t.grad_buffer(idg).data().data() : nullptr;
                               T* db = need_affine ? t.grad_buffer(idb).data().data() : nullptr;
                               T* dx = t.needs_grad(idx) ? t.grad_buffer(idx).data().data() : nullptr;
                               for (std::size_t b = 0; b < d.b; ++b)
                                   for (std::size_t c = 0; c < d.c; ++c) {
                                       const std::size_t off = (b * d.c + c) * hw;
                                       for (std::size_t i = 0; i < hw; ++i) {
                                           const T go = g[off + i];
                                           if (dg) {
                                               dg[c] += go * (xv[off + i] - rm[c]) * rstd[c];
                                               db[c] += go;
                                           }
                                           if (dx) dx[off + i] += go * gp[c] * rstd[c];
                                       }
                                   }
                           });
}

template <typename T>
Var<T> bce(const Tensor<T>& target, const Var<T>& prob, T eps) {
    if (target.shape() != prob.shape()) {
        throw DimensionError("bce: target " + shape_str(target.shape()) + " vs prediction " + shape_str(prob.shape()));
    }
    const auto a = prob.value().data();
    const auto y = target.data();
    const T n = static_cast<T>(a.size());
    T total = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const T p = std::clamp(a[i], eps, T(1) - eps);
        total -= y[i] * std::log(p) + (T(1) - y[i]) * std::log(T(1) - p);
    }
    const auto id = prob.id();
    return prob.tape().record("bce", Tensor<T>::scalar(total / n), {prob}, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto av = t.value(id).data();
        auto gd = t.grad_buffer(id).data();
        for (std::size_t i = 0; i < av.size(); ++i) {
            if (av[i] < eps || av[i] > T(1) - eps) continue;  // clamped: flat
            gd[i] += g[0] * (-(target[i] / av[i]) + (T(1) - target[i]) / (T(1) - av[i])) / n;
        }
    });
}

template <typename T>
Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& target) {
    if (target.shape() != logits.shape()) {
        throw DimensionError("bce: target " + shape_str(target.shape()) + " vs logits " + shape_str(logits.shape()));
    }
    const auto z = logits.value().data();
    const auto y = target.data();
    const T n = static_cast<T>(z.size());
    T total = 0;
    for (std::size_t i = 0; i < z.size(); ++i)
        total += std::max(z[i], T(0)) - z[i] * y[i] + std::log1p(std::exp(-std::abs(z[i])));
    const auto id = logits.id();
    return logits.tape().record("bce_logits", Tensor<T>::scalar(total / n), {logits}, [=](Tape<T>& t, const Tensor<T>& g) {
        const auto zv = t.value(id).data();
        auto gd = t.grad_buffer(id).data();
        for (std::size_t i = 0; i < zv.size(); ++i) gd[i] += g[0] * (stable_sigmoid(zv[i]) - target[i]) / n;
    });
}

#define YMASK_INSTANTIATE_OPS(T)                                                                                  \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                            \
    template Var<T> scale(const Var<T>&, T);                                                                      \
    template Var<T> add_scalar(const Var<T>&, T);                                                                 \
    template Var<T> sum(const Var<T>&);                                                                           \
    template Var<T> mean(const Var<T>&);                                                                          \
    template Var<T> reshape(const Var<T>&, Shape);                                                                \
    template Var<T> permute(const Var<T>&, const std::vector<std::size_t>&);                                      \
    template Var<T> transpose(const Var<T>&);                                                                     \
    template Var<T> concat(std::span<const Var<T>>, std::size_t);                                                 \
    template Var<T> slice(const Var<T>&, std::size_t, std::size_t, std::size_t);                                  \
    template Var<T> gather(const Var<T>&, std::vector<std::size_t>, Shape);                                       \
    template Var<T> pad2d(const Var<T>&, std::size_t, std::size_t, std::size_t, std::size_t);                     \
    template Var<T> upsample_nearest(const Var<T>&, std::size_t);                                                 \
    template Var<T> max_pool2d(const Var<T>&, std::size_t, std::size_t, std::size_t);                             \
    template Var<T> roll2d(const Var<T>&, long, long);                                                            \
    template Var<T> matmul(const Var<T>&, const Var<T>&);                                                         \
    template Var<T> attention(const Var<T>&, const Var<T>&, const Var<T>&, T, const Var<T>*, const Tensor<T>*);    \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, std::size_t, std::size_t);                               \
    template Var<T> unfold(const Var<T>&, std::size_t, std::size_t, std::size_t);                                 \
    template Var<T> pool_global(const Var<T>&, PoolMode, PoolAxis);                                               \
    template Var<T> group_pool(const Var<T>&, std::size_t, PoolMode);                                             \
    template Var<T> softmax(const Var<T>&, std::size_t);                                                          \
    template Var<T> pointwise(const Var<T>&, Activation);                                                         \
    template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&, T);                                   \
    template Var<T> batch_norm_train(const Var<T>&, const Var<T>&, const Var<T>&, T, BatchStats<T>*);             \
    template Var<T> batch_norm_infer(const Var<T>&, const Var<T>&, const Var<T>&, const Tensor<T>&,               \
                                     const Tensor<T>&, T);                                                        \
    template Var<T> bce(const Tensor<T>&, const Var<T>&, T);                                                      \
    template Var<T> bce_with_logits(const Var<T>&, const Tensor<T>&);                                             \
    template void kernels::gemm_nn(std::size_t, std::size_t, std::size_t, const T*, const T*, T*, bool);          \
    template void kernels::im2col(const T*, std::size_t, std::size_t, std::size_t, std::size_t, std::size_t,      \
                                  std::size_t, std::size_t, std::size_t, T*);

YMASK_INSTANTIATE_OPS(float)
YMASK_INSTANTIATE_OPS(double)

}  // namespace ymask
