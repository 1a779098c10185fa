#include "seqcls/nn/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace seqcls::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
}

void require_rank(const Var& x, int rank, const char* op) {
    if (x.value().rank() != rank)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                                    shape_str(x.shape()));
}

template <class F>
Var unary(const Var& x, F f, BackwardFn (*make_backward)(const Var&)) {
    Tensor y(x.shape());
    const double* src = x.value().data();
    double* dst = y.data();
    for (std::int64_t i = 0; i < y.numel(); ++i) dst[i] = f(src[i]);
    if (!records({&x})) return Var(std::move(y));
    return attach(std::move(y), {x}, make_backward(x));
}

// Every unit of im2col work covers one (sample, output depth) slice.
struct ConvPlan {
    std::int64_t n, c, d, h, w;
    std::int64_t o, kd, kh, kw;
    std::int64_t od, oh, ow;
    std::array<int, 3> stride, pad;

    std::int64_t plane() const { return oh * ow; }
    std::int64_t patch() const { return c * kd * kh * kw; }
    std::int64_t units() const { return n * od; }

    // Writes unit `u` into columns [col_off, col_off + plane) of a row-major
    // matrix with `cols` columns.
    void im2col(const double* x, std::int64_t u, double* col, std::int64_t cols, std::int64_t col_off) const {
        const std::int64_t ni = u / od, odi = u % od;
        const double* xn = x + ni * c * d * h * w;
        std::int64_t row = 0;
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t a = 0; a < kd; ++a) {
                const std::int64_t id = odi * stride[0] - pad[0] + a;
                for (std::int64_t b = 0; b < kh; ++b)
                    for (std::int64_t e = 0; e < kw; ++e, ++row) {
                        double* dst = col + row * cols + col_off;
                        if (id < 0 || id >= d) {
                            std::fill(dst, dst + plane(), 0.0);
                            continue;
                        }
                        const double* src = xn + (ci * d + id) * h * w;
                        for (std::int64_t y = 0; y < oh; ++y) {
                            const std::int64_t ih = y * stride[1] - pad[1] + b;
                            double* drow = dst + y * ow;
                            if (ih < 0 || ih >= h) {
                                std::fill(drow, drow + ow, 0.0);
                                continue;
                            }
                            const double* srow = src + ih * w;
                            for (std::int64_t xo = 0; xo < ow; ++xo) {
                                const std::int64_t iw = xo * stride[2] - pad[2] + e;
                                drow[xo] = (iw >= 0 && iw < w) ? srow[iw] : 0.0;
                            }
                        }
                    }
            }
    }

    void col2im(const double* col, std::int64_t cols, std::int64_t col_off, std::int64_t u, double* dx) const {
        const std::int64_t ni = u / od, odi = u % od;
        double* dxn = dx + ni * c * d * h * w;
        std::int64_t row = 0;
        for (std::int64_t ci = 0; ci < c; ++ci)
            for (std::int64_t a = 0; a < kd; ++a) {
                const std::int64_t id = odi * stride[0] - pad[0] + a;
                for (std::int64_t b = 0; b < kh; ++b)
                    for (std::int64_t e = 0; e < kw; ++e, ++row) {
                        if (id < 0 || id >= d) continue;
                        const double* src = col + row * cols + col_off;
                        double* dst = dxn + (ci * d + id) * h * w;
                        for (std::int64_t y = 0; y < oh; ++y) {
                            const std::int64_t ih = y * stride[1] - pad[1] + b;
                            if (ih < 0 || ih >= h) continue;
                            const double* srow = src + y * ow;
                            double* drow = dst + ih * w;
                            for (std::int64_t xo = 0; xo < ow; ++xo) {
                                const std::int64_t iw = xo * stride[2] - pad[2] + e;
                                if (iw >= 0 && iw < w) drow[iw] += srow[xo];
                            }
                        }
                    }
            }
    }

    // Units per GEMM so that the column buffer stays around 32 MB.
    std::int64_t units_per_chunk() const {
        constexpr std::int64_t budget = std::int64_t{1} << 22;
        return std::max<std::int64_t>(1, budget / std::max<std::int64_t>(1, patch() * plane()));
    }
};

ConvPlan make_plan(const Shape& xs, const Shape& ws, const Conv3dGeometry& g) {
    if (xs.size() != 5 || ws.size() != 5)
        throw std::invalid_argument("conv3d: expected 5-D input and weight, got " + shape_str(xs) + " and " +
                                    shape_str(ws));
    if (xs[1] != ws[1])
        throw std::invalid_argument("conv3d: input channels " + std::to_string(xs[1]) + " do not match weight " +
                                    shape_str(ws));
    ConvPlan p{xs[0], xs[1], xs[2], xs[3], xs[4], ws[0], ws[2], ws[3], ws[4], 0, 0, 0, g.stride, g.padding};
    p.od = (p.d + 2 * g.padding[0] - p.kd) / g.stride[0] + 1;
    p.oh = (p.h + 2 * g.padding[1] - p.kh) / g.stride[1] + 1;
    p.ow = (p.w + 2 * g.padding[2] - p.kw) / g.stride[2] + 1;
    if (p.od <= 0 || p.oh <= 0 || p.ow <= 0)
        throw std::invalid_argument("conv3d: input " + shape_str(xs) + " too small for kernel " + shape_str(ws));
    return p;
}

struct PoolPlan {
    std::int64_t n, c, d, h, w, od, oh, ow;
};

PoolPlan make_pool_plan(const Shape& xs, const Pool3dGeometry& g) {
    if (xs.size() != 5) throw std::invalid_argument("max_pool3d: expected 5-D input, got " + shape_str(xs));
    PoolPlan p{xs[0], xs[1], xs[2], xs[3], xs[4], 0, 0, 0};
    p.od = (p.d + 2 * g.padding[0] - g.kernel[0]) / g.stride[0] + 1;
    p.oh = (p.h + 2 * g.padding[1] - g.kernel[1]) / g.stride[1] + 1;
    p.ow = (p.w + 2 * g.padding[2] - g.kernel[2]) / g.stride[2] + 1;
    if (p.od <= 0 || p.oh <= 0 || p.ow <= 0)
        throw std::invalid_argument("max_pool3d: input " + shape_str(xs) + " too small");
    return p;
}

// Splits `shape` around `dim` into (outer, extent, inner).
std::array<std::int64_t, 3> split_at(const Shape& shape, int dim) {
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < dim; ++i) outer *= shape[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < shape.size(); ++i) inner *= shape[i];
    return {outer, shape[static_cast<std::size_t>(dim)], inner};
}

int normalize_dim(int dim, int rank, const char* op) {
    if (dim < 0) dim += rank;
    if (dim < 0 || dim >= rank) throw std::invalid_argument(std::string(op) + ": dim out of range");
    return dim;
}

}  // namespace

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor y = a.value();
    y.add_(b.value());
    if (!records({&a, &b})) return Var(std::move(y));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return attach(std::move(y), {a, b}, [an, bn](const Tensor& g, const Tensor&) {
        if (an->requires_grad) an->accumulate(g);
        if (bn->requires_grad) bn->accumulate(g);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor y(a.shape());
    const double *pa = a.value().data(), *pb = b.value().data();
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = pa[i] * pb[i];
    if (!records({&a, &b})) return Var(std::move(y));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return attach(std::move(y), {a, b}, [an, bn](const Tensor& g, const Tensor&) {
        if (an->requires_grad) {
            Tensor ga(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * bn->value[i];
            an->accumulate(ga);
        }
        if (bn->requires_grad) {
            Tensor gb(g.shape());
            for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * an->value[i];
            bn->accumulate(gb);
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor y = a.value();
    for (auto& v : y.values()) v *= s;
    if (!records({&a})) return Var(std::move(y));
    auto an = a.node_ptr();
    return attach(std::move(y), {a}, [an, s](const Tensor& g, const Tensor&) {
        Tensor ga = g;
        for (auto& v : ga.values()) v *= s;
        an->accumulate(ga);
    });
}

Var relu(const Var& x) {
    return unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](const Var& in) -> BackwardFn {
            auto xn = in.node_ptr();
            return [xn](const Tensor& g, const Tensor& out) {
                Tensor gx(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = out[i] > 0.0 ? g[i] : 0.0;
                xn->accumulate(gx);
            };
        });
}

Var sigmoid(const Var& x) {
    return unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
        [](const Var& in) -> BackwardFn {
            auto xn = in.node_ptr();
            return [xn](const Tensor& g, const Tensor& out) {
                Tensor gx(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * out[i] * (1.0 - out[i]);
                xn->accumulate(gx);
            };
        });
}

Var tanh(const Var& x) {
    return unary(
        x, [](double v) { return std::tanh(v); },
        [](const Var& in) -> BackwardFn {
            auto xn = in.node_ptr();
            return [xn](const Tensor& g, const Tensor& out) {
                Tensor gx(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = g[i] * (1.0 - out[i] * out[i]);
                xn->accumulate(gx);
            };
        });
}

Var add_broadcast(const Var& x, const Var& p) {
    const auto& xs = x.shape();
    const auto& ps = p.shape();
    if (ps.size() > xs.size() || !std::equal(ps.rbegin(), ps.rend(), xs.rbegin()))
        throw std::invalid_argument("add_broadcast: " + shape_str(ps) + " is not a trailing shape of " +
                                    shape_str(xs));
    const std::int64_t block = p.value().numel();
    const std::int64_t reps = block == 0 ? 0 : x.value().numel() / block;
    Tensor y = x.value();
    for (std::int64_t r = 0; r < reps; ++r)
        for (std::int64_t i = 0; i < block; ++i) y[r * block + i] += p.value()[i];
    if (!records({&x, &p})) return Var(std::move(y));
    auto xn = x.node_ptr(), pn = p.node_ptr();
    return attach(std::move(y), {x, p}, [xn, pn, block, reps](const Tensor& g, const Tensor&) {
        if (xn->requires_grad) xn->accumulate(g);
        if (pn->requires_grad) {
            Tensor gp(pn->value.shape());
            for (std::int64_t r = 0; r < reps; ++r)
                for (std::int64_t i = 0; i < block; ++i) gp[i] += g[r * block + i];
            pn->accumulate(gp);
        }
    });
}

Var reshape(const Var& x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn](const Tensor& g, const Tensor&) { xn->accumulate(g); });
}

namespace {

// Gathers `src` (shape `in_shape`) into the permuted layout.
Tensor permute_tensor(const Tensor& src, const std::vector<int>& order) {
    const auto& in_shape = src.shape();
    const int r = static_cast<int>(in_shape.size());
    std::vector<std::int64_t> in_strides(static_cast<std::size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(i) + 1] * in_shape[static_cast<std::size_t>(i) + 1];
    Shape out_shape(static_cast<std::size_t>(r));
    std::vector<std::int64_t> strides(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    }
    Tensor out(out_shape);
    const std::int64_t n = out.numel();
    if (n == 0) return out;
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t off = 0;
    const std::int64_t last = out_shape.back(), last_stride = strides.back();
    const double* s = src.data();
    double* d = out.data();
    for (std::int64_t i = 0; i < n; i += last) {
        for (std::int64_t k = 0; k < last; ++k) d[i + k] = s[off + k * last_stride];
        for (int a = r - 2; a >= 0; --a) {
            auto ua = static_cast<std::size_t>(a);
            if (++idx[ua] < out_shape[ua]) {
                off += strides[ua];
                break;
            }
            off -= strides[ua] * (out_shape[ua] - 1);
            idx[ua] = 0;
        }
    }
    return out;
}

}  // namespace

Var permute(const Var& x, const std::vector<int>& order) {
    const int r = x.value().rank();
    if (static_cast<int>(order.size()) != r) throw std::invalid_argument("permute: order rank mismatch");
    std::vector<int> inverse(static_cast<std::size_t>(r), -1);
    for (int i = 0; i < r; ++i) {
        const int o = order[static_cast<std::size_t>(i)];
        if (o < 0 || o >= r || inverse[static_cast<std::size_t>(o)] != -1)
            throw std::invalid_argument("permute: invalid order");
        inverse[static_cast<std::size_t>(o)] = i;
    }
    Tensor y = permute_tensor(x.value(), order);
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, inverse](const Tensor& g, const Tensor&) {
        xn->accumulate(permute_tensor(g, inverse));
    });
}

Var narrow(const Var& x, int dim, std::int64_t start, std::int64_t length) {
    const auto& xs = x.shape();
    dim = normalize_dim(dim, static_cast<int>(xs.size()), "narrow");
    const auto [outer, extent, inner] = split_at(xs, dim);
    if (start < 0 || length < 0 || start + length > extent) throw std::invalid_argument("narrow: range out of bounds");
    Shape ys = xs;
    ys[static_cast<std::size_t>(dim)] = length;
    Tensor y(ys);
    for (std::int64_t o = 0; o < outer; ++o)
        std::copy_n(x.value().data() + (o * extent + start) * inner, length * inner, y.data() + o * length * inner);
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, outer, extent, inner, start, length](const Tensor& g, const Tensor&) {
        Tensor& gx = xn->grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o) {
            const double* src = g.data() + o * length * inner;
            double* dst = gx.data() + (o * extent + start) * inner;
            for (std::int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
    });
}

Var mean_dim(const Var& x, int dim) {
    const auto& xs = x.shape();
    dim = normalize_dim(dim, static_cast<int>(xs.size()), "mean_dim");
    const auto [outer, extent, inner] = split_at(xs, dim);
    if (extent == 0) throw std::invalid_argument("mean_dim: empty dimension");
    Shape ys = xs;
    ys.erase(ys.begin() + dim);
    Tensor y(ys);
    const double inv = 1.0 / static_cast<double>(extent);
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t e = 0; e < extent; ++e)
            for (std::int64_t i = 0; i < inner; ++i) y[o * inner + i] += x.value()[(o * extent + e) * inner + i] * inv;
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, outer, extent, inner, inv](const Tensor& g, const Tensor&) {
        Tensor gx(xn->value.shape());
        for (std::int64_t o = 0; o < outer; ++o)
            for (std::int64_t e = 0; e < extent; ++e)
                for (std::int64_t i = 0; i < inner; ++i) gx[(o * extent + e) * inner + i] = g[o * inner + i] * inv;
        xn->accumulate(gx);
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    require_rank(x, 2, "linear");
    require_rank(w, 2, "linear");
    const std::int64_t n = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
    if (w.shape()[1] != in)
        throw std::invalid_argument("linear: input " + shape_str(x.shape()) + " does not match weight " +
                                    shape_str(w.shape()));
    if (b.defined() && (b.value().rank() != 1 || b.shape()[0] != out))
        throw std::invalid_argument("linear: bias shape " + shape_str(b.shape()));
    Tensor y({n, out});
    MatMap ym(y.data(), n, out);
    ConstMatMap xm(x.value().data(), n, in), wm(w.value().data(), out, in);
    ym.noalias() = xm * wm.transpose();
    if (b.defined()) ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out);
    const bool with_bias = b.defined();
    if (!records({&x, &w, with_bias ? &b : nullptr})) return Var(std::move(y));
    auto xn = x.node_ptr(), wn = w.node_ptr();
    NodePtr bn = with_bias ? b.node_ptr() : nullptr;
    std::vector<Var> inputs{x, w};
    if (with_bias) inputs.push_back(b);
    return attach(std::move(y), std::move(inputs), [xn, wn, bn, n, in, out](const Tensor& g, const Tensor&) {
        ConstMatMap gm(g.data(), n, out);
        if (xn->requires_grad) {
            MatMap gx(xn->grad_buffer().data(), n, in);
            gx.noalias() += gm * ConstMatMap(wn->value.data(), out, in);
        }
        if (wn->requires_grad) {
            MatMap gw(wn->grad_buffer().data(), out, in);
            gw.noalias() += gm.transpose() * ConstMatMap(xn->value.data(), n, in);
        }
        if (bn && bn->requires_grad) {
            Eigen::Map<Eigen::RowVectorXd> gb(bn->grad_buffer().data(), out);
            gb += gm.colwise().sum();
        }
    });
}

Var bmm(const Var& a, const Var& b, bool transpose_b) {
    require_rank(a, 3, "bmm");
    require_rank(b, 3, "bmm");
    const std::int64_t groups = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
    const std::int64_t n = transpose_b ? b.shape()[1] : b.shape()[2];
    const std::int64_t bk = transpose_b ? b.shape()[2] : b.shape()[1];
    if (b.shape()[0] != groups || bk != k)
        throw std::invalid_argument("bmm: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    Tensor y({groups, m, n});
    for (std::int64_t gi = 0; gi < groups; ++gi) {
        ConstMatMap am(a.value().data() + gi * m * k, m, k);
        MatMap ym(y.data() + gi * m * n, m, n);
        if (transpose_b)
            ym.noalias() = am * ConstMatMap(b.value().data() + gi * n * k, n, k).transpose();
        else
            ym.noalias() = am * ConstMatMap(b.value().data() + gi * k * n, k, n);
    }
    if (!records({&a, &b})) return Var(std::move(y));
    auto an = a.node_ptr(), bn = b.node_ptr();
    return attach(std::move(y), {a, b}, [an, bn, groups, m, k, n, transpose_b](const Tensor& g, const Tensor&) {
        for (std::int64_t gi = 0; gi < groups; ++gi) {
            ConstMatMap gm(g.data() + gi * m * n, m, n);
            ConstMatMap am(an->value.data() + gi * m * k, m, k);
            if (an->requires_grad) {
                MatMap ga(an->grad_buffer().data() + gi * m * k, m, k);
                if (transpose_b)
                    ga.noalias() += gm * ConstMatMap(bn->value.data() + gi * n * k, n, k);
                else
                    ga.noalias() += gm * ConstMatMap(bn->value.data() + gi * k * n, k, n).transpose();
            }
            if (bn->requires_grad) {
                if (transpose_b) {
                    MatMap gb(bn->grad_buffer().data() + gi * n * k, n, k);
                    gb.noalias() += gm.transpose() * am;
                } else {
                    MatMap gb(bn->grad_buffer().data() + gi * k * n, k, n);
                    gb.noalias() += am.transpose() * gm;
                }
            }
        }
    });
}

Var softmax_last(const Var& x) {
    const std::int64_t d = x.value().dim(-1);
    const std::int64_t rows = d == 0 ? 0 : x.value().numel() / d;
    Tensor y(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* src = x.value().data() + r * d;
        double* dst = y.data() + r * d;
        const double mx = *std::max_element(src, src + d);
        double sum = 0.0;
        for (std::int64_t i = 0; i < d; ++i) sum += (dst[i] = std::exp(src[i] - mx));
        for (std::int64_t i = 0; i < d; ++i) dst[i] /= sum;
    }
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, rows, d](const Tensor& g, const Tensor& out) {
        Tensor gx(g.shape());
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* gy = g.data() + r * d;
            const double* yv = out.data() + r * d;
            double dot = 0.0;
            for (std::int64_t i = 0; i < d; ++i) dot += gy[i] * yv[i];
            for (std::int64_t i = 0; i < d; ++i) gx[r * d + i] = yv[i] * (gy[i] - dot);
        }
        xn->accumulate(gx);
    });
}

Var layer_norm_last(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const std::int64_t d = x.value().dim(-1);
    if (gamma.value().numel() != d || beta.value().numel() != d)
        throw std::invalid_argument("layer_norm_last: affine parameters must have " + std::to_string(d) + " elements");
    const std::int64_t rows = x.value().numel() / d;
    Tensor y(x.shape()), xhat(x.shape());
    std::vector<double> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* src = x.value().data() + r * d;
        double mean = 0.0;
        for (std::int64_t i = 0; i < d; ++i) mean += src[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t i = 0; i < d; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (std::int64_t i = 0; i < d; ++i) {
            const double h = (src[i] - mean) * is;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gamma.value()[i] + beta.value()[i];
        }
    }
    if (!records({&x, &gamma, &beta})) return Var(std::move(y));
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    return attach(std::move(y), {x, gamma, beta},
                  [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](const Tensor& g,
                                                                                                const Tensor&) {
                      if (gn->requires_grad || bn->requires_grad) {
                          Tensor gg(gn->value.shape()), gb(bn->value.shape());
                          for (std::int64_t r = 0; r < rows; ++r)
                              for (std::int64_t i = 0; i < d; ++i) {
                                  gg[i] += g[r * d + i] * xhat[r * d + i];
                                  gb[i] += g[r * d + i];
                              }
                          if (gn->requires_grad) gn->accumulate(gg);
                          if (bn->requires_grad) bn->accumulate(gb);
                      }
                      if (!xn->requires_grad) return;
                      Tensor gx(xn->value.shape());
                      const double invd = 1.0 / static_cast<double>(d);
                      for (std::int64_t r = 0; r < rows; ++r) {
                          double sum = 0.0, dot = 0.0;
                          for (std::int64_t i = 0; i < d; ++i) {
                              const double gh = g[r * d + i] * gn->value[i];
                              sum += gh;
                              dot += gh * xhat[r * d + i];
                          }
                          for (std::int64_t i = 0; i < d; ++i) {
                              const double gh = g[r * d + i] * gn->value[i];
                              gx[r * d + i] = inv_std[static_cast<std::size_t>(r)] *
                                              (gh - sum * invd - xhat[r * d + i] * dot * invd);
                          }
                      }
                      xn->accumulate(gx);
                  });
}

Shape conv3d_output_shape(const Shape& x, const Shape& w, const Conv3dGeometry& geometry) {
    const ConvPlan p = make_plan(x, w, geometry);
    return {p.n, p.o, p.od, p.oh, p.ow};
}

Var conv3d(const Var& x, const Var& w, const Conv3dGeometry& geometry) {
    const ConvPlan p = make_plan(x.shape(), w.shape(), geometry);
    const std::int64_t plane = p.plane(), patch = p.patch(), units = p.units(), per = p.units_per_chunk();
    Tensor y({p.n, p.o, p.od, p.oh, p.ow});
    ConstMatMap wm(w.value().data(), p.o, patch);
    std::vector<double> col, out;
    for (std::int64_t u0 = 0; u0 < units; u0 += per) {
        const std::int64_t cnt = std::min(per, units - u0), cols = cnt * plane;
        col.resize(static_cast<std::size_t>(patch * cols));
        out.resize(static_cast<std::size_t>(p.o * cols));
        for (std::int64_t k = 0; k < cnt; ++k) p.im2col(x.value().data(), u0 + k, col.data(), cols, k * plane);
        MatMap om(out.data(), p.o, cols);
        om.noalias() = wm * ConstMatMap(col.data(), patch, cols);
        for (std::int64_t k = 0; k < cnt; ++k) {
            const std::int64_t u = u0 + k, ni = u / p.od, odi = u % p.od;
            for (std::int64_t o = 0; o < p.o; ++o)
                std::copy_n(out.data() + o * cols + k * plane, plane,
                            y.data() + ((ni * p.o + o) * p.od + odi) * plane);
        }
    }
    if (!records({&x, &w})) return Var(std::move(y));
    auto xn = x.node_ptr(), wn = w.node_ptr();
    return attach(std::move(y), {x, w}, [xn, wn, p](const Tensor& g, const Tensor&) {
        const std::int64_t plane = p.plane(), patch = p.patch(), units = p.units(), per = p.units_per_chunk();
        std::vector<double> col, gout, gcol;
        ConstMatMap wm(wn->value.data(), p.o, patch);
        for (std::int64_t u0 = 0; u0 < units; u0 += per) {
            const std::int64_t cnt = std::min(per, units - u0), cols = cnt * plane;
            gout.resize(static_cast<std::size_t>(p.o * cols));
            for (std::int64_t k = 0; k < cnt; ++k) {
                const std::int64_t u = u0 + k, ni = u / p.od, odi = u % p.od;
                for (std::int64_t o = 0; o < p.o; ++o)
                    std::copy_n(g.data() + ((ni * p.o + o) * p.od + odi) * plane, plane,
                                gout.data() + o * cols + k * plane);
            }
            ConstMatMap gm(gout.data(), p.o, cols);
            if (wn->requires_grad) {
                col.resize(static_cast<std::size_t>(patch * cols));
                for (std::int64_t k = 0; k < cnt; ++k) p.im2col(xn->value.data(), u0 + k, col.data(), cols, k * plane);
                MatMap gw(wn->grad_buffer().data(), p.o, patch);
                gw.noalias() += gm * ConstMatMap(col.data(), patch, cols).transpose();
            }
            if (xn->requires_grad) {
                gcol.resize(static_cast<std::size_t>(patch * cols));
                MatMap gc(gcol.data(), patch, cols);
                gc.noalias() = wm.transpose() * gm;
                double* gx = xn->grad_buffer().data();
                for (std::int64_t k = 0; k < cnt; ++k) p.col2im(gcol.data(), cols, k * plane, u0 + k, gx);
            }
        }
    });
}

Shape pool3d_output_shape(const Shape& x, const Pool3dGeometry& geometry) {
    const PoolPlan p = make_pool_plan(x, geometry);
    return {p.n, p.c, p.od, p.oh, p.ow};
}

Var max_pool3d(const Var& x, const Pool3dGeometry& g) {
    const PoolPlan p = make_pool_plan(x.shape(), g);
    Tensor y({p.n, p.c, p.od, p.oh, p.ow});
    std::vector<std::int64_t> argmax(static_cast<std::size_t>(y.numel()));
    const double* src = x.value().data();
    std::int64_t out = 0;
    for (std::int64_t nc = 0; nc < p.n * p.c; ++nc) {
        const double* plane = src + nc * p.d * p.h * p.w;
        for (std::int64_t a = 0; a < p.od; ++a)
            for (std::int64_t b = 0; b < p.oh; ++b)
                for (std::int64_t e = 0; e < p.ow; ++e, ++out) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_i = -1;
                    for (int kd = 0; kd < g.kernel[0]; ++kd) {
                        const std::int64_t id = a * g.stride[0] - g.padding[0] + kd;
                        if (id < 0 || id >= p.d) continue;
                        for (int kh = 0; kh < g.kernel[1]; ++kh) {
                            const std::int64_t ih = b * g.stride[1] - g.padding[1] + kh;
                            if (ih < 0 || ih >= p.h) continue;
                            for (int kw = 0; kw < g.kernel[2]; ++kw) {
                                const std::int64_t iw = e * g.stride[2] - g.padding[2] + kw;
                                if (iw < 0 || iw >= p.w) continue;
                                const std::int64_t i = (id * p.h + ih) * p.w + iw;
                                if (plane[i] > best || best_i < 0) {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    y[out] = best;
                    argmax[static_cast<std::size_t>(out)] = nc * p.d * p.h * p.w + best_i;
                }
    }
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, argmax = std::move(argmax)](const Tensor& gr, const Tensor&) {
        Tensor& gx = xn->grad_buffer();
        for (std::size_t i = 0; i < argmax.size(); ++i) gx[argmax[i]] += gr[static_cast<std::int64_t>(i)];
    });
}

Var global_avg_pool(const Var& x) {
    const auto& xs = x.shape();
    if (xs.size() < 2) throw std::invalid_argument("global_avg_pool: expected rank >= 2");
    const std::int64_t nc = xs[0] * xs[1];
    const std::int64_t s = nc == 0 ? 0 : x.value().numel() / nc;
    if (s == 0) throw std::invalid_argument("global_avg_pool: empty spatial extent");
    Tensor y({xs[0], xs[1]});
    const double inv = 1.0 / static_cast<double>(s);
    for (std::int64_t i = 0; i < nc; ++i) {
        const double* src = x.value().data() + i * s;
        double sum = 0.0;
        for (std::int64_t k = 0; k < s; ++k) sum += src[k];
        y[i] = sum * inv;
    }
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, nc, s, inv](const Tensor& g, const Tensor&) {
        Tensor gx(xn->value.shape());
        for (std::int64_t i = 0; i < nc; ++i)
            for (std::int64_t k = 0; k < s; ++k) gx[i * s + k] = g[i] * inv;
        xn->accumulate(gx);
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormBuffers buffers, bool training,
               double momentum, double eps) {
    const auto& xs = x.shape();
    if (xs.size() < 2) throw std::invalid_argument("batch_norm: expected rank >= 2");
    const std::int64_t n = xs[0], c = xs[1];
    const std::int64_t s = (n * c) == 0 ? 0 : x.value().numel() / (n * c);
    const std::int64_t m = n * s;
    if (gamma.value().numel() != c || beta.value().numel() != c)
        throw std::invalid_argument("batch_norm: affine parameter size does not match channels");
    if (!buffers.running_mean || !buffers.running_var) throw std::invalid_argument("batch_norm: missing buffers");
    if (training && m < 2) throw std::invalid_argument("batch_norm: training needs more than one value per channel");

    std::vector<double> mean(static_cast<std::size_t>(c)), inv_std(static_cast<std::size_t>(c));
    const double* src = x.value().data();
    for (std::int64_t ci = 0; ci < c; ++ci) {
        double mu, var;
        if (training) {
            double sum = 0.0;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const double* p = src + (ni * c + ci) * s;
                for (std::int64_t k = 0; k < s; ++k) sum += p[k];
            }
            mu = sum / static_cast<double>(m);
            double sq = 0.0;
            for (std::int64_t ni = 0; ni < n; ++ni) {
                const double* p = src + (ni * c + ci) * s;
                for (std::int64_t k = 0; k < s; ++k) sq += (p[k] - mu) * (p[k] - mu);
            }
            var = sq / static_cast<double>(m);
            auto& rm = (*buffers.running_mean)[ci];
            auto& rv = (*buffers.running_var)[ci];
            rm = (1.0 - momentum) * rm + momentum * mu;
            rv = (1.0 - momentum) * rv + momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
        } else {
            mu = (*buffers.running_mean)[ci];
            var = (*buffers.running_var)[ci];
        }
        mean[static_cast<std::size_t>(ci)] = mu;
        inv_std[static_cast<std::size_t>(ci)] = 1.0 / std::sqrt(var + eps);
    }

    Tensor y(xs), xhat(xs);
    for (std::int64_t ni = 0; ni < n; ++ni)
        for (std::int64_t ci = 0; ci < c; ++ci) {
            const std::int64_t base = (ni * c + ci) * s;
            const double mu = mean[static_cast<std::size_t>(ci)], is = inv_std[static_cast<std::size_t>(ci)];
            const double ga = gamma.value()[ci], be = beta.value()[ci];
            for (std::int64_t k = 0; k < s; ++k) {
                const double h = (src[base + k] - mu) * is;
                xhat[base + k] = h;
                y[base + k] = ga * h + be;
            }
        }
    if (!records({&x, &gamma, &beta})) return Var(std::move(y));
    auto xn = x.node_ptr(), gn = gamma.node_ptr(), bn = beta.node_ptr();
    return attach(std::move(y), {x, gamma, beta},
                  [xn, gn, bn, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, s, m,
                   training](const Tensor& g, const Tensor&) {
                      std::vector<double> sum_g(static_cast<std::size_t>(c), 0.0), sum_gh(static_cast<std::size_t>(c), 0.0);
                      for (std::int64_t ni = 0; ni < n; ++ni)
                          for (std::int64_t ci = 0; ci < c; ++ci) {
                              const std::int64_t base = (ni * c + ci) * s;
                              for (std::int64_t k = 0; k < s; ++k) {
                                  sum_g[static_cast<std::size_t>(ci)] += g[base + k];
                                  sum_gh[static_cast<std::size_t>(ci)] += g[base + k] * xhat[base + k];
                              }
                          }
                      if (gn->requires_grad) {
                          Tensor gg(gn->value.shape());
                          for (std::int64_t ci = 0; ci < c; ++ci) gg[ci] = sum_gh[static_cast<std::size_t>(ci)];
                          gn->accumulate(gg);
                      }
                      if (bn->requires_grad) {
                          Tensor gb(bn->value.shape());
                          for (std::int64_t ci = 0; ci < c; ++ci) gb[ci] = sum_g[static_cast<std::size_t>(ci)];
                          bn->accumulate(gb);
                      }
                      if (!xn->requires_grad) return;
                      Tensor gx(xn->value.shape());
                      const double invm = 1.0 / static_cast<double>(m);
                      for (std::int64_t ni = 0; ni < n; ++ni)
                          for (std::int64_t ci = 0; ci < c; ++ci) {
                              const auto uc = static_cast<std::size_t>(ci);
                              const std::int64_t base = (ni * c + ci) * s;
                              const double k0 = gn->value[ci] * inv_std[uc];
                              for (std::int64_t k = 0; k < s; ++k) {
                                  const double gi = g[base + k];
                                  gx[base + k] = training ? k0 * (gi - sum_g[uc] * invm -
                                                                  xhat[base + k] * sum_gh[uc] * invm)
                                                          : k0 * gi;
                              }
                          }
                      xn->accumulate(gx);
                  });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
    if (weights.numel() != x.value().numel()) throw std::invalid_argument("weighted_sum: size mismatch");
    double s = 0.0;
    for (std::int64_t i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
    Tensor y({1}, s);
    if (!records({&x})) return Var(std::move(y));
    auto xn = x.node_ptr();
    return attach(std::move(y), {x}, [xn, weights](const Tensor& g, const Tensor&) {
        Tensor gx = weights;
        for (auto& v : gx.values()) v *= g[0];
        gx.reshape_(xn->value.shape());
        xn->accumulate(gx);
    });
}

}  // namespace seqcls::nn
