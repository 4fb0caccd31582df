#include "dsfer/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <utility>

namespace dsfer {

namespace {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

bool recording(std::initializer_list<const Tensor*> inputs) {
    if (!detail::autograd_enabled()) return false;
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) return true;
    }
    return false;
}

// Builds the output node; parents/backward are attached only when the
// tape is live for these inputs.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (recording(inputs)) {
        impl->requires_grad = true;
        impl->parents.reserve(inputs.size());
        for (const Tensor* t : inputs) impl->parents.push_back(t->impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(std::move(impl));
}

void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
              int padding) {
    require(input.rank() == 3, "conv2d: input must be [c,h,w], got " + shape_str(input.shape()));
    require(kernel.rank() == 4,
            "conv2d: kernel must be [c_out,c_in,k,k], got " + shape_str(kernel.shape()));
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = kernel.dim(0), k = kernel.dim(2);
    require(kernel.dim(1) == ci, "conv2d: kernel expects " + std::to_string(kernel.dim(1)) +
                                     " input channels, input has " + std::to_string(ci));
    require(kernel.dim(3) == k, "conv2d: kernel must be square, got " + shape_str(kernel.shape()));
    require(k % 2 == 1, "conv2d: kernel size must be odd, got " + std::to_string(k));
    require(bias.rank() == 1 && bias.dim(0) == co,
            "conv2d: bias must be [" + std::to_string(co) + "], got " + shape_str(bias.shape()));
    require(stride >= 1 && padding >= 0, "conv2d: stride/padding out of range");
    const int oh = (h + 2 * padding - k) / stride + 1;
    const int ow = (w + 2 * padding - k) / stride + 1;
    require(oh >= 1 && ow >= 1, "conv2d: kernel " + std::to_string(k) + " too large for input " +
                                    shape_str(input.shape()));

    const int ck2 = ci * k * k;
    const int npix = oh * ow;

    // im2col buffer, kept alive for the backward GEMMs.
    auto col = std::make_shared<std::vector<double>>(static_cast<size_t>(ck2) * npix);
    {
        const double* in = input.values().data();
        double* c = col->data();
        for (int ch = 0; ch < ci; ++ch) {
            const double* plane = in + static_cast<size_t>(ch) * h * w;
            for (int di = 0; di < k; ++di) {
                for (int dj = 0; dj < k; ++dj) {
                    double* row = c + (static_cast<size_t>(ch) * k * k + di * k + dj) * npix;
                    for (int oy = 0; oy < oh; ++oy) {
                        const int iy = oy * stride + di - padding;
                        if (iy < 0 || iy >= h) {
                            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = 0.0;
                            continue;
                        }
                        const double* src = plane + static_cast<size_t>(iy) * w;
                        for (int ox = 0; ox < ow; ++ox) {
                            const int ix = ox * stride + dj - padding;
                            row[oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : src[ix];
                        }
                    }
                }
            }
        }
    }

    std::vector<double> out(static_cast<size_t>(co) * npix);
    {
        ConstMapMat kmat(kernel.values().data(), co, ck2);
        ConstMapMat cmat(col->data(), ck2, npix);
        MapMat omat(out.data(), co, npix);
        omat.noalias() = kmat * cmat;
        for (int o = 0; o < co; ++o) omat.row(o).array() += bias.values()[static_cast<size_t>(o)];
    }

    auto in_impl = input.impl();
    auto k_impl = kernel.impl();
    auto b_impl = bias.impl();
    return make_result(
        {co, oh, ow}, std::move(out), {&input, &kernel, &bias},
        [in_impl, k_impl, b_impl, col, ci, h, w, co, k, oh, ow, stride, padding,
         ck2, npix](TensorImpl& self) {
            ConstMapMat go(self.grad.data(), co, npix);
            if (b_impl->requires_grad) {
                for (int o = 0; o < co; ++o) b_impl->grad[static_cast<size_t>(o)] += go.row(o).sum();
            }
            if (k_impl->requires_grad) {
                ConstMapMat cmat(col->data(), ck2, npix);
                MapMat gk(k_impl->grad.data(), co, ck2);
                gk.noalias() += go * cmat.transpose();
            }
            if (in_impl->requires_grad) {
                ConstMapMat kmat(k_impl->data.data(), co, ck2);
                RowMat gcol = kmat.transpose() * go;  // [ck2, npix]
                double* gin = in_impl->grad.data();
                for (int ch = 0; ch < ci; ++ch) {
                    double* plane = gin + static_cast<size_t>(ch) * h * w;
                    for (int di = 0; di < k; ++di) {
                        for (int dj = 0; dj < k; ++dj) {
                            const double* row =
                                gcol.data() + (static_cast<size_t>(ch) * k * k + di * k + dj) * npix;
                            for (int oy = 0; oy < oh; ++oy) {
                                const int iy = oy * stride + di - padding;
                                if (iy < 0 || iy >= h) continue;
                                double* dst = plane + static_cast<size_t>(iy) * w;
                                for (int ox = 0; ox < ow; ++ox) {
                                    const int ix = ox * stride + dj - padding;
                                    if (ix >= 0 && ix < w) dst[ix] += row[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
}

Tensor maxpool2(const Tensor& input) {
    require(input.rank() == 3, "maxpool2: input must be [c,h,w], got " + shape_str(input.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    require(h % 2 == 0 && w % 2 == 0,
            "maxpool2: spatial dims must be even, got " + shape_str(input.shape()));
    const int oh = h / 2, ow = w / 2;

    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    auto argmax = std::make_shared<std::vector<int>>(out.size());
    const double* in = input.values().data();
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = in + static_cast<size_t>(ch) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                int best = (2 * oy) * w + 2 * ox;
                double bv = plane[best];
                const int cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                     (2 * oy + 1) * w + 2 * ox + 1};
                for (int idx : cand) {
                    if (plane[idx] > bv) {
                        bv = plane[idx];
                        best = idx;
                    }
                }
                const size_t o = static_cast<size_t>(ch) * oh * ow + oy * ow + ox;
                out[o] = bv;
                (*argmax)[o] = ch * h * w + best;
            }
        }
    }

    auto in_impl = input.impl();
    return make_result({c, oh, ow}, std::move(out), {&input},
                       [in_impl, argmax](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               in_impl->grad[static_cast<size_t>((*argmax)[i])] += self.grad[i];
                           }
                       });
}

Tensor relu(const Tensor& input) {
    std::vector<double> out(input.values());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    auto in_impl = input.impl();
    return make_result(input.shape(), std::move(out), {&input}, [in_impl](TensorImpl& self) {
        if (!in_impl->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i) {
            if (in_impl->data[i] > 0.0) in_impl->grad[i] += self.grad[i];
        }
    });
}

Tensor sigmoid(const Tensor& input) {
    std::vector<double> out(input.values().size());
    for (size_t i = 0; i < out.size(); ++i) {
        const double x = input.values()[i];
        if (x >= 0.0) {
            out[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            const double e = std::exp(x);
            out[i] = e / (1.0 + e);
        }
    }
    auto in_impl = input.impl();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_result(input.shape(), std::move(out), {&input},
                       [in_impl, saved](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               const double y = (*saved)[i];
                               in_impl->grad[i] += self.grad[i] * y * (1.0 - y);
                           }
                       });
}

Tensor softmax_rows(const Tensor& input) {
    require(input.rank() == 2,
            "softmax_rows: input must be 2-D, got " + shape_str(input.shape()));
    const int n = input.dim(0), m = input.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m);
    const double* in = input.values().data();
    for (int i = 0; i < n; ++i) {
        const double* row = in + static_cast<size_t>(i) * m;
        double* orow = out.data() + static_cast<size_t>(i) * m;
        double mx = row[0];
        for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < m; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        const double inv = 1.0 / sum;
        for (int j = 0; j < m; ++j) orow[j] *= inv;
    }
    auto in_impl = input.impl();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_result({n, m}, std::move(out), {&input},
                       [in_impl, saved, n, m](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (int i = 0; i < n; ++i) {
                               const double* y = saved->data() + static_cast<size_t>(i) * m;
                               const double* g = self.grad.data() + static_cast<size_t>(i) * m;
                               double dot = 0.0;
                               for (int j = 0; j < m; ++j) dot += g[j] * y[j];
                               double* gi = in_impl->grad.data() + static_cast<size_t>(i) * m;
                               for (int j = 0; j < m; ++j) gi[j] += y[j] * (g[j] - dot);
                           }
                       });
}

Tensor channel_softmax_pair(const Tensor& logits) {
    require(logits.rank() == 3 && logits.dim(0) == 2,
            "channel_softmax_pair: input must be [2,h,w], got " + shape_str(logits.shape()));
    const int h = logits.dim(1), w = logits.dim(2);
    const size_t npix = static_cast<size_t>(h) * w;
    std::vector<double> out(npix);
    const double* z = logits.values().data();
    for (size_t p = 0; p < npix; ++p) {
        const double d = z[npix + p] - z[p];
        if (d >= 0.0) {
            out[p] = 1.0 / (1.0 + std::exp(-d));
        } else {
            const double e = std::exp(d);
            out[p] = e / (1.0 + e);
        }
    }
    auto in_impl = logits.impl();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_result({h, w}, std::move(out), {&logits},
                       [in_impl, saved, npix](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (size_t p = 0; p < npix; ++p) {
                               const double y = (*saved)[p];
                               const double g = self.grad[p] * y * (1.0 - y);
                               in_impl->grad[npix + p] += g;
                               in_impl->grad[p] -= g;
                           }
                       });
}

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta_shift,
                 Tensor running_mean, Tensor running_var, BnMode mode, double momentum,
                 double epsilon) {
    require(input.rank() == 3, "batchnorm: input must be [c,h,w], got " + shape_str(input.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int n = h * w;
    require(n > 0, "batchnorm: zero-size batch for input " + shape_str(input.shape()));
    require(gamma.rank() == 1 && gamma.dim(0) == c && beta_shift.rank() == 1 &&
                beta_shift.dim(0) == c,
            "batchnorm: affine params must be [" + std::to_string(c) + "]");
    require(running_mean.dim(0) == c && running_var.dim(0) == c,
            "batchnorm: running stats must be [" + std::to_string(c) + "]");

    std::vector<double> out(input.values().size());
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(c));
    const double* in = input.values().data();

    if (mode == BnMode::Train) {
        for (int ch = 0; ch < c; ++ch) {
            const double* plane = in + static_cast<size_t>(ch) * n;
            double mu = 0.0;
            for (int i = 0; i < n; ++i) mu += plane[i];
            mu /= n;
            double var = 0.0;
            for (int i = 0; i < n; ++i) {
                const double d = plane[i] - mu;
                var += d * d;
            }
            var /= n;
            (*mean)[static_cast<size_t>(ch)] = mu;
            (*inv_std)[static_cast<size_t>(ch)] = 1.0 / std::sqrt(var + epsilon);
            auto& rm = running_mean.mutable_values();
            auto& rv = running_var.mutable_values();
            rm[static_cast<size_t>(ch)] = (1.0 - momentum) * rm[static_cast<size_t>(ch)] + momentum * mu;
            rv[static_cast<size_t>(ch)] = (1.0 - momentum) * rv[static_cast<size_t>(ch)] + momentum * var;
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            (*mean)[static_cast<size_t>(ch)] = running_mean.values()[static_cast<size_t>(ch)];
            (*inv_std)[static_cast<size_t>(ch)] =
                1.0 / std::sqrt(running_var.values()[static_cast<size_t>(ch)] + epsilon);
        }
    }

    for (int ch = 0; ch < c; ++ch) {
        const double mu = (*mean)[static_cast<size_t>(ch)];
        const double is = (*inv_std)[static_cast<size_t>(ch)];
        const double g = gamma.values()[static_cast<size_t>(ch)];
        const double b = beta_shift.values()[static_cast<size_t>(ch)];
        const double* plane = in + static_cast<size_t>(ch) * n;
        double* oplane = out.data() + static_cast<size_t>(ch) * n;
        for (int i = 0; i < n; ++i) oplane[i] = g * (plane[i] - mu) * is + b;
    }

    auto in_impl = input.impl();
    auto g_impl = gamma.impl();
    auto b_impl = beta_shift.impl();
    const bool train = (mode == BnMode::Train);
    return make_result(
        input.shape(), std::move(out), {&input, &gamma, &beta_shift},
        [in_impl, g_impl, b_impl, mean, inv_std, c, n, train](TensorImpl& self) {
            for (int ch = 0; ch < c; ++ch) {
                const double mu = (*mean)[static_cast<size_t>(ch)];
                const double is = (*inv_std)[static_cast<size_t>(ch)];
                const double g = g_impl->data[static_cast<size_t>(ch)];
                const double* x = in_impl->data.data() + static_cast<size_t>(ch) * n;
                const double* go = self.grad.data() + static_cast<size_t>(ch) * n;

                double sum_go = 0.0, sum_go_xhat = 0.0;
                for (int i = 0; i < n; ++i) {
                    sum_go += go[i];
                    sum_go_xhat += go[i] * (x[i] - mu) * is;
                }
                if (g_impl->requires_grad) g_impl->grad[static_cast<size_t>(ch)] += sum_go_xhat;
                if (b_impl->requires_grad) b_impl->grad[static_cast<size_t>(ch)] += sum_go;
                if (!in_impl->requires_grad) continue;

                double* gx = in_impl->grad.data() + static_cast<size_t>(ch) * n;
                if (train) {
                    // d/dx of batch-stat normalization.
                    for (int i = 0; i < n; ++i) {
                        const double xhat = (x[i] - mu) * is;
                        gx[i] += g * is * (go[i] - sum_go / n - xhat * sum_go_xhat / n);
                    }
                } else {
                    for (int i = 0; i < n; ++i) gx[i] += g * is * go[i];
                }
            }
        });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2, "matmul: both inputs must be 2-D, got " +
                                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
    require(a.dim(1) == b.dim(0), "matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                                      shape_str(b.shape()));
    const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m);
    {
        ConstMapMat am(a.values().data(), n, k);
        ConstMapMat bm(b.values().data(), k, m);
        MapMat om(out.data(), n, m);
        om.noalias() = am * bm;
    }
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    return make_result({n, m}, std::move(out), {&a, &b},
                       [a_impl, b_impl, n, k, m](TensorImpl& self) {
                           ConstMapMat go(self.grad.data(), n, m);
                           if (a_impl->requires_grad) {
                               ConstMapMat bm(b_impl->data.data(), k, m);
                               MapMat ga(a_impl->grad.data(), n, k);
                               ga.noalias() += go * bm.transpose();
                           }
                           if (b_impl->requires_grad) {
                               ConstMapMat am(a_impl->data.data(), n, k);
                               MapMat gb(b_impl->grad.data(), k, m);
                               gb.noalias() += am.transpose() * go;
                           }
                       });
}

Tensor transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose: input must be 2-D, got " + shape_str(a.shape()));
    const int n = a.dim(0), m = a.dim(1);
    std::vector<double> out(static_cast<size_t>(n) * m);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            out[static_cast<size_t>(j) * n + i] = a.values()[static_cast<size_t>(i) * m + j];
        }
    }
    auto a_impl = a.impl();
    return make_result({m, n}, std::move(out), {&a}, [a_impl, n, m](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        for (int j = 0; j < m; ++j) {
            for (int i = 0; i < n; ++i) {
                a_impl->grad[static_cast<size_t>(i) * m + j] += self.grad[static_cast<size_t>(j) * n + i];
            }
        }
    });
}

Tensor reshape_matrix(const Tensor& input) {
    require(input.rank() == 3,
            "reshape_matrix: input must be [c,h,w], got " + shape_str(input.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int npix = h * w;
    std::vector<double> out(static_cast<size_t>(npix) * c);
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = input.values().data() + static_cast<size_t>(ch) * npix;
        for (int p = 0; p < npix; ++p) out[static_cast<size_t>(p) * c + ch] = plane[p];
    }
    auto in_impl = input.impl();
    return make_result({npix, c}, std::move(out), {&input},
                       [in_impl, c, npix](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (int ch = 0; ch < c; ++ch) {
                               double* plane = in_impl->grad.data() + static_cast<size_t>(ch) * npix;
                               for (int p = 0; p < npix; ++p) {
                                   plane[p] += self.grad[static_cast<size_t>(p) * c + ch];
                               }
                           }
                       });
}

Tensor matrix_to_chw(const Tensor& input, int h, int w) {
    require(input.rank() == 2, "matrix_to_chw: input must be 2-D, got " + shape_str(input.shape()));
    const int npix = input.dim(0), d = input.dim(1);
    require(npix == h * w, "matrix_to_chw: rows " + std::to_string(npix) + " != h*w = " +
                               std::to_string(h * w));
    std::vector<double> out(static_cast<size_t>(d) * npix);
    for (int p = 0; p < npix; ++p) {
        const double* row = input.values().data() + static_cast<size_t>(p) * d;
        for (int ch = 0; ch < d; ++ch) out[static_cast<size_t>(ch) * npix + p] = row[ch];
    }
    auto in_impl = input.impl();
    return make_result({d, h, w}, std::move(out), {&input},
                       [in_impl, d, npix](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (int p = 0; p < npix; ++p) {
                               double* row = in_impl->grad.data() + static_cast<size_t>(p) * d;
                               for (int ch = 0; ch < d; ++ch) {
                                   row[ch] += self.grad[static_cast<size_t>(ch) * npix + p];
                               }
                           }
                       });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3 && a.dim(1) == b.dim(1) && a.dim(2) == b.dim(2),
            "concat_channels: spatial dims disagree, " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int ca = a.dim(0), cb = b.dim(0), h = a.dim(1), w = a.dim(2);
    std::vector<double> out;
    out.reserve(a.values().size() + b.values().size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    const size_t na = a.values().size();
    return make_result({ca + cb, h, w}, std::move(out), {&a, &b},
                       [a_impl, b_impl, na](TensorImpl& self) {
                           if (a_impl->requires_grad) {
                               for (size_t i = 0; i < na; ++i) a_impl->grad[i] += self.grad[i];
                           }
                           if (b_impl->requires_grad) {
                               for (size_t i = na; i < self.grad.size(); ++i) {
                                   b_impl->grad[i - na] += self.grad[i];
                               }
                           }
                       });
}

Tensor elementwise_mul(const Tensor& a, const Tensor& b) {
    const bool broadcast = a.shape() != b.shape();
    if (broadcast) {
        require(a.rank() == 3 && b.rank() == 3 && b.dim(0) == 1 && a.dim(1) == b.dim(1) &&
                    a.dim(2) == b.dim(2),
                "elementwise_mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                    " are neither equal nor channel-broadcastable");
    }
    const size_t npix = broadcast ? b.values().size() : 0;
    std::vector<double> out(a.values().size());
    if (!broadcast) {
        for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    } else {
        const int c = a.dim(0);
        for (int ch = 0; ch < c; ++ch) {
            const double* ap = a.values().data() + static_cast<size_t>(ch) * npix;
            double* op = out.data() + static_cast<size_t>(ch) * npix;
            for (size_t p = 0; p < npix; ++p) op[p] = ap[p] * b.values()[p];
        }
    }
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    return make_result(a.shape(), std::move(out), {&a, &b},
                       [a_impl, b_impl, broadcast, npix](TensorImpl& self) {
                           if (!broadcast) {
                               if (a_impl->requires_grad) {
                                   for (size_t i = 0; i < self.grad.size(); ++i) {
                                       a_impl->grad[i] += self.grad[i] * b_impl->data[i];
                                   }
                               }
                               if (b_impl->requires_grad) {
                                   for (size_t i = 0; i < self.grad.size(); ++i) {
                                       b_impl->grad[i] += self.grad[i] * a_impl->data[i];
                                   }
                               }
                           } else {
                               const size_t c = a_impl->data.size() / npix;
                               for (size_t ch = 0; ch < c; ++ch) {
                                   const size_t base = ch * npix;
                                   for (size_t p = 0; p < npix; ++p) {
                                       if (a_impl->requires_grad) {
                                           a_impl->grad[base + p] += self.grad[base + p] * b_impl->data[p];
                                       }
                                       if (b_impl->requires_grad) {
                                           b_impl->grad[p] += self.grad[base + p] * a_impl->data[base + p];
                                       }
                                   }
                               }
                           }
                       });
}

Tensor abs_diff(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "abs_diff: shapes disagree, " + shape_str(a.shape()) + " vs " +
                                        shape_str(b.shape()));
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.values()[i] - b.values()[i]);
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    return make_result(a.shape(), std::move(out), {&a, &b},
                       [a_impl, b_impl](TensorImpl& self) {
                           // sign(a-b), with sign(0) = 0
                           for (size_t i = 0; i < self.grad.size(); ++i) {
                               const double d = a_impl->data[i] - b_impl->data[i];
                               const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
                               if (a_impl->requires_grad) a_impl->grad[i] += self.grad[i] * s;
                               if (b_impl->requires_grad) b_impl->grad[i] -= self.grad[i] * s;
                           }
                       });
}

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "add: shapes disagree, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto a_impl = a.impl();
    auto b_impl = b.impl();
    return make_result(a.shape(), std::move(out), {&a, &b}, [a_impl, b_impl](TensorImpl& self) {
        if (a_impl->requires_grad) {
            for (size_t i = 0; i < self.grad.size(); ++i) a_impl->grad[i] += self.grad[i];
        }
        if (b_impl->requires_grad) {
            for (size_t i = 0; i < self.grad.size(); ++i) b_impl->grad[i] += self.grad[i];
        }
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.values().size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * s;
    auto a_impl = a.impl();
    return make_result(a.shape(), std::move(out), {&a}, [a_impl, s](TensorImpl& self) {
        if (!a_impl->requires_grad) return;
        for (size_t i = 0; i < self.grad.size(); ++i) a_impl->grad[i] += self.grad[i] * s;
    });
}

namespace {

struct BilinearTap {
    int y0, y1, x0, x1;
    double wy, wx;
};

inline BilinearTap bilinear_tap(int oy, int ox, int h, int w) {
    // align_corners = false
    double sy = (oy + 0.5) * 0.5 - 0.5;
    double sx = (ox + 0.5) * 0.5 - 0.5;
    if (sy < 0.0) sy = 0.0;
    if (sx < 0.0) sx = 0.0;
    BilinearTap t;
    t.y0 = static_cast<int>(sy);
    t.x0 = static_cast<int>(sx);
    if (t.y0 > h - 1) t.y0 = h - 1;
    if (t.x0 > w - 1) t.x0 = w - 1;
    t.y1 = std::min(t.y0 + 1, h - 1);
    t.x1 = std::min(t.x0 + 1, w - 1);
    t.wy = sy - t.y0;
    t.wx = sx - t.x0;
    return t;
}

}  // namespace

Tensor upsample2x(const Tensor& input, UpsampleMode mode) {
    require(input.rank() == 3, "upsample2x: input must be [c,h,w], got " + shape_str(input.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int oh = 2 * h, ow = 2 * w;
    std::vector<double> out(static_cast<size_t>(c) * oh * ow);
    const double* in = input.values().data();

    if (mode == UpsampleMode::Nearest) {
        for (int ch = 0; ch < c; ++ch) {
            const double* plane = in + static_cast<size_t>(ch) * h * w;
            double* oplane = out.data() + static_cast<size_t>(ch) * oh * ow;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    oplane[static_cast<size_t>(oy) * ow + ox] =
                        plane[static_cast<size_t>(oy / 2) * w + ox / 2];
                }
            }
        }
    } else {
        for (int ch = 0; ch < c; ++ch) {
            const double* plane = in + static_cast<size_t>(ch) * h * w;
            double* oplane = out.data() + static_cast<size_t>(ch) * oh * ow;
            for (int oy = 0; oy < oh; ++oy) {
                for (int ox = 0; ox < ow; ++ox) {
                    const BilinearTap t = bilinear_tap(oy, ox, h, w);
                    const double v00 = plane[static_cast<size_t>(t.y0) * w + t.x0];
                    const double v01 = plane[static_cast<size_t>(t.y0) * w + t.x1];
                    const double v10 = plane[static_cast<size_t>(t.y1) * w + t.x0];
                    const double v11 = plane[static_cast<size_t>(t.y1) * w + t.x1];
                    oplane[static_cast<size_t>(oy) * ow + ox] =
                        (1 - t.wy) * ((1 - t.wx) * v00 + t.wx * v01) +
                        t.wy * ((1 - t.wx) * v10 + t.wx * v11);
                }
            }
        }
    }

    auto in_impl = input.impl();
    return make_result(
        {c, oh, ow}, std::move(out), {&input}, [in_impl, c, h, w, oh, ow, mode](TensorImpl& self) {
            if (!in_impl->requires_grad) return;
            for (int ch = 0; ch < c; ++ch) {
                double* gplane = in_impl->grad.data() + static_cast<size_t>(ch) * h * w;
                const double* go = self.grad.data() + static_cast<size_t>(ch) * oh * ow;
                for (int oy = 0; oy < oh; ++oy) {
                    for (int ox = 0; ox < ow; ++ox) {
                        const double g = go[static_cast<size_t>(oy) * ow + ox];
                        if (mode == UpsampleMode::Nearest) {
                            gplane[static_cast<size_t>(oy / 2) * w + ox / 2] += g;
                        } else {
                            const BilinearTap t = bilinear_tap(oy, ox, h, w);
                            gplane[static_cast<size_t>(t.y0) * w + t.x0] += g * (1 - t.wy) * (1 - t.wx);
                            gplane[static_cast<size_t>(t.y0) * w + t.x1] += g * (1 - t.wy) * t.wx;
                            gplane[static_cast<size_t>(t.y1) * w + t.x0] += g * t.wy * (1 - t.wx);
                            gplane[static_cast<size_t>(t.y1) * w + t.x1] += g * t.wy * t.wx;
                        }
                    }
                }
            }
        });
}

Tensor channel_mean(const Tensor& input) {
    require(input.rank() == 3,
            "channel_mean: input must be [c,h,w], got " + shape_str(input.shape()));
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    const size_t npix = static_cast<size_t>(h) * w;
    std::vector<double> out(npix, 0.0);
    for (int ch = 0; ch < c; ++ch) {
        const double* plane = input.values().data() + static_cast<size_t>(ch) * npix;
        for (size_t p = 0; p < npix; ++p) out[p] += plane[p];
    }
    const double inv = 1.0 / c;
    for (double& v : out) v *= inv;
    auto in_impl = input.impl();
    return make_result({1, h, w}, std::move(out), {&input},
                       [in_impl, c, npix, inv](TensorImpl& self) {
                           if (!in_impl->requires_grad) return;
                           for (int ch = 0; ch < c; ++ch) {
                               double* gplane = in_impl->grad.data() + static_cast<size_t>(ch) * npix;
                               for (size_t p = 0; p < npix; ++p) gplane[p] += self.grad[p] * inv;
                           }
                       });
}

Tensor sum_all(const Tensor& input) {
    double s = 0.0;
    for (double v : input.values()) s += v;
    auto in_impl = input.impl();
    return make_result({1}, {s}, {&input}, [in_impl](TensorImpl& self) {
        if (!in_impl->requires_grad) return;
        const double g = self.grad[0];
        for (double& v : in_impl->grad) v += g;
    });
}

}  // namespace dsfer
