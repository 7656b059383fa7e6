#include "impactx/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace impactx {

Value Tape::constant(Tensor t) {
    nodes_.push_back(Node{std::move(t), nullptr, Tensor(), false, {}});
    consumed_ = false;
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::borrow(const Tensor& t) {
    nodes_.push_back(Node{Tensor(), &t, Tensor(), false, {}});
    consumed_ = false;
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Value Tape::param(Parameter& p) {
    auto it = param_index_.find(&p);
    if (it != param_index_.end()) return Value{it->second};
    nodes_.push_back(Node{Tensor(), &p.value, Tensor(), false, {}});
    consumed_ = false;
    int id = static_cast<int>(nodes_.size()) - 1;
    param_index_.emplace(&p, id);
    if (grad_enabled_) param_nodes_.emplace_back(&p, id);
    return Value{id};
}

Value Tape::emit(Tensor out, std::function<void()> back) {
    nodes_.push_back(Node{std::move(out), nullptr, Tensor(), false,
                          grad_enabled_ ? std::move(back) : std::function<void()>()});
    consumed_ = false;
    return Value{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(Value v) {
    Node& n = nodes_[static_cast<size_t>(v.id)];
    if (!n.grad_ready) {
        n.grad = Tensor(value(v).shape());
        n.grad_ready = true;
    }
    return n.grad;
}

void Tape::backward(Value loss) {
    if (!grad_enabled_) throw StateError("backward on a forward-only tape");
    if (consumed_) throw StateError("backward called twice on the same tape without new forward work");
    const Tensor& lv = value(loss);
    if (lv.size() != 1) throw DimensionError("backward expects a scalar loss, got " + shape_str(lv.shape()));
    grad(loss)[0] = 1.0f;
    for (size_t i = nodes_.size(); i-- > 0;) {
        Node& n = nodes_[i];
        if (n.back && n.grad_ready) n.back();
    }
    for (auto& [p, id] : param_nodes_) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.grad_ready) continue;
        float* g = p->grad.data();
        const float* ng = n.grad.data();
        for (std::int64_t k = 0; k < p->grad.size(); ++k) g[k] += ng[k];
    }
    consumed_ = true;
}

namespace {

void check_rank(const Tensor& t, int rank, const char* op) {
    if (t.ndim() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) +
                             ", got shape " + shape_str(t.shape()));
    }
}

// Emits a node and hands the backward closure its own handle so it can read
// the upstream gradient.
Value emit_with_self(Tape& t, Tensor out, std::function<void(Value)> back) {
    struct Shared {
        std::function<void(Value)> fn;
        Value self;
    };
    auto sh = std::make_shared<Shared>();
    sh->fn = std::move(back);
    Value v = t.emit(std::move(out), [sh]() { sh->fn(sh->self); });
    sh->self = v;
    return v;
}

}  // namespace

Value dense(Tape& t, Value x, Value w, Value b) {
    const Tensor& xv = t.value(x);
    const Tensor& wv = t.value(w);
    const Tensor& bv = t.value(b);
    check_rank(xv, 2, "dense");
    check_rank(wv, 2, "dense");
    if (xv.dim(1) != wv.dim(0)) {
        throw DimensionError("dense: inner dimensions disagree, x " + shape_str(xv.shape()) +
                             " vs w " + shape_str(wv.shape()));
    }
    if (bv.ndim() != 1 || bv.dim(0) != wv.dim(1)) {
        throw DimensionError("dense: bias " + shape_str(bv.shape()) + " does not match w " +
                             shape_str(wv.shape()));
    }
    const int n = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
    Tensor y({n, out});
    for (int i = 0; i < n; ++i) {
        float* yi = y.data() + static_cast<std::int64_t>(i) * out;
        for (int j = 0; j < out; ++j) yi[j] = bv[j];
        const float* xi = xv.data() + static_cast<std::int64_t>(i) * in;
        for (int k = 0; k < in; ++k) {
            const float a = xi[k];
            if (a == 0.0f) continue;
            const float* wk = wv.data() + static_cast<std::int64_t>(k) * out;
            for (int j = 0; j < out; ++j) yi[j] += a * wk[j];
        }
    }
    return emit_with_self(t, std::move(y), [&t, x, w, b, n, in, out](Value self) {
        const Tensor& gy = t.grad(self);
        const Tensor& xv = t.value(x);
        const Tensor& wv = t.value(w);
        Tensor& gx = t.grad(x);
        Tensor& gw = t.grad(w);
        Tensor& gb = t.grad(b);
        for (int i = 0; i < n; ++i) {
            const float* gyi = gy.data() + static_cast<std::int64_t>(i) * out;
            const float* xi = xv.data() + static_cast<std::int64_t>(i) * in;
            float* gxi = gx.data() + static_cast<std::int64_t>(i) * in;
            for (int k = 0; k < in; ++k) {
                const float* wk = wv.data() + static_cast<std::int64_t>(k) * out;
                float acc = 0.0f;
                for (int j = 0; j < out; ++j) acc += gyi[j] * wk[j];
                gxi[k] += acc;
                const float a = xi[k];
                float* gwk = gw.data() + static_cast<std::int64_t>(k) * out;
                for (int j = 0; j < out; ++j) gwk[j] += a * gyi[j];
            }
            for (int j = 0; j < out; ++j) gb[j] += gyi[j];
        }
    });
}

Value conv2d(Tape& t, Value x, Value k, Value b) {
    const Tensor& xv = t.value(x);
    const Tensor& kv = t.value(k);
    const Tensor& bv = t.value(b);
    check_rank(xv, 4, "conv2d");
    check_rank(kv, 4, "conv2d");
    if (kv.dim(2) != 3 || kv.dim(3) != 3) {
        throw DimensionError("conv2d: kernel must be 3x3, got " + shape_str(kv.shape()));
    }
    if (kv.dim(1) != xv.dim(1)) {
        throw DimensionError("conv2d: channel mismatch, x " + shape_str(xv.shape()) + " vs k " +
                             shape_str(kv.shape()));
    }
    if (bv.ndim() != 1 || bv.dim(0) != kv.dim(0)) {
        throw DimensionError("conv2d: bias " + shape_str(bv.shape()) + " does not match kernels " +
                             shape_str(kv.shape()));
    }
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3), F = kv.dim(0);
    Tensor y({N, F, H, W});
    for (int n = 0; n < N; ++n) {
        for (int f = 0; f < F; ++f) {
            float* yp = &y.at(n, f, 0, 0);
            const float bias = bv[f];
            for (int i = 0; i < H * W; ++i) yp[i] = bias;
            for (int c = 0; c < C; ++c) {
                const float* xp = &xv.at(n, c, 0, 0);
                for (int a = 0; a < 3; ++a) {
                    const int dy = a - 1;
                    for (int bb = 0; bb < 3; ++bb) {
                        const int dx = bb - 1;
                        const float kw = kv.at(f, c, a, bb);
                        if (kw == 0.0f) continue;
                        const int ilo = std::max(0, -dy), ihi = std::min(H, H - dy);
                        const int jlo = std::max(0, -dx), jhi = std::min(W, W - dx);
                        for (int i = ilo; i < ihi; ++i) {
                            const float* xrow = xp + static_cast<std::int64_t>(i + dy) * W + dx;
                            float* yrow = yp + static_cast<std::int64_t>(i) * W;
                            for (int j = jlo; j < jhi; ++j) yrow[j] += kw * xrow[j];
                        }
                    }
                }
            }
        }
    }
    return emit_with_self(t, std::move(y), [&t, x, k, b, N, C, H, W, F](Value self) {
        const Tensor& gy = t.grad(self);
        const Tensor& xv = t.value(x);
        const Tensor& kv = t.value(k);
        Tensor& gx = t.grad(x);
        Tensor& gk = t.grad(k);
        Tensor& gb = t.grad(b);
        for (int n = 0; n < N; ++n) {
            for (int f = 0; f < F; ++f) {
                const float* gyp = &gy.at(n, f, 0, 0);
                float acc = 0.0f;
                for (int i = 0; i < H * W; ++i) acc += gyp[i];
                gb[f] += acc;
                for (int c = 0; c < C; ++c) {
                    const float* xp = &xv.at(n, c, 0, 0);
                    float* gxp = &gx.at(n, c, 0, 0);
                    for (int a = 0; a < 3; ++a) {
                        const int dy = a - 1;
                        for (int bb = 0; bb < 3; ++bb) {
                            const int dx = bb - 1;
                            const float kw = kv.at(f, c, a, bb);
                            float kacc = 0.0f;
                            const int ilo = std::max(0, -dy), ihi = std::min(H, H - dy);
                            const int jlo = std::max(0, -dx), jhi = std::min(W, W - dx);
                            for (int i = ilo; i < ihi; ++i) {
                                const float* xrow = xp + static_cast<std::int64_t>(i + dy) * W + dx;
                                float* gxrow = gxp + static_cast<std::int64_t>(i + dy) * W + dx;
                                const float* gyrow = gyp + static_cast<std::int64_t>(i) * W;
                                for (int j = jlo; j < jhi; ++j) {
                                    kacc += gyrow[j] * xrow[j];
                                    gxrow[j] += kw * gyrow[j];
                                }
                            }
                            gk.at(f, c, a, bb) += kacc;
                        }
                    }
                }
            }
        }
    });
}

Value maxpool2(Tape& t, Value x) {
    const Tensor& xv = t.value(x);
    check_rank(xv, 4, "maxpool2");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw DimensionError("maxpool2: odd spatial dimensions in " + shape_str(xv.shape()));
    }
    const int OH = H / 2, OW = W / 2;
    Tensor y({N, C, OH, OW});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(y.size()));
    std::int64_t o = 0;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            for (int i = 0; i < OH; ++i) {
                for (int j = 0; j < OW; ++j, ++o) {
                    float best = -std::numeric_limits<float>::infinity();
                    std::int64_t best_idx = 0;
                    for (int p = 0; p < 2; ++p) {
                        for (int q = 0; q < 2; ++q) {
                            const std::int64_t idx =
                                ((static_cast<std::int64_t>(n) * C + c) * H + 2 * i + p) * W + 2 * j + q;
                            const float v = xv[idx];
                            if (v > best) {  // strict: first index wins ties
                                best = v;
                                best_idx = idx;
                            }
                        }
                    }
                    y[o] = best;
                    (*argmax)[static_cast<size_t>(o)] = best_idx;
                }
            }
        }
    }
    return emit_with_self(t, std::move(y), [&t, x, argmax](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(x);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[(*argmax)[static_cast<size_t>(i)]] += gy[i];
    });
}

Value upsample2x(Tape& t, Value x) {
    const Tensor& xv = t.value(x);
    check_rank(xv, 4, "upsample2x");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor y({N, C, 2 * H, 2 * W});
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            for (int i = 0; i < H; ++i) {
                for (int j = 0; j < W; ++j) {
                    const float v = xv.at(n, c, i, j);
                    y.at(n, c, 2 * i, 2 * j) = v;
                    y.at(n, c, 2 * i, 2 * j + 1) = v;
                    y.at(n, c, 2 * i + 1, 2 * j) = v;
                    y.at(n, c, 2 * i + 1, 2 * j + 1) = v;
                }
            }
        }
    }
    return emit_with_self(t, std::move(y), [&t, x, N, C, H, W](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(x);
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                for (int i = 0; i < H; ++i) {
                    for (int j = 0; j < W; ++j) {
                        gx.at(n, c, i, j) += gy.at(n, c, 2 * i, 2 * j) + gy.at(n, c, 2 * i, 2 * j + 1) +
                                             gy.at(n, c, 2 * i + 1, 2 * j) +
                                             gy.at(n, c, 2 * i + 1, 2 * j + 1);
                    }
                }
            }
        }
    });
}

Value relu(Tape& t, Value x) {
    const Tensor& xv = t.value(x);
    Tensor y(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
    return emit_with_self(t, std::move(y), [&t, x](Value self) {
        const Tensor& gy = t.grad(self);
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad(x);
        for (std::int64_t i = 0; i < gy.size(); ++i) {
            if (xv[i] > 0.0f) gx[i] += gy[i];  // subgradient 0 at exactly 0
        }
    });
}

Value sigmoid(Tape& t, Value x) {
    const Tensor& xv = t.value(x);
    Tensor y(xv.shape());
    for (std::int64_t i = 0; i < xv.size(); ++i) {
        y[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(xv[i]))));
    }
    return emit_with_self(t, std::move(y), [&t, x](Value self) {
        const Tensor& gy = t.grad(self);
        const Tensor& yv = t.value(self);
        Tensor& gx = t.grad(x);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * yv[i] * (1.0f - yv[i]);
    });
}

Value softmax(Tape& t, Value x) {
    const Tensor& xv = t.value(x);
    check_rank(xv, 2, "softmax");
    const int n = xv.dim(0), K = xv.dim(1);
    if (K < 1) throw DimensionError("softmax: K must be >= 1");
    Tensor y({n, K});
    for (int i = 0; i < n; ++i) {
        const float* xi = xv.data() + static_cast<std::int64_t>(i) * K;
        float* yi = y.data() + static_cast<std::int64_t>(i) * K;
        float mx = xi[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < K; ++j) {
            const double e = std::exp(static_cast<double>(xi[j]) - mx);
            yi[j] = static_cast<float>(e);
            sum += e;
        }
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < K; ++j) yi[j] *= inv;
    }
    return emit_with_self(t, std::move(y), [&t, x, n, K](Value self) {
        const Tensor& gy = t.grad(self);
        const Tensor& yv = t.value(self);
        Tensor& gx = t.grad(x);
        for (int i = 0; i < n; ++i) {
            const float* gyi = gy.data() + static_cast<std::int64_t>(i) * K;
            const float* yi = yv.data() + static_cast<std::int64_t>(i) * K;
            float* gxi = gx.data() + static_cast<std::int64_t>(i) * K;
            double dot = 0.0;
            for (int j = 0; j < K; ++j) dot += static_cast<double>(gyi[j]) * yi[j];
            for (int j = 0; j < K; ++j) {
                gxi[j] += yi[j] * (gyi[j] - static_cast<float>(dot));
            }
        }
    });
}

Value cross_entropy(Tape& t, Value logits, const std::vector<int>& labels) {
    const Tensor& xv = t.value(logits);
    check_rank(xv, 2, "cross_entropy");
    const int n = xv.dim(0), K = xv.dim(1);
    if (static_cast<int>(labels.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                             std::to_string(n));
    }
    for (int i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= K) {
            throw DataError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                            std::to_string(K) + ")");
        }
    }
    auto probs = std::make_shared<Tensor>(Shape{n, K});
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const float* xi = xv.data() + static_cast<std::int64_t>(i) * K;
        float* pi = probs->data() + static_cast<std::int64_t>(i) * K;
        float mx = xi[0];
        for (int j = 1; j < K; ++j) mx = std::max(mx, xi[j]);
        double sum = 0.0;
        for (int j = 0; j < K; ++j) sum += std::exp(static_cast<double>(xi[j]) - mx);
        const double lse = mx + std::log(sum);
        total += lse - xi[labels[i]];
        const float inv = static_cast<float>(1.0 / sum);
        for (int j = 0; j < K; ++j) {
            pi[j] = static_cast<float>(std::exp(static_cast<double>(xi[j]) - mx)) * inv;
        }
    }
    Tensor loss({1}, {static_cast<float>(total / n)});
    auto lab = std::make_shared<std::vector<int>>(labels);
    return emit_with_self(t, std::move(loss), [&t, logits, probs, lab, n, K](Value self) {
        const float g = t.grad(self)[0];
        Tensor& gx = t.grad(logits);
        const float inv_n = 1.0f / static_cast<float>(n);
        for (int i = 0; i < n; ++i) {
            const float* pi = probs->data() + static_cast<std::int64_t>(i) * K;
            float* gxi = gx.data() + static_cast<std::int64_t>(i) * K;
            for (int j = 0; j < K; ++j) {
                const float onehot = (j == (*lab)[static_cast<size_t>(i)]) ? 1.0f : 0.0f;
                gxi[j] += g * (pi[j] - onehot) * inv_n;
            }
        }
    });
}

Value mse(Tape& t, Value a, Value b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "mse");
    double total = 0.0;
    for (std::int64_t i = 0; i < av.size(); ++i) {
        const double d = static_cast<double>(av[i]) - bv[i];
        total += d * d;
    }
    const std::int64_t count = av.size();
    Tensor loss({1}, {static_cast<float>(total / static_cast<double>(count))});
    return emit_with_self(t, std::move(loss), [&t, a, b, count](Value self) {
        const float g = t.grad(self)[0];
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        Tensor& ga = t.grad(a);
        Tensor& gb = t.grad(b);
        const float c = 2.0f * g / static_cast<float>(count);
        for (std::int64_t i = 0; i < count; ++i) {
            const float d = c * (av[i] - bv[i]);
            ga[i] += d;
            gb[i] -= d;
        }
    });
}

Value add(Tape& t, Value a, Value b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    require_same_shape(av, bv, "add");
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < av.size(); ++i) y[i] = av[i] + bv[i];
    return emit_with_self(t, std::move(y), [&t, a, b](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& ga = t.grad(a);
        Tensor& gb = t.grad(b);
        for (std::int64_t i = 0; i < gy.size(); ++i) {
            ga[i] += gy[i];
            gb[i] += gy[i];
        }
    });
}

Value scale(Tape& t, Value a, float c) {
    const Tensor& av = t.value(a);
    Tensor y(av.shape());
    for (std::int64_t i = 0; i < av.size(); ++i) y[i] = c * av[i];
    return emit_with_self(t, std::move(y), [&t, a, c](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& ga = t.grad(a);
        for (std::int64_t i = 0; i < gy.size(); ++i) ga[i] += c * gy[i];
    });
}

Value reshape(Tape& t, Value x, Shape s) {
    const Tensor& xv = t.value(x);
    Tensor y = xv.reshaped(s);
    return emit_with_self(t, std::move(y), [&t, x](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& gx = t.grad(x);
        for (std::int64_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    });
}

Value concat_cols(Tape& t, Value a, Value b) {
    const Tensor& av = t.value(a);
    const Tensor& bv = t.value(b);
    check_rank(av, 2, "concat_cols");
    check_rank(bv, 2, "concat_cols");
    if (av.dim(0) != bv.dim(0)) {
        throw DimensionError("concat_cols: batch mismatch " + shape_str(av.shape()) + " vs " +
                             shape_str(bv.shape()));
    }
    const int n = av.dim(0), A = av.dim(1), B = bv.dim(1);
    Tensor y({n, A + B});
    for (int i = 0; i < n; ++i) {
        float* yi = y.data() + static_cast<std::int64_t>(i) * (A + B);
        const float* ai = av.data() + static_cast<std::int64_t>(i) * A;
        const float* bi = bv.data() + static_cast<std::int64_t>(i) * B;
        std::copy(ai, ai + A, yi);
        std::copy(bi, bi + B, yi + A);
    }
    return emit_with_self(t, std::move(y), [&t, a, b, n, A, B](Value self) {
        const Tensor& gy = t.grad(self);
        Tensor& ga = t.grad(a);
        Tensor& gb = t.grad(b);
        for (int i = 0; i < n; ++i) {
            const float* gyi = gy.data() + static_cast<std::int64_t>(i) * (A + B);
            float* gai = ga.data() + static_cast<std::int64_t>(i) * A;
            float* gbi = gb.data() + static_cast<std::int64_t>(i) * B;
            for (int j = 0; j < A; ++j) gai[j] += gyi[j];
            for (int j = 0; j < B; ++j) gbi[j] += gyi[A + j];
        }
    });
}

}  // namespace impactx
