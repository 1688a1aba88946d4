#include "gridnet/ad.hpp"

#include <algorithm>
#include <cmath>

namespace gridnet::ad {

Tensor Tensor::zeros(std::vector<size_t> shape) {
    Tensor t;
    size_t n = 1;
    for (size_t d : shape) n *= d;
    t.shape = std::move(shape);
    t.v.assign(n, 0.0);
    return t;
}

Tensor Tensor::scalar(double x) {
    Tensor t;
    t.shape = {1};
    t.v = {x};
    return t;
}

Tensor Tensor::matrix(size_t rows, size_t cols, std::vector<double> vals) {
    if (vals.size() != rows * cols) throw TapeError("matrix: value count does not match shape");
    Tensor t;
    t.shape = {rows, cols};
    t.v = std::move(vals);
    return t;
}

Parameter::Parameter(std::string n, Tensor val) : name(std::move(n)), value(std::move(val)) {
    grad = Tensor::zeros(value.shape);
}

void Parameter::zero_grad() { std::fill(grad.v.begin(), grad.v.end(), 0.0); }

namespace {

void require(bool cond, const char* msg) {
    if (!cond) throw TapeError(msg);
}

}  // namespace

const Tape::Node& Tape::at(NodeId id) const {
    if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) throw TapeError("invalid node id");
    return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(NodeId id) const { return at(id).val; }

const Tensor& Tape::grad(NodeId id) const {
    const Node& n = at(id);
    require(n.has_grad, "gradient not computed for this node");
    return n.grad;
}

NodeId Tape::push(Node n, const char* op_name) {
    for (double x : n.val.v)
        if (!std::isfinite(x))
            throw TapeError(std::string("non-finite value produced by op '") + op_name + "'");
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(NodeId id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.has_grad) {
        n.grad = Tensor::zeros(n.val.shape);
        n.has_grad = true;
    }
    return n.grad;
}

NodeId Tape::constant(Tensor t) {
    Node n;
    n.op = Op::Constant;
    n.val = std::move(t);
    return push(std::move(n), "constant");
}

NodeId Tape::param(Parameter& p) {
    require(p.grad.same_shape(p.value), "parameter gradient shape mismatch");
    Node n;
    n.op = Op::Param;
    n.val = p.value;
    n.bound = &p;
    return push(std::move(n), "param");
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.a = a;
    n.b = b;
    n.val = ta;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.v[i] += tb.v[i];
    return push(std::move(n), "add");
}

NodeId Tape::sub(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.a = a;
    n.b = b;
    n.val = ta;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.v[i] -= tb.v[i];
    return push(std::move(n), "sub");
}

NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.same_shape(tb), "mul: shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.a = a;
    n.b = b;
    n.val = ta;
    for (size_t i = 0; i < n.val.size(); ++i) n.val.v[i] *= tb.v[i];
    return push(std::move(n), "mul");
}

NodeId Tape::add_const(NodeId a, double c) {
    Node n;
    n.op = Op::AddConst;
    n.a = a;
    n.c = c;
    n.val = value(a);
    for (double& x : n.val.v) x += c;
    return push(std::move(n), "add_const");
}

NodeId Tape::mul_const(NodeId a, double c) {
    Node n;
    n.op = Op::MulConst;
    n.a = a;
    n.c = c;
    n.val = value(a);
    for (double& x : n.val.v) x *= c;
    return push(std::move(n), "mul_const");
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.shape.size() == 2 && tb.shape.size() == 2, "matmul: rank-2 tensors required");
    require(ta.cols() == tb.rows(), "matmul: inner dimensions differ");
    const size_t m = ta.rows(), k = ta.cols(), p = tb.cols();
    Node n;
    n.op = Op::MatMul;
    n.a = a;
    n.b = b;
    n.val = Tensor::zeros({m, p});
    const double* A = ta.v.data();
    const double* B = tb.v.data();
    double* C = n.val.v.data();
    for (size_t i = 0; i < m; ++i) {
        const double* arow = A + i * k;
        double* crow = C + i * p;
        for (size_t kk = 0; kk < k; ++kk) {
            const double av = arow[kk];
            if (av == 0.0) continue;
            const double* brow = B + kk * p;
            for (size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
        }
    }
    return push(std::move(n), "matmul");
}

NodeId Tape::relu(NodeId a) {
    Node n;
    n.op = Op::Relu;
    n.a = a;
    n.val = value(a);
    for (double& x : n.val.v) x = x > 0.0 ? x : 0.0;
    return push(std::move(n), "relu");
}

NodeId Tape::concat_cols(NodeId a, NodeId b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    require(ta.rows() == tb.rows(), "concat_cols: row counts differ");
    const size_t r = ta.rows(), ca = ta.cols(), cb = tb.cols();
    Node n;
    n.op = Op::ConcatCols;
    n.a = a;
    n.b = b;
    n.val = Tensor::zeros({r, ca + cb});
    for (size_t i = 0; i < r; ++i) {
        for (size_t j = 0; j < ca; ++j) n.val.v[i * (ca + cb) + j] = ta.v[i * ca + j];
        for (size_t j = 0; j < cb; ++j) n.val.v[i * (ca + cb) + ca + j] = tb.v[i * cb + j];
    }
    return push(std::move(n), "concat_cols");
}

NodeId Tape::gather_rows(NodeId a, std::vector<int32_t> idx) {
    const Tensor& ta = value(a);
    const size_t c = ta.cols();
    Node n;
    n.op = Op::GatherRows;
    n.a = a;
    n.val = Tensor::zeros({idx.size(), c});
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && static_cast<size_t>(idx[i]) < ta.rows(),
                "gather_rows: index out of range");
        for (size_t j = 0; j < c; ++j)
            n.val.v[i * c + j] = ta.v[static_cast<size_t>(idx[i]) * c + j];
    }
    n.idx = std::move(idx);
    return push(std::move(n), "gather_rows");
}

NodeId Tape::segment_sum(NodeId a, std::vector<int32_t> seg, int32_t n_segments) {
    const Tensor& ta = value(a);
    require(seg.size() == ta.rows(), "segment_sum: one segment id per row required");
    require(n_segments >= 0, "segment_sum: bad segment count");
    const size_t c = ta.cols();
    Node n;
    n.op = Op::SegmentSum;
    n.a = a;
    n.val = Tensor::zeros({static_cast<size_t>(n_segments), c});
    for (size_t i = 0; i < seg.size(); ++i) {
        require(seg[i] >= 0 && seg[i] < n_segments, "segment_sum: segment id out of range");
        for (size_t j = 0; j < c; ++j)
            n.val.v[static_cast<size_t>(seg[i]) * c + j] += ta.v[i * c + j];
    }
    n.idx = std::move(seg);
    return push(std::move(n), "segment_sum");
}

NodeId Tape::segment_mean(NodeId a, std::vector<int32_t> seg, int32_t n_segments) {
    const Tensor& ta = value(a);
    require(seg.size() == ta.rows(), "segment_mean: one segment id per row required");
    require(n_segments >= 0, "segment_mean: bad segment count");
    const size_t c = ta.cols();
    Node n;
    n.op = Op::SegmentMean;
    n.a = a;
    n.val = Tensor::zeros({static_cast<size_t>(n_segments), c});
    Tensor counts = Tensor::zeros({static_cast<size_t>(n_segments)});
    for (size_t i = 0; i < seg.size(); ++i) {
        require(seg[i] >= 0 && seg[i] < n_segments, "segment_mean: segment id out of range");
        counts.v[static_cast<size_t>(seg[i])] += 1.0;
        for (size_t j = 0; j < c; ++j)
            n.val.v[static_cast<size_t>(seg[i]) * c + j] += ta.v[i * c + j];
    }
    for (int32_t s = 0; s < n_segments; ++s) {
        double cnt = counts.v[static_cast<size_t>(s)];
        if (cnt == 0.0) continue;
        for (size_t j = 0; j < c; ++j) n.val.v[static_cast<size_t>(s) * c + j] /= cnt;
    }
    n.idx = std::move(seg);
    n.saved = std::move(counts);
    return push(std::move(n), "segment_mean");
}

NodeId Tape::pow_base(NodeId x, NodeId p) {
    const Tensor& tx = value(x);
    const Tensor& tp = value(p);
    require(tp.size() == 1, "pow_base: exponent must be a scalar node");
    const double pe = tp.v[0];
    require(std::abs(pe) >= 1e-12, "pow_base: exponent must be nonzero");
    Node n;
    n.op = Op::PowBase;
    n.a = x;
    n.b = p;
    n.val = tx;
    n.saved = Tensor::zeros({tx.size()});
    for (size_t i = 0; i < tx.size(); ++i) {
        require(tx.v[i] > 0.0, "pow_base: base must be strictly positive");
        const double lnx = std::log(tx.v[i]);
        n.saved.v[i] = lnx;
        n.val.v[i] = std::exp(pe * lnx);
    }
    return push(std::move(n), "pow_base");
}

NodeId Tape::pow_inv(NodeId x, NodeId p) {
    const Tensor& tx = value(x);
    const Tensor& tp = value(p);
    require(tp.size() == 1, "pow_inv: exponent must be a scalar node");
    const double pe = tp.v[0];
    require(std::abs(pe) >= 1e-12, "pow_inv: exponent must be nonzero");
    Node n;
    n.op = Op::PowInv;
    n.a = x;
    n.b = p;
    n.val = tx;
    n.saved = Tensor::zeros({tx.size()});
    for (size_t i = 0; i < tx.size(); ++i) {
        require(tx.v[i] > 0.0, "pow_inv: base must be strictly positive");
        const double lnx = std::log(tx.v[i]);
        n.saved.v[i] = lnx;
        n.val.v[i] = std::exp(lnx / pe);
    }
    return push(std::move(n), "pow_inv");
}

NodeId Tape::row_l2norm(NodeId x) {
    const Tensor& tx = value(x);
    const size_t r = tx.rows(), c = tx.cols();
    Node n;
    n.op = Op::RowL2Norm;
    n.a = x;
    n.val = Tensor::zeros({r, 1});
    for (size_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (size_t j = 0; j < c; ++j) acc += tx.v[i * c + j] * tx.v[i * c + j];
        n.val.v[i] = std::sqrt(acc);
    }
    return push(std::move(n), "row_l2norm");
}

NodeId Tape::scale_rows(NodeId x, NodeId r) {
    const Tensor& tx = value(x);
    const Tensor& tr = value(r);
    require(tr.rows() == tx.rows() && tr.cols() == 1, "scale_rows: scale must be rows x 1");
    Node n;
    n.op = Op::ScaleRows;
    n.a = x;
    n.b = r;
    n.val = tx;
    const size_t c = tx.cols();
    for (size_t i = 0; i < tx.rows(); ++i)
        for (size_t j = 0; j < c; ++j) n.val.v[i * c + j] *= tr.v[i];
    return push(std::move(n), "scale_rows");
}

NodeId Tape::div_rows_safe(NodeId x, NodeId r) {
    const Tensor& tx = value(x);
    const Tensor& tr = value(r);
    require(tr.rows() == tx.rows() && tr.cols() == 1, "div_rows_safe: divisor must be rows x 1");
    Node n;
    n.op = Op::DivRowsSafe;
    n.a = x;
    n.b = r;
    n.val = tx;
    const size_t c = tx.cols();
    for (size_t i = 0; i < tx.rows(); ++i) {
        const double d = tr.v[i];
        for (size_t j = 0; j < c; ++j) n.val.v[i * c + j] = d == 0.0 ? 0.0 : n.val.v[i * c + j] / d;
    }
    return push(std::move(n), "div_rows_safe");
}

NodeId Tape::mul_scalar(NodeId x, NodeId s) {
    const Tensor& ts = value(s);
    require(ts.size() == 1, "mul_scalar: scale must be a 1-element node");
    Node n;
    n.op = Op::MulScalar;
    n.a = x;
    n.b = s;
    n.val = value(x);
    for (double& v : n.val.v) v *= ts.v[0];
    return push(std::move(n), "mul_scalar");
}

NodeId Tape::add_rowvec(NodeId x, NodeId b) {
    const Tensor& tx = value(x);
    const Tensor& tb = value(b);
    require(tb.rows() == 1 && tb.cols() == tx.cols(), "add_rowvec: bias must be 1 x cols");
    Node n;
    n.op = Op::AddRowVec;
    n.a = x;
    n.b = b;
    n.val = tx;
    const size_t c = tx.cols();
    for (size_t i = 0; i < tx.rows(); ++i)
        for (size_t j = 0; j < c; ++j) n.val.v[i * c + j] += tb.v[j];
    return push(std::move(n), "add_rowvec");
}

NodeId Tape::mse_loss(NodeId pred, NodeId target) {
    const Tensor& tp = value(pred);
    const Tensor& tt = value(target);
    require(tp.same_shape(tt), "mse_loss: shape mismatch");
    require(tp.size() > 0, "mse_loss: empty tensors");
    Node n;
    n.op = Op::MseLoss;
    n.a = pred;
    n.b = target;
    double acc = 0.0;
    for (size_t i = 0; i < tp.size(); ++i) {
        const double d = tp.v[i] - tt.v[i];
        acc += d * d;
    }
    n.val = Tensor::scalar(acc / static_cast<double>(tp.size()));
    return push(std::move(n), "mse_loss");
}

void Tape::backward(NodeId loss) {
    const Node& ln = at(loss);
    require(ln.val.size() == 1, "backward requires a scalar loss");
    grad_buf(loss).v[0] = 1.0;

    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.has_grad) continue;
        const Tensor& g = n.grad;
        switch (n.op) {
            case Op::Constant:
                break;
            case Op::Param: {
                Tensor& pg = n.bound->grad;
                for (size_t i = 0; i < g.size(); ++i) pg.v[i] += g.v[i];
                break;
            }
            case Op::Add: {
                Tensor& ga = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i];
                    gb.v[i] += g.v[i];
                }
                break;
            }
            case Op::Sub: {
                Tensor& ga = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i];
                    gb.v[i] -= g.v[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& va = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vb = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& ga = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                for (size_t i = 0; i < g.size(); ++i) {
                    ga.v[i] += g.v[i] * vb.v[i];
                    gb.v[i] += g.v[i] * va.v[i];
                }
                break;
            }
            case Op::AddConst: {
                Tensor& ga = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
                break;
            }
            case Op::MulConst: {
                Tensor& ga = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i) ga.v[i] += n.c * g.v[i];
                break;
            }
            case Op::MatMul: {
                const Tensor& va = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vb = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& ga = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                const size_t m = va.rows(), k = va.cols(), p = vb.cols();
                // dA = g . B^T
                for (size_t i = 0; i < m; ++i)
                    for (size_t kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (size_t j = 0; j < p; ++j) acc += g.v[i * p + j] * vb.v[kk * p + j];
                        ga.v[i * k + kk] += acc;
                    }
                // dB = A^T . g
                for (size_t kk = 0; kk < k; ++kk)
                    for (size_t i = 0; i < m; ++i) {
                        const double av = va.v[i * k + kk];
                        if (av == 0.0) continue;
                        for (size_t j = 0; j < p; ++j) gb.v[kk * p + j] += av * g.v[i * p + j];
                    }
                break;
            }
            case Op::Relu: {
                const Tensor& va = nodes_[static_cast<size_t>(n.a)].val;
                Tensor& ga = grad_buf(n.a);
                for (size_t i = 0; i < g.size(); ++i)
                    if (va.v[i] > 0.0) ga.v[i] += g.v[i];
                break;
            }
            case Op::ConcatCols: {
                const Tensor& va = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vb = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& ga = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                const size_t r = va.rows(), ca = va.cols(), cb = vb.cols();
                for (size_t i = 0; i < r; ++i) {
                    for (size_t j = 0; j < ca; ++j) ga.v[i * ca + j] += g.v[i * (ca + cb) + j];
                    for (size_t j = 0; j < cb; ++j) gb.v[i * cb + j] += g.v[i * (ca + cb) + ca + j];
                }
                break;
            }
            case Op::GatherRows: {
                Tensor& ga = grad_buf(n.a);
                const size_t c = n.val.cols();
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (size_t j = 0; j < c; ++j)
                        ga.v[static_cast<size_t>(n.idx[i]) * c + j] += g.v[i * c + j];
                break;
            }
            case Op::SegmentSum: {
                Tensor& ga = grad_buf(n.a);
                const size_t c = n.val.cols();
                for (size_t i = 0; i < n.idx.size(); ++i)
                    for (size_t j = 0; j < c; ++j)
                        ga.v[i * c + j] += g.v[static_cast<size_t>(n.idx[i]) * c + j];
                break;
            }
            case Op::SegmentMean: {
                Tensor& ga = grad_buf(n.a);
                const size_t c = n.val.cols();
                for (size_t i = 0; i < n.idx.size(); ++i) {
                    const double cnt = n.saved.v[static_cast<size_t>(n.idx[i])];
                    for (size_t j = 0; j < c; ++j)
                        ga.v[i * c + j] += g.v[static_cast<size_t>(n.idx[i]) * c + j] / cnt;
                }
                break;
            }
            case Op::PowBase: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                const double pe = nodes_[static_cast<size_t>(n.b)].val.v[0];
                Tensor& gx = grad_buf(n.a);
                Tensor& gp = grad_buf(n.b);
                double acc_p = 0.0;
                for (size_t i = 0; i < g.size(); ++i) {
                    gx.v[i] += g.v[i] * pe * n.val.v[i] / vx.v[i];
                    acc_p += g.v[i] * n.val.v[i] * n.saved.v[i];
                }
                gp.v[0] += acc_p;
                break;
            }
            case Op::PowInv: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                const double pe = nodes_[static_cast<size_t>(n.b)].val.v[0];
                Tensor& gx = grad_buf(n.a);
                Tensor& gp = grad_buf(n.b);
                double acc_p = 0.0;
                for (size_t i = 0; i < g.size(); ++i) {
                    gx.v[i] += g.v[i] * n.val.v[i] / (pe * vx.v[i]);
                    acc_p += g.v[i] * n.val.v[i] * n.saved.v[i] * (-1.0 / (pe * pe));
                }
                gp.v[0] += acc_p;
                break;
            }
            case Op::RowL2Norm: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                Tensor& gx = grad_buf(n.a);
                const size_t r = vx.rows(), c = vx.cols();
                for (size_t i = 0; i < r; ++i) {
                    const double norm = n.val.v[i];
                    if (norm == 0.0) continue;
                    const double gi = g.v[i] / norm;
                    for (size_t j = 0; j < c; ++j) gx.v[i * c + j] += gi * vx.v[i * c + j];
                }
                break;
            }
            case Op::ScaleRows: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vr = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& gx = grad_buf(n.a);
                Tensor& gr = grad_buf(n.b);
                const size_t c = vx.cols();
                for (size_t i = 0; i < vx.rows(); ++i) {
                    double acc = 0.0;
                    for (size_t j = 0; j < c; ++j) {
                        gx.v[i * c + j] += g.v[i * c + j] * vr.v[i];
                        acc += g.v[i * c + j] * vx.v[i * c + j];
                    }
                    gr.v[i] += acc;
                }
                break;
            }
            case Op::DivRowsSafe: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vr = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& gx = grad_buf(n.a);
                Tensor& gr = grad_buf(n.b);
                const size_t c = vx.cols();
                for (size_t i = 0; i < vx.rows(); ++i) {
                    const double d = vr.v[i];
                    if (d == 0.0) continue;
                    double acc = 0.0;
                    for (size_t j = 0; j < c; ++j) {
                        gx.v[i * c + j] += g.v[i * c + j] / d;
                        acc -= g.v[i * c + j] * vx.v[i * c + j] / (d * d);
                    }
                    gr.v[i] += acc;
                }
                break;
            }
            case Op::MulScalar: {
                const Tensor& vx = nodes_[static_cast<size_t>(n.a)].val;
                const double s = nodes_[static_cast<size_t>(n.b)].val.v[0];
                Tensor& gx = grad_buf(n.a);
                Tensor& gs = grad_buf(n.b);
                double acc = 0.0;
                for (size_t i = 0; i < g.size(); ++i) {
                    gx.v[i] += g.v[i] * s;
                    acc += g.v[i] * vx.v[i];
                }
                gs.v[0] += acc;
                break;
            }
            case Op::AddRowVec: {
                Tensor& gx = grad_buf(n.a);
                Tensor& gb = grad_buf(n.b);
                const size_t c = n.val.cols();
                for (size_t i = 0; i < n.val.rows(); ++i)
                    for (size_t j = 0; j < c; ++j) {
                        gx.v[i * c + j] += g.v[i * c + j];
                        gb.v[j] += g.v[i * c + j];
                    }
                break;
            }
            case Op::MseLoss: {
                const Tensor& vp = nodes_[static_cast<size_t>(n.a)].val;
                const Tensor& vt = nodes_[static_cast<size_t>(n.b)].val;
                Tensor& gp = grad_buf(n.a);
                Tensor& gt = grad_buf(n.b);
                const double scale = 2.0 / static_cast<double>(vp.size()) * g.v[0];
                for (size_t i = 0; i < vp.size(); ++i) {
                    const double d = scale * (vp.v[i] - vt.v[i]);
                    gp.v[i] += d;
                    gt.v[i] -= d;
                }
                break;
            }
        }
    }
}

FiniteDiffReport finite_diff_check(std::span<Parameter* const> params,
                                   const std::function<double(bool)>& eval, double h) {
    for (Parameter* p : params) p->zero_grad();
    eval(true);  // analytic gradients

    FiniteDiffReport report;
    for (Parameter* p : params) {
        for (size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value.v[i];
            p->value.v[i] = saved + h;
            const double f_plus = eval(false);
            p->value.v[i] = saved - h;
            const double f_minus = eval(false);
            p->value.v[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw TapeError("finite_diff_check: non-finite probe for parameter " + p->name);
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double analytic = p->grad.v[i];
            const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-2});
            const double rel = std::abs(numeric - analytic) / denom;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst_param = p->name;
                report.worst_coord = i;
            }
        }
    }
    return report;
}

}  // namespace gridnet::ad
