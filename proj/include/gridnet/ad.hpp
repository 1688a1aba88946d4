#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace gridnet::ad {

struct TapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dense row-major real tensor. Rank 1 or 2 in practice.
struct Tensor {
    std::vector<size_t> shape;
    std::vector<double> v;

    Tensor() = default;
    static Tensor zeros(std::vector<size_t> shape);
    static Tensor scalar(double x);
    static Tensor matrix(size_t rows, size_t cols, std::vector<double> vals);

    size_t size() const { return v.size(); }
    size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    size_t cols() const { return shape.size() > 1 ? shape[1] : 1; }
    double& at(size_t i, size_t j) { return v[i * cols() + j]; }
    double at(size_t i, size_t j) const { return v[i * cols() + j]; }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool operator==(const Tensor&) const = default;
};

/// Trainable tensor with an accumulating gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor val);
    void zero_grad();
};

using NodeId = int32_t;

/// Append-only reverse-mode tape. One tape per forward pass; inputs always
/// precede consumers, so backward is a single reverse scan.
class Tape {
public:
    NodeId constant(Tensor t);
    NodeId param(Parameter& p);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);  // elementwise
    NodeId add_const(NodeId a, double c);
    NodeId mul_const(NodeId a, double c);
    NodeId matmul(NodeId a, NodeId b);
    NodeId relu(NodeId a);  // subgradient at 0 is 0
    NodeId concat_cols(NodeId a, NodeId b);
    NodeId gather_rows(NodeId a, std::vector<int32_t> idx);
    NodeId segment_sum(NodeId a, std::vector<int32_t> seg, int32_t n_segments);
    NodeId segment_mean(NodeId a, std::vector<int32_t> seg, int32_t n_segments);
    /// x^p elementwise; requires x > 0, p a nonzero scalar node.
    NodeId pow_base(NodeId x, NodeId p);
    /// x^(1/p) elementwise; same requirements.
    NodeId pow_inv(NodeId x, NodeId p);
    NodeId row_l2norm(NodeId x);               // N x d -> N x 1
    NodeId scale_rows(NodeId x, NodeId r);     // x_ij * r_i
    NodeId div_rows_safe(NodeId x, NodeId r);  // x_ij / r_i, 0 where r_i == 0
    NodeId mul_scalar(NodeId x, NodeId s);     // s is a 1-element node
    NodeId add_rowvec(NodeId x, NodeId b);     // x_ij + b_j
    NodeId mse_loss(NodeId pred, NodeId target);

    const Tensor& value(NodeId id) const;
    const Tensor& grad(NodeId id) const;

    /// Accumulate dLoss/dParam into every bound Parameter. Loss must be a
    /// 1-element tensor.
    void backward(NodeId loss);

    size_t size() const { return nodes_.size(); }

private:
    enum class Op : uint8_t {
        Constant,
        Param,
        Add,
        Sub,
        Mul,
        AddConst,
        MulConst,
        MatMul,
        Relu,
        ConcatCols,
        GatherRows,
        SegmentSum,
        SegmentMean,
        PowBase,
        PowInv,
        RowL2Norm,
        ScaleRows,
        DivRowsSafe,
        MulScalar,
        AddRowVec,
        MseLoss,
    };

    struct Node {
        Op op;
        NodeId a = -1;
        NodeId b = -1;
        double c = 0.0;
        Tensor val;
        Tensor grad;
        bool has_grad = false;
        std::vector<int32_t> idx;  // gather indices / segment ids
        Tensor saved;              // op intermediates reused by backward
        Parameter* bound = nullptr;
    };

    NodeId push(Node n, const char* op_name);
    Tensor& grad_buf(NodeId id);
    const Node& at(NodeId id) const;

    std::vector<Node> nodes_;
};

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    size_t worst_coord = 0;
};

/// Central-difference check of tape gradients. `eval(true)` must run
/// forward+backward, accumulating into the given parameters' grads, and
/// return the scalar loss; `eval(false)` is forward-only. Relative error per
/// coordinate uses denominator max(|numeric|, |analytic|, 0.01), so the
/// conventional 1e-4 pass threshold carries a 1e-6 absolute floor.
FiniteDiffReport finite_diff_check(std::span<Parameter* const> params,
                                   const std::function<double(bool)>& eval, double h = 1e-5);

}  // namespace gridnet::ad
