#pragma once

#include <optional>
#include <vector>

#include <Eigen/Dense>

namespace ssmfit {

using Index = Eigen::Index;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
using MatRef = Eigen::Ref<const Mat>;
using VecRef = Eigen::Ref<const Vec>;

/// A block pivot whose reciprocal condition estimate falls below this value is
/// treated as singular (condition number above 1e12).
inline constexpr double kSingularRcond = 1e-12;

/// Exact equality that also accepts operands of different shapes.
inline bool same_matrix(const Mat& a, const Mat& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && a == b;
}
bool same_matrices(const std::vector<Mat>& a, const std::vector<Mat>& b);

/// Sizes and offsets of a stack of variable-length blocks.
class BlockLayout {
 public:
  BlockLayout() : offsets_{0} {}
  explicit BlockLayout(std::vector<Index> sizes);
  static BlockLayout uniform(Index count, Index size);

  Index count() const { return static_cast<Index>(sizes_.size()); }
  Index size(Index k) const { return sizes_[static_cast<std::size_t>(k)]; }
  Index offset(Index k) const { return offsets_[static_cast<std::size_t>(k)]; }
  Index total() const { return offsets_.back(); }

  friend bool operator==(const BlockLayout&, const BlockLayout&) = default;

 private:
  std::vector<Index> sizes_;
  std::vector<Index> offsets_;
};

/// Unit lower block-bidiagonal operator
///
///     [  I                ]
///     [ -G_2   I          ]
///     [       ...   ...   ]
///     [            -G_N  I]
///
/// Only the transition blocks G_2..G_N are stored. The unit diagonal makes the
/// operator invertible for every choice of transitions.
class BlockBidiag {
 public:
  /// `transitions[k - 1]` is G_{k+1} (0-based block k couples to block k - 1).
  /// The number of blocks is `transitions.size() + 1`.
  BlockBidiag(Index block_dim, std::vector<Mat> transitions);

  Index n_blocks() const { return static_cast<Index>(transitions_.size()) + 1; }
  Index block_dim() const { return block_dim_; }
  Index dim() const { return n_blocks() * block_dim_; }

  /// Transition coupling block k to block k - 1, for 1 <= k < n_blocks().
  const Mat& transition(Index k) const { return transitions_[static_cast<std::size_t>(k - 1)]; }

  Mat apply(const MatRef& x) const;
  Mat transpose_apply(const MatRef& y) const;
  /// G^{-1} b by forward substitution, or G^{-T} b by back substitution.
  Mat solve(const MatRef& b, bool transposed = false) const;

 private:
  void check_rows(Index rows) const;

  Index block_dim_;
  std::vector<Mat> transitions_;
};

/// Block-diagonal operator with rectangular blocks.
class BlockDiag {
 public:
  BlockDiag() = default;
  explicit BlockDiag(std::vector<Mat> blocks);

  Index n_blocks() const { return static_cast<Index>(blocks_.size()); }
  const Mat& block(Index k) const { return blocks_[static_cast<std::size_t>(k)]; }
  const BlockLayout& row_layout() const { return rows_; }
  const BlockLayout& col_layout() const { return cols_; }
  Index rows() const { return rows_.total(); }
  Index cols() const { return cols_.total(); }

  Mat apply(const MatRef& x) const;
  Mat transpose_apply(const MatRef& y) const;

  friend bool operator==(const BlockDiag& a, const BlockDiag& b) { return same_matrices(a.blocks_, b.blocks_); }

 private:
  std::vector<Mat> blocks_;
  BlockLayout rows_;
  BlockLayout cols_;
};

/// Per-step covariance factors B_k with Q_k = B_k B_k^T. A factor with zero
/// columns encodes an exact equality constraint for that step.
class CovFactor {
 public:
  CovFactor() = default;
  explicit CovFactor(std::vector<Mat> blocks);

  /// Factors of diagonal covariances; zero variances drop their column so the
  /// factor has exactly rank(Q_k) columns.
  static CovFactor from_variances(const std::vector<Vec>& variances);

  Index n_blocks() const { return blocks_.n_blocks(); }
  const Mat& block(Index k) const { return blocks_.block(k); }
  Index rank(Index k) const { return blocks_.block(k).cols(); }
  Mat covariance(Index k) const { return block(k) * block(k).transpose(); }

  /// Layout of the factor's range side (state or measurement stack).
  const BlockLayout& row_layout() const { return blocks_.row_layout(); }
  /// Layout of the residual stack r with B r living in the row space.
  const BlockLayout& col_layout() const { return blocks_.col_layout(); }

  const BlockDiag& as_block_diag() const { return blocks_; }
  Mat apply(const MatRef& r) const { return blocks_.apply(r); }
  Mat transpose_apply(const MatRef& y) const { return blocks_.transpose_apply(y); }

  /// True when every block is square with a reciprocal condition estimate
  /// above kSingularRcond.
  bool invertible() const;

  friend bool operator==(const CovFactor&, const CovFactor&) = default;

 private:
  BlockDiag blocks_;
};

/// Symmetric block-tridiagonal matrix given by its diagonal blocks and the
/// blocks strictly below the diagonal.
class BlockTridiag {
 public:
  /// `lower[k - 1]` is the block at (k, k - 1).
  BlockTridiag(std::vector<Mat> diag, std::vector<Mat> lower);

  const BlockLayout& layout() const { return layout_; }
  Index n_blocks() const { return layout_.count(); }
  const Mat& diag(Index k) const { return diag_[static_cast<std::size_t>(k)]; }
  const Mat& lower(Index k) const { return lower_[static_cast<std::size_t>(k - 1)]; }

  Mat apply(const MatRef& x) const;

 private:
  std::vector<Mat> diag_;
  std::vector<Mat> lower_;
  BlockLayout layout_;
};

/// Block LDL^T sweep of a BlockTridiag: pivots S_1 = D_1 and
/// S_k = D_k - L_k S_{k-1}^{-1} L_k^T, each held as an LU factorization so that
/// symmetric indefinite matrices are handled as long as no pivot is singular.
/// Storage is linear in the number of blocks.
class TridiagFactor {
 public:
  /// Throws SingularSystem when a pivot's condition estimate exceeds 1e12.
  explicit TridiagFactor(const BlockTridiag& a);

  Mat solve(const MatRef& b) const;
  /// Every pivot admits a Cholesky factorization, i.e. the matrix is SPD.
  bool positive_definite() const { return positive_definite_; }

 private:
  BlockLayout layout_;
  std::vector<Eigen::PartialPivLU<Mat>> pivots_;
  std::vector<Mat> lower_;
  bool positive_definite_ = true;
};

Mat tridiag_factor_solve(const BlockTridiag& a, const MatRef& b);

/// Pieces of the exact saddle-point Hessian
///
///     [ 0    0     0     G^T     H^T   ]
///     [ 0    Lp    0    -Bq^T    0     ]
///     [ 0    0     Lm    0      -Br^T  ]
///     [ G   -Bq    0     0       0     ]
///     [ H    0    -Br    0       0     ]
///
/// where Lp, Lm are the diagonal loss curvatures and Bq, Br the covariance
/// factors. Unknowns are ordered (x, r_p, r_m, lam_p, lam_m).
struct KktBlocks {
  BlockBidiag dynamics;
  BlockDiag measurement;
  CovFactor q_factor;
  CovFactor r_factor;
  Vec curv_p;
  Vec curv_m;
};

/// Factored saddle-point system. Elimination follows the block row operations
/// that reduce the matrix to upper triangular form: the curvature rows and the
/// G^{-T} row are scaled out, leaving the measurement-space Schur complement
///
///     S = H G^{-1} W G^{-T} H^T + V,   W = Bq Lp^{-1} Bq^T,  V = Br Lm^{-1} Br^T.
///
/// S is dense in general; it is factored through its banded saddle embedding
///
///     [ 0   G^T  H^T ] [x ]   [ 0 ]
///     [ G  -W    0   ] [mu] = [ 0 ]
///     [ H   0   -V   ] [la]   [-g ]
///
/// interleaved per time step, whose block pivots are the successive time-ordered
/// Schur complements of S (innovation covariances). The solve is O(N).
class KktSystem {
 public:
  /// Throws SchurSingular when a curvature entry is zero or not finite or when
  /// the Schur complement cannot be factored.
  explicit KktSystem(KktBlocks blocks);

  /// Layout of the stacked unknowns: blocks x, r_p, r_m, lam_p, lam_m.
  const BlockLayout& layout() const { return layout_; }
  const KktBlocks& blocks() const { return blocks_; }

  Mat solve(const MatRef& rhs) const;
  Mat apply(const MatRef& y) const;
  /// S^{-1} g for the measurement-space Schur complement.
  Mat schur_solve(const MatRef& g) const;

 private:
  KktBlocks blocks_;
  BlockLayout layout_;
  std::vector<Mat> w_;  // Bq_k Lp_k^{-1} Bq_k^T
  std::vector<Mat> v_;  // Br_k Lm_k^{-1} Br_k^T
  Index n_ = 0;
  Index m_ = 0;
  std::optional<TridiagFactor> embedding_;
};

/// f_yy^{-1} rhs for the saddle-point Hessian assembled from `blocks`.
Mat kkt_reduce_solve(const KktBlocks& blocks, const MatRef& rhs);

}  // namespace ssmfit
