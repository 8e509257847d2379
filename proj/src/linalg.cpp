#include "ssmfit/linalg.hpp"

#include <cmath>
#include <string>

#include "ssmfit/errors.hpp"

namespace ssmfit {

bool same_matrices(const std::vector<Mat>& a, const std::vector<Mat>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!same_matrix(a[i], b[i])) return false;
  }
  return true;
}

namespace {

std::size_t idx(Index k) { return static_cast<std::size_t>(k); }

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionMismatch(what);
}

}  // namespace

BlockLayout::BlockLayout(std::vector<Index> sizes) : sizes_(std::move(sizes)) {
  offsets_.reserve(sizes_.size() + 1);
  offsets_.push_back(0);
  for (Index s : sizes_) {
    require(s >= 0, "BlockLayout: negative block size");
    offsets_.push_back(offsets_.back() + s);
  }
}

BlockLayout BlockLayout::uniform(Index count, Index size) {
  return BlockLayout(std::vector<Index>(idx(count), size));
}

// ---------------------------------------------------------------------------
// BlockBidiag

BlockBidiag::BlockBidiag(Index block_dim, std::vector<Mat> transitions)
    : block_dim_(block_dim), transitions_(std::move(transitions)) {
  for (const Mat& g : transitions_) {
    require(g.rows() == block_dim_ && g.cols() == block_dim_,
            "BlockBidiag: transition blocks must be square of the block dimension");
  }
}

void BlockBidiag::check_rows(Index rows) const {
  require(rows == dim(), "BlockBidiag: operand has " + std::to_string(rows) + " rows, expected " +
                             std::to_string(dim()));
}

Mat BlockBidiag::apply(const MatRef& x) const {
  check_rows(x.rows());
  const Index n = block_dim_;
  Mat out = x;
  for (Index k = 1; k < n_blocks(); ++k) {
    out.middleRows(k * n, n).noalias() -= transition(k) * x.middleRows((k - 1) * n, n);
  }
  return out;
}

Mat BlockBidiag::transpose_apply(const MatRef& y) const {
  check_rows(y.rows());
  const Index n = block_dim_;
  Mat out = y;
  for (Index k = 1; k < n_blocks(); ++k) {
    out.middleRows((k - 1) * n, n).noalias() -= transition(k).transpose() * y.middleRows(k * n, n);
  }
  return out;
}

Mat BlockBidiag::solve(const MatRef& b, bool transposed) const {
  check_rows(b.rows());
  const Index n = block_dim_;
  const Index nb = n_blocks();
  Mat out = b;
  if (!transposed) {
    for (Index k = 1; k < nb; ++k) {
      out.middleRows(k * n, n).noalias() += transition(k) * out.middleRows((k - 1) * n, n);
    }
  } else {
    for (Index k = nb - 1; k >= 1; --k) {
      out.middleRows((k - 1) * n, n).noalias() += transition(k).transpose() * out.middleRows(k * n, n);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// BlockDiag / CovFactor

BlockDiag::BlockDiag(std::vector<Mat> blocks) : blocks_(std::move(blocks)) {
  std::vector<Index> r, c;
  r.reserve(blocks_.size());
  c.reserve(blocks_.size());
  for (const Mat& b : blocks_) {
    r.push_back(b.rows());
    c.push_back(b.cols());
  }
  rows_ = BlockLayout(std::move(r));
  cols_ = BlockLayout(std::move(c));
}

Mat BlockDiag::apply(const MatRef& x) const {
  require(x.rows() == cols(), "BlockDiag::apply: operand dimension mismatch");
  Mat out(rows(), x.cols());
  for (Index k = 0; k < n_blocks(); ++k) {
    out.middleRows(rows_.offset(k), rows_.size(k)).noalias() =
        block(k) * x.middleRows(cols_.offset(k), cols_.size(k));
  }
  return out;
}

Mat BlockDiag::transpose_apply(const MatRef& y) const {
  require(y.rows() == rows(), "BlockDiag::transpose_apply: operand dimension mismatch");
  Mat out(cols(), y.cols());
  for (Index k = 0; k < n_blocks(); ++k) {
    out.middleRows(cols_.offset(k), cols_.size(k)).noalias() =
        block(k).transpose() * y.middleRows(rows_.offset(k), rows_.size(k));
  }
  return out;
}

CovFactor::CovFactor(std::vector<Mat> blocks) : blocks_(std::move(blocks)) {
  for (Index k = 0; k < blocks_.n_blocks(); ++k) {
    require(blocks_.block(k).rows() == blocks_.block(0).rows(),
            "CovFactor: all blocks must share the same row count");
    require(blocks_.block(k).cols() <= blocks_.block(k).rows(),
            "CovFactor: a factor block has more columns than rows");
  }
}

CovFactor CovFactor::from_variances(const std::vector<Vec>& variances) {
  std::vector<Mat> blocks;
  blocks.reserve(variances.size());
  for (const Vec& var : variances) {
    Index rank = 0;
    for (Index i = 0; i < var.size(); ++i) {
      if (var(i) < 0) throw DimensionMismatch("CovFactor::from_variances: negative variance");
      if (var(i) > 0) ++rank;
    }
    Mat b = Mat::Zero(var.size(), rank);
    Index col = 0;
    for (Index i = 0; i < var.size(); ++i) {
      if (var(i) > 0) b(i, col++) = std::sqrt(var(i));
    }
    blocks.push_back(std::move(b));
  }
  return CovFactor(std::move(blocks));
}

bool CovFactor::invertible() const {
  for (Index k = 0; k < n_blocks(); ++k) {
    const Mat& b = block(k);
    if (b.rows() != b.cols()) return false;
    if (b.rows() == 0) continue;
    Eigen::PartialPivLU<Mat> lu(b);
    if (!(lu.rcond() >= kSingularRcond)) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// BlockTridiag

BlockTridiag::BlockTridiag(std::vector<Mat> diag_blocks, std::vector<Mat> lower_blocks)
    : diag_(std::move(diag_blocks)), lower_(std::move(lower_blocks)) {
  require(!diag_.empty(), "BlockTridiag: need at least one block");
  require(lower_.size() + 1 == diag_.size(), "BlockTridiag: need N-1 off-diagonal blocks");
  std::vector<Index> sizes;
  for (const Mat& d : diag_) {
    require(d.rows() == d.cols(), "BlockTridiag: diagonal blocks must be square");
    sizes.push_back(d.rows());
  }
  layout_ = BlockLayout(std::move(sizes));
  for (Index k = 1; k < n_blocks(); ++k) {
    require(lower(k).rows() == layout_.size(k) && lower(k).cols() == layout_.size(k - 1),
            "BlockTridiag: off-diagonal block shape mismatch");
  }
}

Mat BlockTridiag::apply(const MatRef& x) const {
  require(x.rows() == layout_.total(), "BlockTridiag::apply: operand dimension mismatch");
  Mat out(x.rows(), x.cols());
  for (Index k = 0; k < n_blocks(); ++k) {
    auto xk = x.middleRows(layout_.offset(k), layout_.size(k));
    auto ok = out.middleRows(layout_.offset(k), layout_.size(k));
    ok.noalias() = diag(k) * xk;
    if (k > 0) ok.noalias() += lower(k) * x.middleRows(layout_.offset(k - 1), layout_.size(k - 1));
    if (k + 1 < n_blocks()) {
      ok.noalias() += lower(k + 1).transpose() * x.middleRows(layout_.offset(k + 1), layout_.size(k + 1));
    }
  }
  return out;
}

TridiagFactor::TridiagFactor(const BlockTridiag& a) : layout_(a.layout()) {
  const Index nb = a.n_blocks();
  pivots_.reserve(idx(nb));
  lower_.reserve(idx(nb > 0 ? nb - 1 : 0));
  for (Index k = 0; k < nb; ++k) {
    Mat pivot = a.diag(k);
    if (k > 0) {
      const Mat& l = a.lower(k);
      lower_.push_back(l);
      pivot.noalias() -= l * pivots_.back().solve(l.transpose());
    }
    if (pivot.rows() > 0) {
      if (positive_definite_) {
        Eigen::LLT<Mat> llt(0.5 * (pivot + pivot.transpose()));
        if (llt.info() != Eigen::Success) positive_definite_ = false;
      }
      pivots_.emplace_back(pivot);
      const double rc = pivots_.back().rcond();
      if (!(rc >= kSingularRcond)) {
        throw SingularSystem("block pivot " + std::to_string(k) +
                             " is numerically singular (rcond " + std::to_string(rc) + ")");
      }
    } else {
      pivots_.emplace_back(pivot);
    }
  }
}

Mat TridiagFactor::solve(const MatRef& b) const {
  require(b.rows() == layout_.total(), "TridiagFactor::solve: rhs dimension mismatch");
  const Index nb = layout_.count();
  auto blk = [&](Mat& m, Index k) { return m.middleRows(layout_.offset(k), layout_.size(k)); };
  Mat y = b;
  // Forward: y_k -= L_k S_{k-1}^{-1} y_{k-1}
  for (Index k = 1; k < nb; ++k) {
    if (layout_.size(k - 1) == 0) continue;
    Mat t = pivots_[idx(k - 1)].solve(blk(y, k - 1));
    blk(y, k).noalias() -= lower_[idx(k - 1)] * t;
  }
  // Backward: x_k = S_k^{-1}(y_k - L_{k+1}^T x_{k+1})
  for (Index k = nb - 1; k >= 0; --k) {
    if (k + 1 < nb) blk(y, k).noalias() -= lower_[idx(k)].transpose() * blk(y, k + 1);
    if (layout_.size(k) > 0) blk(y, k) = pivots_[idx(k)].solve(blk(y, k));
  }
  return y;
}

Mat tridiag_factor_solve(const BlockTridiag& a, const MatRef& b) { return TridiagFactor(a).solve(b); }

// ---------------------------------------------------------------------------
// KktSystem

KktSystem::KktSystem(KktBlocks blocks) : blocks_(std::move(blocks)) {
  const BlockBidiag& g = blocks_.dynamics;
  const BlockDiag& h = blocks_.measurement;
  const CovFactor& bq = blocks_.q_factor;
  const CovFactor& br = blocks_.r_factor;
  const Index nb = g.n_blocks();
  n_ = g.block_dim();
  require(h.n_blocks() == nb && bq.n_blocks() == nb && br.n_blocks() == nb,
          "KktSystem: operators disagree on the number of steps");
  m_ = nb > 0 ? h.block(0).rows() : 0;
  for (Index k = 0; k < nb; ++k) {
    require(h.block(k).rows() == m_ && h.block(k).cols() == n_, "KktSystem: measurement block shape");
  }
  require(bq.row_layout() == BlockLayout::uniform(nb, n_), "KktSystem: process factor rows");
  require(br.row_layout() == h.row_layout(), "KktSystem: measurement factor rows");
  require(blocks_.curv_p.size() == bq.col_layout().total(), "KktSystem: process curvature size");
  require(blocks_.curv_m.size() == br.col_layout().total(), "KktSystem: measurement curvature size");

  for (const Vec* c : {&blocks_.curv_p, &blocks_.curv_m}) {
    for (Index i = 0; i < c->size(); ++i) {
      if (!std::isfinite((*c)(i)) || (*c)(i) == 0.0) {
        throw SchurSingular("loss curvature entry " + std::to_string(i) + " is not invertible");
      }
    }
  }

  layout_ = BlockLayout({g.dim(), bq.col_layout().total(), br.col_layout().total(), g.dim(), h.rows()});

  w_.reserve(idx(nb));
  v_.reserve(idx(nb));
  for (Index k = 0; k < nb; ++k) {
    const Mat& q = bq.block(k);
    const Vec inv_p = blocks_.curv_p.segment(bq.col_layout().offset(k), q.cols()).cwiseInverse();
    w_.push_back(q * inv_p.asDiagonal() * q.transpose());
    const Mat& r = br.block(k);
    const Vec inv_m = blocks_.curv_m.segment(br.col_layout().offset(k), r.cols()).cwiseInverse();
    v_.push_back(r * inv_m.asDiagonal() * r.transpose());
  }

  // Banded embedding of S, interleaved per step as (x_k, mu_k, la_k).
  const Index bs = 2 * n_ + m_;
  std::vector<Mat> diag;
  std::vector<Mat> lower;
  diag.reserve(idx(nb));
  for (Index k = 0; k < nb; ++k) {
    Mat d = Mat::Zero(bs, bs);
    d.block(0, n_, n_, n_).setIdentity();
    d.block(n_, 0, n_, n_).setIdentity();
    d.block(0, 2 * n_, n_, m_) = h.block(k).transpose();
    d.block(2 * n_, 0, m_, n_) = h.block(k);
    d.block(n_, n_, n_, n_) = -w_[idx(k)];
    d.block(2 * n_, 2 * n_, m_, m_) = -v_[idx(k)];
    diag.push_back(std::move(d));
    if (k > 0) {
      Mat l = Mat::Zero(bs, bs);
      l.block(n_, 0, n_, n_) = -g.transition(k);
      lower.push_back(std::move(l));
    }
  }
  try {
    embedding_.emplace(BlockTridiag(std::move(diag), std::move(lower)));
  } catch (const SingularSystem& e) {
    throw SchurSingular(std::string("Schur complement of the KKT matrix is singular: ") + e.what());
  }
}

Mat KktSystem::schur_solve(const MatRef& g) const {
  const Index nb = blocks_.dynamics.n_blocks();
  const Index bs = 2 * n_ + m_;
  require(g.rows() == nb * m_, "KktSystem::schur_solve: rhs dimension mismatch");
  Mat rhs = Mat::Zero(nb * bs, g.cols());
  for (Index k = 0; k < nb; ++k) rhs.middleRows(k * bs + 2 * n_, m_) = -g.middleRows(k * m_, m_);
  const Mat sol = embedding_->solve(rhs);
  Mat out(nb * m_, g.cols());
  for (Index k = 0; k < nb; ++k) out.middleRows(k * m_, m_) = sol.middleRows(k * bs + 2 * n_, m_);
  return out;
}

Mat KktSystem::solve(const MatRef& rhs) const {
  require(rhs.rows() == layout_.total(), "KktSystem::solve: rhs dimension mismatch");
  const CovFactor& bq = blocks_.q_factor;
  const CovFactor& br = blocks_.r_factor;
  const Vec inv_p = blocks_.curv_p.cwiseInverse();
  const Vec inv_m = blocks_.curv_m.cwiseInverse();
  const Index nb = blocks_.dynamics.n_blocks();
  const Index bs = 2 * n_ + m_;
  const Index cols = rhs.cols();

  auto part = [&](Index b) { return rhs.middleRows(layout_.offset(b), layout_.size(b)); };
  const Mat b = part(1);
  const Mat c = part(2);
  // Eliminate the residual rows, then solve the banded (x, lam_p, lam_m) system.
  // This avoids G^{-1} sweeps, which amplify errors when the dynamics are unstable.
  const Mat dp = part(3) + bq.apply(inv_p.asDiagonal() * b);
  const Mat em = part(4) + br.apply(inv_m.asDiagonal() * c);
  const auto a = part(0);
  Mat banded(nb * bs, cols);
  for (Index k = 0; k < nb; ++k) {
    banded.middleRows(k * bs, n_) = a.middleRows(k * n_, n_);
    banded.middleRows(k * bs + n_, n_) = dp.middleRows(k * n_, n_);
    banded.middleRows(k * bs + 2 * n_, m_) = em.middleRows(k * m_, m_);
  }
  const Mat sol = embedding_->solve(banded);
  Mat x(nb * n_, cols), lam_p(nb * n_, cols), lam_m(nb * m_, cols);
  for (Index k = 0; k < nb; ++k) {
    x.middleRows(k * n_, n_) = sol.middleRows(k * bs, n_);
    lam_p.middleRows(k * n_, n_) = sol.middleRows(k * bs + n_, n_);
    lam_m.middleRows(k * m_, m_) = sol.middleRows(k * bs + 2 * n_, m_);
  }
  const Mat r_p = inv_p.asDiagonal() * (b + bq.transpose_apply(lam_p));
  const Mat r_m = inv_m.asDiagonal() * (c + br.transpose_apply(lam_m));

  Mat out(layout_.total(), cols);
  out.middleRows(layout_.offset(0), layout_.size(0)) = x;
  out.middleRows(layout_.offset(1), layout_.size(1)) = r_p;
  out.middleRows(layout_.offset(2), layout_.size(2)) = r_m;
  out.middleRows(layout_.offset(3), layout_.size(3)) = lam_p;
  out.middleRows(layout_.offset(4), layout_.size(4)) = lam_m;
  return out;
}

Mat KktSystem::apply(const MatRef& y) const {
  require(y.rows() == layout_.total(), "KktSystem::apply: operand dimension mismatch");
  const BlockBidiag& g = blocks_.dynamics;
  const BlockDiag& h = blocks_.measurement;
  const CovFactor& bq = blocks_.q_factor;
  const CovFactor& br = blocks_.r_factor;
  auto part = [&](Index b) { return y.middleRows(layout_.offset(b), layout_.size(b)); };
  const Mat x = part(0);
  const Mat r_p = part(1);
  const Mat r_m = part(2);
  const Mat lam_p = part(3);
  const Mat lam_m = part(4);

  Mat out(layout_.total(), y.cols());
  out.middleRows(layout_.offset(0), layout_.size(0)) = g.transpose_apply(lam_p) + h.transpose_apply(lam_m);
  out.middleRows(layout_.offset(1), layout_.size(1)) =
      blocks_.curv_p.asDiagonal() * r_p - bq.transpose_apply(lam_p);
  out.middleRows(layout_.offset(2), layout_.size(2)) =
      blocks_.curv_m.asDiagonal() * r_m - br.transpose_apply(lam_m);
  out.middleRows(layout_.offset(3), layout_.size(3)) = g.apply(x) - bq.apply(r_p);
  out.middleRows(layout_.offset(4), layout_.size(4)) = h.apply(x) - br.apply(r_m);
  return out;
}

Mat kkt_reduce_solve(const KktBlocks& blocks, const MatRef& rhs) { return KktSystem(blocks).solve(rhs); }

}  // namespace ssmfit
