#ifndef NETREG_SPECTRAL_HPP
#define NETREG_SPECTRAL_HPP

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "netreg/graph.hpp"

namespace netreg {

/// Leading Laplacian eigenpairs, eigenvalues ascending.
struct SpectralBasis {
  VectorXd eigenvalues;
  MatrixXd eigenvectors;  // n x K, orthonormal columns

  Index rank() const { return eigenvalues.size(); }
  Index num_vertices() const { return eigenvectors.rows(); }
};

/// Default maximum basis rank for a graph on n vertices.
inline Index default_basis_rank(Index n) {
  return std::max<Index>(1, std::min<Index>(n - 1, 250));
}

/*
 * First K eigenpairs of L in ascending order.  Each eigenvector is flipped so
 * its first entry above 1e-9 in magnitude is positive, which makes the basis
 * reproducible for identical input.  Throws when the eigen-residual exceeds
 * 1e-8 * max|L|.
 */
inline SpectralBasis eigenbasis(const LaplacianOps& ops, Index K) {
  const Index n = ops.num_vertices();
  if (K < 1 || K > n)
    throw Error("eigenbasis: rank K=" + std::to_string(K) + " outside [1, " +
                std::to_string(n) + "]");
  const MatrixXd dense = MatrixXd(ops.laplacian);
  Eigen::SelfAdjointEigenSolver<MatrixXd> solver(dense);
  if (solver.info() != Eigen::Success)
    throw Error("eigenbasis: symmetric eigensolver did not converge");

  SpectralBasis basis;
  basis.eigenvalues = solver.eigenvalues().head(K).cwiseMax(0.0);
  basis.eigenvectors = solver.eigenvectors().leftCols(K);
  for (Index k = 0; k < K; ++k) {
    auto col = basis.eigenvectors.col(k);
    for (Index i = 0; i < n; ++i) {
      if (std::abs(col[i]) > 1e-9) {
        if (col[i] < 0) col = -col;
        break;
      }
    }
  }

  const double scale = std::max(dense.cwiseAbs().maxCoeff(), 1e-300);
  const double residual =
      (dense * basis.eigenvectors -
       basis.eigenvectors * basis.eigenvalues.asDiagonal())
          .cwiseAbs()
          .maxCoeff();
  if (residual > 1e-8 * scale) {
    std::ostringstream msg;
    msg << "eigenbasis: eigen-residual " << residual << " exceeds tolerance "
        << 1e-8 * scale;
    throw Error(msg.str());
  }
  return basis;
}

/*
 * Block design [Phi_{1:t0}  Diag(x_1) Phi_{1:t1}  ...  Diag(x_p) Phi_{1:tp}].
 * Predictor 0 is the intercept (x_0 = 1); covariates() holds all p+1 columns.
 */
class DesignMatrix {
 public:
  DesignMatrix() = default;
  DesignMatrix(MatrixXd matrix, MatrixXd covariates, std::vector<Index> ranks)
      : matrix_(std::move(matrix)),
        covariates_(std::move(covariates)),
        ranks_(std::move(ranks)) {
    offsets_.reserve(ranks_.size());
    Index at = 0;
    for (Index r : ranks_) {
      offsets_.push_back(at);
      at += r;
    }
  }

  const MatrixXd& matrix() const { return matrix_; }
  const MatrixXd& covariates() const { return covariates_; }
  const std::vector<Index>& ranks() const { return ranks_; }
  Index num_predictors() const { return static_cast<Index>(ranks_.size()); }
  Index num_columns() const { return matrix_.cols(); }
  Index num_vertices() const { return matrix_.rows(); }
  Index block_offset(Index j) const { return offsets_[static_cast<std::size_t>(j)]; }
  Index block_rank(Index j) const { return ranks_[static_cast<std::size_t>(j)]; }

  auto block(Index j) const { return matrix_.middleCols(block_offset(j), block_rank(j)); }

 private:
  MatrixXd matrix_;
  MatrixXd covariates_;
  std::vector<Index> ranks_;
  std::vector<Index> offsets_;
};

/// Prepends the intercept column to an n x p covariate matrix.
inline MatrixXd with_intercept(const MatrixXd& X) {
  MatrixXd full(X.rows(), X.cols() + 1);
  full.col(0).setOnes();
  full.rightCols(X.cols()) = X;
  return full;
}

/// `X` holds the p covariates without the intercept; ranks has p+1 entries.
inline DesignMatrix build_design(const MatrixXd& X, const SpectralBasis& basis,
                                 std::span<const Index> ranks) {
  const Index n = basis.num_vertices();
  if (X.rows() != n)
    throw Error("build_design: covariate rows do not match basis size");
  if (static_cast<Index>(ranks.size()) != X.cols() + 1)
    throw Error("build_design: rank vector needs one entry per covariate plus the intercept");
  Index total = 0;
  for (Index r : ranks) {
    if (r < 0 || r > basis.rank())
      throw Error("build_design: rank " + std::to_string(r) +
                  " outside [0, K=" + std::to_string(basis.rank()) + "]");
    total += r;
  }
  MatrixXd cov = with_intercept(X);
  MatrixXd D(n, total);
  Index at = 0;
  for (std::size_t j = 0; j < ranks.size(); ++j) {
    const Index r = ranks[j];
    D.middleCols(at, r) =
        cov.col(static_cast<Index>(j)).asDiagonal() * basis.eigenvectors.leftCols(r);
    at += r;
  }
  return DesignMatrix(std::move(D), std::move(cov), {ranks.begin(), ranks.end()});
}

/// Diag(x) Phi_{1:K}: the full-rank block used while selecting ranks.
inline MatrixXd predictor_block(const VectorXd& x, const SpectralBasis& basis) {
  return x.asDiagonal() * basis.eigenvectors;
}

/// D' L D.
inline MatrixXd laplacian_gram(const MatrixXd& design, const SparseMatrix& laplacian) {
  MatrixXd LD = laplacian * design;
  MatrixXd gram = design.transpose() * LD;
  return 0.5 * (gram + gram.transpose());
}

/// (p+1) x n matrix whose row j is beta_j(v) = Phi_{v,1:t_j} theta_j.
inline MatrixXd vertex_coefficients(const VectorXd& theta, const DesignMatrix& design,
                                    const SpectralBasis& basis) {
  if (theta.size() != design.num_columns())
    throw Error("vertex_coefficients: coefficient length does not match design");
  MatrixXd surfaces(design.num_predictors(), basis.num_vertices());
  for (Index j = 0; j < design.num_predictors(); ++j) {
    const Index r = design.block_rank(j);
    if (r == 0) {
      surfaces.row(j).setZero();
      continue;
    }
    surfaces.row(j) =
        (basis.eigenvectors.leftCols(r) * theta.segment(design.block_offset(j), r))
            .transpose();
  }
  return surfaces;
}

// ---------------------------------------------------------------------------
// Basis cache

/// FNV-1a over the bytes of trivially copyable values.
class Fnv1a {
 public:
  template <typename T>
  void add(const T& value) {
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, &value, sizeof(T));
    for (unsigned char b : bytes) {
      hash_ ^= b;
      hash_ *= 1099511628211ULL;
    }
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 14695981039346656037ULL;
};

/// Hash of (graph topology and distances, range, K).
inline std::uint64_t basis_key(const WeightedGraph& graph, double range, Index K) {
  Fnv1a h;
  h.add(static_cast<std::int64_t>(graph.num_vertices()));
  for (const auto& e : graph.edges()) {
    h.add(static_cast<std::int64_t>(e.source));
    h.add(static_cast<std::int64_t>(e.target));
    h.add(e.distance);
  }
  h.add(range);
  h.add(static_cast<std::int64_t>(K));
  return h.value();
}

inline std::string hex_key(std::uint64_t key) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << key;
  return out.str();
}

namespace detail {
inline constexpr char kBasisMagic[8] = {'N', 'R', 'B', 'A', 'S', 'I', 'S', '1'};
}

inline void save_basis(const std::filesystem::path& path, const SpectralBasis& basis,
                       std::uint64_t key) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write basis cache " + path.string());
  const std::int64_t n = basis.num_vertices(), K = basis.rank();
  out.write(detail::kBasisMagic, sizeof detail::kBasisMagic);
  out.write(reinterpret_cast<const char*>(&key), sizeof key);
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(reinterpret_cast<const char*>(&K), sizeof K);
  out.write(reinterpret_cast<const char*>(basis.eigenvalues.data()),
            static_cast<std::streamsize>(K * sizeof(double)));
  out.write(reinterpret_cast<const char*>(basis.eigenvectors.data()),
            static_cast<std::streamsize>(n * K * sizeof(double)));
  if (!out) throw Error("failed writing basis cache " + path.string());
}

/// The cached basis when the file exists and carries `key`; nullopt otherwise.
inline std::optional<SpectralBasis> load_basis(const std::filesystem::path& path,
                                               std::uint64_t key) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return std::nullopt;
  char magic[8];
  std::uint64_t stored = 0;
  std::int64_t n = 0, K = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&stored), sizeof stored);
  in.read(reinterpret_cast<char*>(&n), sizeof n);
  in.read(reinterpret_cast<char*>(&K), sizeof K);
  if (!in || std::memcmp(magic, detail::kBasisMagic, sizeof magic) != 0 ||
      stored != key || n < 0 || K < 0)
    return std::nullopt;
  SpectralBasis basis;
  basis.eigenvalues.resize(K);
  basis.eigenvectors.resize(n, K);
  in.read(reinterpret_cast<char*>(basis.eigenvalues.data()),
          static_cast<std::streamsize>(K * sizeof(double)));
  in.read(reinterpret_cast<char*>(basis.eigenvectors.data()),
          static_cast<std::streamsize>(n * K * sizeof(double)));
  if (!in) return std::nullopt;
  return basis;
}

/// Loads the basis from `cache_dir` when present, else computes and stores it.
inline SpectralBasis cached_eigenbasis(const WeightedGraph& graph, double range,
                                       const LaplacianOps& ops, Index K,
                                       const std::filesystem::path& cache_dir) {
  const auto key = basis_key(graph, range, K);
  const auto file = cache_dir / ("basis-" + hex_key(key) + ".bin");
  if (auto hit = load_basis(file, key)) return *hit;
  auto basis = eigenbasis(ops, K);
  std::filesystem::create_directories(cache_dir);
  save_basis(file, basis, key);
  return basis;
}

}  // namespace netreg

#endif  // NETREG_SPECTRAL_HPP
