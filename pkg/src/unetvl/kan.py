"""Projection layers for the ViL block up/down maps.

The primary layer expands each input feature in a Chebyshev polynomial basis
(inputs squashed to [-1, 1] with tanh) and contracts against a learnable
coefficient tensor C of shape (input_dim, output_dim, degree + 1):

    y[n, o] = sum_i sum_j T[n, i, j] * C[i, o, j]

Competing univariate bases (B-spline, Gaussian RBF) share the same contract,
and an MLP / plain linear map round out the bakeoff grid. All kinds are
drop-in interchangeable: (N, input_dim) -> (N, output_dim).
"""

from __future__ import annotations

import enum

import numpy as np

from .engine import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    narrow,
    reshape,
    silu,
    stack,
    tanh,
    transpose,
)
from .module import Module, init_normal, init_weight, init_zeros


class ProjectionKind(str, enum.Enum):
    CHEBYSHEV = "chebyshev"
    BSPLINE = "bspline"
    RBF = "rbf"
    MLP = "mlp"
    LINEAR = "linear"

    @classmethod
    def parse(cls, name: str) -> "ProjectionKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown projection kind {name!r}; expected one of {valid}") from None


def chebyshev_polynomials(u: Tensor, degree: int) -> Tensor:
    """Evaluate T_0..T_degree elementwise via the recurrence.

    T_0 = 1, T_1 = u, T_m = 2 u T_{m-1} - T_{m-2}. Output shape is
    u.shape + (degree + 1,). Inputs are assumed to lie in [-1, 1]; there the
    values are bounded and match cos(m * arccos(u)).
    """
    if degree < 0:
        raise ValueError(f"degree must be >= 0, got {degree}")
    terms = [Tensor.ones(u.shape, dtype=u.data.dtype)]
    if degree >= 1:
        terms.append(u)
    for _ in range(2, degree + 1):
        terms.append(2.0 * u * terms[-1] - terms[-2])
    return stack(terms, axis=-1)


def chebyshev_basis(x: Tensor, degree: int) -> Tensor:
    """tanh-squash then expand: (N, K) -> (N, K, degree + 1)."""
    return chebyshev_polynomials(tanh(x), degree)


def _basis_contract(basis: Tensor, coeffs: Tensor) -> Tensor:
    """Contract (N, K, J) basis with (K, out, J) coefficients -> (N, out).

    Equivalent to einsum('nij,ioj->no'); routed through a single GEMM.
    """
    n = basis.shape[0]
    k, out_dim, j = coeffs.shape
    flat_basis = reshape(basis, (n, k * j))
    flat_coeffs = reshape(transpose(coeffs, (0, 2, 1)), (k * j, out_dim))
    return matmul(flat_basis, flat_coeffs)


class ChebyshevKANLayer(Module):
    """Chebyshev-basis projection with learnable coefficient tensor."""

    def __init__(self, input_dim: int, output_dim: int, degree: int = 4, prng=None, dtype="f32"):
        if degree < 0:
            raise ValueError(f"degree must be >= 0, got {degree}")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.degree = degree
        # Std 1/(K*(degree+1)) keeps initial outputs O(1) regardless of degree.
        self.coeffs = init_normal(
            prng, (input_dim, output_dim, degree + 1), dtype, std=1.0 / (input_dim * (degree + 1))
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"chebyshev forward: expected (N, {self.input_dim}), got {x.shape}")
        return _basis_contract(chebyshev_basis(x, self.degree), self.coeffs)


def bspline_knots(grid_size: int, order: int) -> np.ndarray:
    """Uniform knots on [-1, 1] extended by ``order`` on each side."""
    h = 2.0 / grid_size
    return -1.0 + h * np.arange(-order, grid_size + order + 1)


def bspline_bases(u: Tensor, grid_size: int, order: int) -> Tensor:
    """Cox-de Boor evaluation: (N, K) -> (N, K, grid_size + order).

    The basis partitions unity on [-1, 1]; the last interior interval is
    right-closed so u = 1 is covered.
    """
    knots = bspline_knots(grid_size, order).astype(u.data.dtype)
    n_intervals = len(knots) - 1
    u3 = reshape(u, u.shape + (1,))
    ud = u.data[..., None]
    zero_order = (ud >= knots[:-1]) & (ud < knots[1:])
    last_interior = order + grid_size - 1
    zero_order[..., last_interior] |= ud[..., 0] == knots[last_interior + 1]
    b = Tensor(zero_order.astype(u.data.dtype))
    for r in range(1, order + 1):
        m = n_intervals - r
        left_den = knots[r : r + m] - knots[:m]
        right_den = knots[r + 1 : r + 1 + m] - knots[1 : 1 + m]
        left = (u3 - Tensor(knots[:m])) * Tensor(1.0 / left_den)
        right = (Tensor(knots[r + 1 : r + 1 + m]) - u3) * Tensor(1.0 / right_den)
        b = left * narrow(b, -1, 0, m) + right * narrow(b, -1, 1, m)
    return b


class BSplineKANLayer(Module):
    """B-spline basis projection (uniform knots, cubic by default)."""

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        grid_size: int = 5,
        spline_order: int = 3,
        prng=None,
        dtype="f32",
    ):
        if grid_size < 1 or spline_order < 1:
            raise ValueError("grid_size and spline_order must be >= 1")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.grid_size = grid_size
        self.spline_order = spline_order
        n_basis = grid_size + spline_order
        self.coeffs = init_normal(
            prng, (input_dim, output_dim, n_basis), dtype, std=1.0 / (input_dim * n_basis)
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"bspline forward: expected (N, {self.input_dim}), got {x.shape}")
        basis = bspline_bases(tanh(x), self.grid_size, self.spline_order)
        return _basis_contract(basis, self.coeffs)


def rbf_centers(num_centers: int) -> tuple[np.ndarray, float]:
    """Fixed uniform centers on [-1, 1]; bandwidth equals the spacing."""
    if num_centers < 2:
        raise ValueError(f"num_centers must be >= 2, got {num_centers}")
    centers = np.linspace(-1.0, 1.0, num_centers)
    return centers, 2.0 / (num_centers - 1)


class GaussianRBFKANLayer(Module):
    """Gaussian bump basis: exp(-((u - c)/sigma)^2), value 1 at each center."""

    def __init__(self, input_dim: int, output_dim: int, num_centers: int = 5, prng=None, dtype="f32"):
        centers, sigma = rbf_centers(num_centers)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.num_centers = num_centers
        self._centers = centers
        self._sigma = sigma
        self.coeffs = init_normal(
            prng, (input_dim, output_dim, num_centers), dtype, std=1.0 / (input_dim * num_centers)
        )

    def bases(self, u: Tensor) -> Tensor:
        u3 = reshape(u, u.shape + (1,))
        z = (u3 - Tensor(self._centers.astype(u.data.dtype))) * (1.0 / self._sigma)
        return (-(z * z)).exp()

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"rbf forward: expected (N, {self.input_dim}), got {x.shape}")
        return _basis_contract(self.bases(tanh(x)), self.coeffs)


def mlp_parity_hidden(input_dim: int, output_dim: int, degree: int = 4) -> int:
    """Hidden width that roughly parameter-matches a Chebyshev layer."""
    target = input_dim * output_dim * (degree + 1)
    return max(1, round(target / (input_dim + output_dim + 1)))


class MLPProjection(Module):
    """Two affine maps with one activation (the baseline the KAN replaces)."""

    def __init__(self, input_dim: int, output_dim: int, hidden: int | None = None, prng=None, dtype="f32"):
        if hidden is None:
            hidden = mlp_parity_hidden(input_dim, output_dim)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.hidden = hidden
        self.w1 = init_weight(prng, (input_dim, hidden), dtype)
        self.b1 = init_zeros((hidden,), dtype)
        self.w2 = init_weight(prng, (hidden, output_dim), dtype)
        self.b2 = init_zeros((output_dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"mlp forward: expected (N, {self.input_dim}), got {x.shape}")
        h = silu(matmul(x, self.w1) + self.b1)
        return matmul(h, self.w2) + self.b2


class LinearProjection(Module):
    """Plain affine map (the 'w/o KAN' configuration)."""

    def __init__(self, input_dim: int, output_dim: int, prng=None, dtype="f32"):
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.w = init_weight(prng, (input_dim, output_dim), dtype)
        self.b = init_zeros((output_dim,), dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"linear forward: expected (N, {self.input_dim}), got {x.shape}")
        return matmul(x, self.w) + self.b


def make_projection(
    kind: ProjectionKind,
    input_dim: int,
    output_dim: int,
    degree: int = 4,
    grid_size: int = 5,
    spline_order: int = 3,
    prng=None,
    dtype="f32",
) -> Module:
    kind = ProjectionKind(kind)
    if kind is ProjectionKind.CHEBYSHEV:
        return ChebyshevKANLayer(input_dim, output_dim, degree, prng=prng, dtype=dtype)
    if kind is ProjectionKind.BSPLINE:
        return BSplineKANLayer(input_dim, output_dim, grid_size, spline_order, prng=prng, dtype=dtype)
    if kind is ProjectionKind.RBF:
        return GaussianRBFKANLayer(input_dim, output_dim, max(2, degree + 1), prng=prng, dtype=dtype)
    if kind is ProjectionKind.MLP:
        return MLPProjection(
            input_dim, output_dim, mlp_parity_hidden(input_dim, output_dim, degree), prng=prng, dtype=dtype
        )
    return LinearProjection(input_dim, output_dim, prng=prng, dtype=dtype)


def projection_param_count(
    kind: ProjectionKind,
    input_dim: int,
    output_dim: int,
    degree: int = 4,
    grid_size: int = 5,
    spline_order: int = 3,
    hidden: int | None = None,
) -> int:
    """Closed-form learnable-parameter count per projection kind."""
    kind = ProjectionKind(kind)
    if kind is ProjectionKind.CHEBYSHEV:
        return input_dim * output_dim * (degree + 1)
    if kind is ProjectionKind.BSPLINE:
        return input_dim * output_dim * (grid_size + spline_order)
    if kind is ProjectionKind.RBF:
        return input_dim * output_dim * max(2, degree + 1)
    if kind is ProjectionKind.MLP:
        h = hidden if hidden is not None else mlp_parity_hidden(input_dim, output_dim, degree)
        return input_dim * h + h + h * output_dim + output_dim
    return input_dim * output_dim + output_dim
