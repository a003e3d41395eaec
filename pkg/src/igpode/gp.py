"""Sparse variational GPs with decoupled pathwise sampling.

A sampled function is a random Fourier feature draw from the prior, corrected
towards sampled inducing outputs by Matheron's rule:

    f(x) = phi(x) + k(x, Z) K_ZZ^-1 (u - phi(Z))

Lengthscales and inducing inputs are shared across output dimensions, so the
kernel factorises as ``k_d = sigma2_d * c`` with a unit-variance correlation
``c``.  The jitter is applied to ``c``; one Cholesky factor of ``c(Z, Z)`` then
serves every output dimension.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from igpode import diffmath as dm
from igpode.diffmath import Operand
from igpode.diffmath import Tensor
from igpode.errors import ContractError
from igpode.errors import DimensionError
from igpode.params import ParamStore

logger = logging.getLogger(__name__)

DEFAULT_RFF_FEATURES = 256
INIT_Q_VAR = 1e-2
INIT_LENGTHSCALE = 1.0
INIT_VARIANCE = 0.1


def softplus_inverse(x):
    return np.log(np.expm1(x))


@dataclass(frozen=True)
class SEKernel:
    """Squared exponential kernel with per-output variances.

    :param log_lengthscales: log of the lengthscales, shape ``(D_in,)``
    :type log_lengthscales: Tensor
    :param log_variances: log of the output variances, shape ``(D_out,)``
    :type log_variances: Tensor
    """

    log_lengthscales: Tensor
    log_variances: Tensor

    @property
    def input_dim(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def output_dim(self) -> int:
        return self.log_variances.shape[0]

    @property
    def lengthscales(self) -> Tensor:
        return dm.exp(self.log_lengthscales)

    @property
    def variances(self) -> Tensor:
        return dm.exp(self.log_variances)


@dataclass(frozen=True)
class SparseGP:
    """Inducing inputs, a diagonal Gaussian per output dimension, and a kernel.

    The diagonal covariance is stored through a softplus so it stays positive.
    """

    inducing: Tensor
    q_mu: Tensor
    q_s_raw: Tensor
    kernel: SEKernel
    jitter: float = dm.DEFAULT_JITTER

    def __post_init__(self):
        num, dim = self.inducing.shape
        if num < 1:
            raise ContractError("a sparse GP needs at least one inducing point")
        if dim != self.kernel.input_dim:
            raise DimensionError(
                f"inducing inputs have {dim} columns, kernel expects "
                f"{self.kernel.input_dim}",
            )
        expected = (num, self.kernel.output_dim)
        if self.q_mu.shape != expected or self.q_s_raw.shape != expected:
            raise DimensionError(
                f"variational parameters must have shape {expected}, got "
                f"{self.q_mu.shape} and {self.q_s_raw.shape}",
            )

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]

    @property
    def input_dim(self) -> int:
        return self.kernel.input_dim

    @property
    def output_dim(self) -> int:
        return self.kernel.output_dim

    @property
    def q_var(self) -> Tensor:
        return dm.softplus(self.q_s_raw)

    @classmethod
    def from_params(
        cls,
        params: Mapping[str, Tensor],
        prefix: str,
        jitter: float = dm.DEFAULT_JITTER,
    ) -> SparseGP:
        kernel = SEKernel(
            params[f"{prefix}.log_lengthscales"],
            params[f"{prefix}.log_variances"],
        )
        return cls(
            params[f"{prefix}.inducing"],
            params[f"{prefix}.q_mu"],
            params[f"{prefix}.q_s_raw"],
            kernel,
            jitter,
        )


def init_sparse_gp(
    store: ParamStore,
    prefix: str,
    num_inducing: int,
    input_dim: int,
    output_dim: int,
    rng: np.random.Generator,
) -> None:
    """Registers the parameters of a sparse GP under ``prefix``.

    Inducing inputs are standard normal draws; the variational means start at
    zero with variance 1e-2, lengthscales at 1 and output variances at 0.1.
    """
    if num_inducing < 1:
        raise ContractError("a sparse GP needs at least one inducing point")
    store.register(f"{prefix}.inducing", dm.gaussian(rng, (num_inducing, input_dim)))
    store.register(f"{prefix}.q_mu", np.zeros((num_inducing, output_dim)))
    store.register(
        f"{prefix}.q_s_raw",
        np.full((num_inducing, output_dim), softplus_inverse(INIT_Q_VAR)),
    )
    store.register(
        f"{prefix}.log_lengthscales",
        np.full(input_dim, np.log(INIT_LENGTHSCALE)),
    )
    store.register(
        f"{prefix}.log_variances",
        np.full(output_dim, np.log(INIT_VARIANCE)),
    )


# --------------------------------------------------------------------------------
# Kernel matrices
# --------------------------------------------------------------------------------


def se_correlation(x: Operand, x2: Operand, kernel: SEKernel) -> Tensor:
    """Unit-variance SE kernel ``exp(-0.5 * |(x - x') / l|^2)`` between rows."""
    tape = kernel.log_lengthscales.tape
    x, x2 = dm.as_tensor(tape, x), dm.as_tensor(tape, x2)
    if x.ndim != 2 or x2.ndim != 2:
        raise DimensionError(
            f"kernel inputs must be matrices, got {x.shape}, {x2.shape}",
        )
    if x.shape[1] != kernel.input_dim or x2.shape[1] != kernel.input_dim:
        raise DimensionError(
            f"kernel expects {kernel.input_dim} input columns, got "
            f"{x.shape[1]} and {x2.shape[1]}",
        )

    lengthscales = kernel.lengthscales
    xs = x / lengthscales
    x2s = x2 / lengthscales
    xx = (xs * xs).sum(axis=1, keepdims=True)
    zz = (x2s * x2s).sum(axis=1).reshape(1, x2.shape[0])
    sqdist = dm.relu(xx + zz - 2.0 * (xs @ x2s.T))
    return dm.exp(-0.5 * sqdist)


def se_kernel_matrix(x: Operand, x2: Operand, kernel: SEKernel, d: int) -> Tensor:
    """Kernel matrix for output dimension ``d``.

    :param x: inputs, shape ``(N, D_in)``
    :param x2: inputs, shape ``(N', D_in)``
    :param kernel: the kernel
    :type kernel: SEKernel
    :param d: output dimension whose variance scales the matrix
    :type d: int
    :return: ``sigma2_d * exp(-0.5 * sum_k (x_ik - x'_jk)^2 / l_k^2)``
    :rtype: Tensor
    """
    if not 0 <= d < kernel.output_dim:
        raise DimensionError(
            f"output dimension {d} out of range for {kernel.output_dim} outputs",
        )
    return kernel.variances[d] * se_correlation(x, x2, kernel)


# --------------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------------


def sample_inducing_outputs(gp: SparseGP, rng: np.random.Generator) -> Tensor:
    """Reparameterised draw ``u_d = m_d + sqrt(S_d) * eps``, shape ``(M, D_out)``."""
    eps = dm.gaussian(rng, gp.q_mu.shape)
    return gp.q_mu + dm.sqrt(gp.q_var) * eps


@dataclass(frozen=True)
class RFFBasis:
    """A fixed draw of random Fourier features, one set per output dimension.

    ``frequencies`` holds standard normal draws divided by the lengthscales, so
    the basis stays differentiable with respect to the kernel.
    """

    frequencies: Tensor
    phases: np.ndarray
    weights: np.ndarray
    kernel: SEKernel

    @property
    def num_features(self) -> int:
        return self.phases.shape[1]

    def __call__(self, x: Operand) -> Tensor:
        """Evaluates the prior path at the rows of ``x``, shape ``(N, D_out)``."""
        tape = self.frequencies.tape
        x = dm.as_tensor(tape, x)
        if x.ndim != 2 or x.shape[1] != self.kernel.input_dim:
            raise DimensionError(
                f"expected inputs with {self.kernel.input_dim} columns, got {x.shape}",
            )
        proj = x @ dm.swapaxes(self.frequencies, 1, 2)
        features = dm.cos(proj + self.phases[:, None, :])
        paths = (features * self.weights[:, None, :]).sum(axis=2)
        scale = dm.sqrt(self.kernel.variances * (2.0 / self.num_features))
        return (paths * scale.reshape(-1, 1)).T


def sample_rff_basis(
    kernel: SEKernel,
    num_features: int,
    rng: np.random.Generator,
) -> RFFBasis:
    """Draws frequencies from the kernel's spectral density plus phases and weights"""
    if num_features < 1:
        raise ContractError(f"feature count must be positive, got {num_features}")
    shape = (kernel.output_dim, num_features)
    eps = dm.gaussian(rng, shape + (kernel.input_dim,))
    phases = rng.uniform(0.0, 2.0 * np.pi, shape)
    weights = dm.gaussian(rng, shape)
    frequencies = dm.as_tensor(kernel.log_lengthscales.tape, eps) / kernel.lengthscales
    return RFFBasis(frequencies, phases, weights, kernel)


@dataclass(frozen=True)
class PathwiseFunction:
    """A concrete function drawn from the sparse GP posterior.

    :param basis: prior path
    :type basis: RFFBasis
    :param inducing: inducing inputs ``Z``
    :type inducing: Tensor
    :param inducing_outputs: sampled ``u``, shape ``(M, D_out)``
    :type inducing_outputs: Tensor
    :param coefficients: ``c(Z, Z)^-1 (u - phi(Z))``, shape ``(M, D_out)``
    :type coefficients: Tensor
    """

    basis: RFFBasis
    inducing: Tensor
    inducing_outputs: Tensor
    coefficients: Tensor

    @property
    def input_dim(self) -> int:
        return self.basis.kernel.input_dim

    @property
    def output_dim(self) -> int:
        return self.basis.kernel.output_dim

    def __call__(self, x: Operand) -> Tensor:
        correction = se_correlation(x, self.inducing, self.basis.kernel)
        return self.basis(x) + correction @ self.coefficients


def draw_pathwise(
    gp: SparseGP,
    num_features: int,
    rng: np.random.Generator,
) -> PathwiseFunction:
    """Samples ``u ~ q(U)`` and an RFF prior path, then applies Matheron's rule.

    One Cholesky factorisation per draw; each later evaluation costs
    ``O(M + F)`` per point and output dimension.
    """
    u = sample_inducing_outputs(gp, rng)
    basis = sample_rff_basis(gp.kernel, num_features, rng)
    chol = dm.cholesky(se_correlation(gp.inducing, gp.inducing, gp.kernel), gp.jitter)
    residual = u - basis(gp.inducing)
    half = dm.solve_triangular(chol, residual, lower=True)
    coefficients = dm.solve_triangular(chol.T, half, lower=False)
    return PathwiseFunction(basis, gp.inducing, u, coefficients)


# --------------------------------------------------------------------------------
# KL divergences
# --------------------------------------------------------------------------------


def kl_inducing(gp: SparseGP) -> Tensor:
    """Sum over output dimensions of ``KL(N(m_d, diag S_d) || N(0, K_ZZ,d))``.

    ``K_ZZ,d = sigma2_d * (c(Z, Z) + jitter * I)``, matching the covariance the
    pathwise sampler conditions on.
    """
    num = gp.num_inducing
    chol = dm.cholesky(se_correlation(gp.inducing, gp.inducing, gp.kernel), gp.jitter)
    chol_inv = dm.solve_triangular(chol, np.eye(num), lower=True)
    corr_inv_diag = (chol_inv * chol_inv).sum(axis=0)
    whitened_mean = dm.solve_triangular(chol, gp.q_mu, lower=True)

    variances = gp.kernel.variances
    q_var = gp.q_var
    trace = (corr_inv_diag.reshape(num, 1) * q_var).sum(axis=0) / variances
    mahalanobis = (whitened_mean * whitened_mean).sum(axis=0) / variances
    logdet_prior = 2.0 * dm.log(dm.diagonal(chol)).sum() + num * gp.kernel.log_variances
    logdet_q = dm.log(q_var).sum(axis=0)
    return 0.5 * (trace + mahalanobis - num + logdet_prior - logdet_q).sum()


def kl_diag_gaussian_vs_standard(mean: Tensor, log_var: Tensor) -> Tensor:
    """``KL(N(mean, diag exp(log_var)) || N(0, I))`` summed over all entries."""
    if mean.shape != log_var.shape:
        raise DimensionError(
            f"mean {mean.shape} and log-variance {log_var.shape} shapes differ",
        )
    return 0.5 * (dm.exp(log_var) + mean * mean - 1.0 - log_var).sum()
