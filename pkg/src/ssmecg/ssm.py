"""Linear state-space primitives: HiPPO init, bilinear discretization, recurrence and kernel.

The numpy functions here are the reference path (small, exact, easy to audit).
The ``*_torch`` variants are batched over feature channels and differentiable;
they are what :mod:`ssmecg.network` uses during training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


class SingularDiscretizationError(ValueError):
    """Raised when ``I - dt/2 * A`` cannot be inverted."""


@dataclass
class SsmParameters:
    """Continuous-time SSM ``x' = A x + B u, y = C x`` for a single channel.

    ``D`` is fixed at zero and is kept only so the full tuple is explicit.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float
    D: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        n = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=np.float64).reshape(n, 1)
        self.C = np.asarray(self.C, dtype=np.float64).reshape(1, n)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got {self.A.shape}")
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.D != 0.0:
            raise ValueError("D is fixed at 0")


@dataclass
class DiscreteSsm:
    A_bar: np.ndarray
    B_bar: np.ndarray
    C: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.A_bar.shape[0]


def hippo_legs(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Return the HiPPO-LegS pair ``(A, B)`` with the sign convention ``A = -A_legs``.

    >>> hippo_legs(2)[0].round(7)
    array([[-1.       ,  0.       ],
           [-1.7320508, -2.       ]])
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    q = np.sqrt(2.0 * np.arange(N) + 1.0)
    A = np.tril(np.outer(q, q), k=-1) + np.diag(np.arange(N) + 1.0)
    return -A, q.copy()


def hippo_init(
    N: int,
    channels: int = 1,
    rng: np.random.Generator | None = None,
    dt_min: float = 1e-3,
    dt_max: float = 1e-1,
) -> dict[str, np.ndarray]:
    """Initial per-channel SSM parameters.

    Every channel starts from the same LegS ``A`` and ``B``; ``C`` is standard
    normal and ``delta`` is log-uniform in ``[dt_min, dt_max]``.

    Returns:
        dict with ``A`` (channels, N, N), ``B`` (channels, N), ``C`` (channels, N)
        and ``delta`` (channels,).
    """
    rng = np.random.default_rng() if rng is None else rng
    A, B = hippo_legs(N)
    C = rng.standard_normal((channels, N))
    delta = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=channels))
    return {
        "A": np.broadcast_to(A, (channels, N, N)).copy(),
        "B": np.broadcast_to(B, (channels, N)).copy(),
        "C": C,
        "delta": delta,
    }


def discretize(params: SsmParameters) -> DiscreteSsm:
    """Bilinear (Tustin) transform of a continuous SSM."""
    N = params.A.shape[0]
    eye = np.eye(N)
    left = eye - params.delta / 2.0 * params.A
    if np.linalg.cond(left) > 1e12:
        raise SingularDiscretizationError("I - delta/2 * A is numerically singular")
    A_bar = np.linalg.solve(left, eye + params.delta / 2.0 * params.A)
    B_bar = np.linalg.solve(left, params.delta * params.B)
    return DiscreteSsm(A_bar=A_bar, B_bar=B_bar, C=params.C.copy())


def scan(ssm: DiscreteSsm, u) -> np.ndarray:
    """Unroll ``x_k = A_bar x_{k-1} + B_bar u_k, y_k = C x_k`` from ``x = 0``."""
    u = np.asarray(u, dtype=np.float64)
    x = np.zeros((ssm.state_dim, 1))
    y = np.empty(len(u))
    for k, uk in enumerate(u):
        x = ssm.A_bar @ x + ssm.B_bar * uk
        y[k] = (ssm.C @ x).item()
    return y


def kernel(ssm: DiscreteSsm, L: int) -> np.ndarray:
    """Convolution kernel ``(C B_bar, C A_bar B_bar, ..., C A_bar^{L-1} B_bar)``."""
    if L < 1:
        raise ValueError("L must be >= 1")
    out = np.empty(L)
    v = ssm.B_bar
    for j in range(L):
        out[j] = (ssm.C @ v).item()
        v = ssm.A_bar @ v
    return out


def causal_convolve(k, u, method: str = "direct") -> np.ndarray:
    """``y[n] = sum_{j <= n} k[j] u[n - j]`` for equal-length ``k`` and ``u``.

    ``method="fft"`` multiplies zero-padded spectra of length ``2L``.
    """
    k = np.asarray(k, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if k.shape != u.shape or k.ndim != 1:
        raise ValueError(f"kernel and input lengths differ: {k.shape} vs {u.shape}")
    L = len(u)
    if method == "direct":
        return np.convolve(k, u)[:L]
    if method == "fft":
        n = 2 * L
        return np.fft.irfft(np.fft.rfft(k, n) * np.fft.rfft(u, n), n)[:L]
    raise ValueError(f"unknown method {method!r}")


# -- batched, differentiable versions ---------------------------------------


def discretize_torch(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor):
    """Batched bilinear transform.

    Args:
        A: (H, N, N) state matrices.
        B: (H, N) input maps.
        delta: (H,) positive step sizes.

    Returns:
        ``(A_bar, B_bar)`` with shapes (H, N, N) and (H, N).
    """
    N = A.shape[-1]
    eye = torch.eye(N, dtype=A.dtype, device=A.device)
    half = (delta / 2.0)[:, None, None]
    left = eye - half * A
    A_bar = torch.linalg.solve(left, eye + half * A)
    B_bar = torch.linalg.solve(left, (delta[:, None] * B).unsqueeze(-1)).squeeze(-1)
    return A_bar, B_bar


def kernel_torch(A_bar: torch.Tensor, B_bar: torch.Tensor, C: torch.Tensor, L: int) -> torch.Tensor:
    """Kernel of length ``L`` for each channel, (H, L).

    Powers of ``A_bar`` are built by repeated squaring: the block of Krylov
    vectors ``[B, AB, ..., A^{m-1}B]`` is extended by ``A^m`` times itself, so
    only ``log2(L)`` matrix products are recorded for autograd.
    """
    V = B_bar.unsqueeze(-1)  # (H, N, 1)
    P = A_bar
    while V.shape[-1] < L:
        V = torch.cat([V, P @ V], dim=-1)
        if V.shape[-1] < L:
            P = P @ P
    return torch.einsum("hn,hnl->hl", C, V[..., :L])


def fft_causal_conv(u: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    """Causal convolution along the last axis; ``u`` (..., H, L), ``k`` (H, L)."""
    L = u.shape[-1]
    n = 2 * L
    y = torch.fft.irfft(torch.fft.rfft(u, n=n) * torch.fft.rfft(k, n=n), n=n)
    return y[..., :L]


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))
