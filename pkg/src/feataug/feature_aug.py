"""Feature-space augmentation operators and the FIFO feature bank."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feataug import autodiff as ad
from feataug.autodiff import Tensor

METHODS = ("none", "mask", "nn", "nn_noise", "batch_noise", "gaussian_noise")


class BankNotReady(RuntimeError):
    pass


@dataclass(frozen=True)
class FaConfig:
    method: str = "none"
    k: int = 1
    mask_rate: float = 0.2
    alpha: float = 0.85
    gaussian_sigma: float = 0.2
    bank_capacity: int = 4096

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown FA method {self.method!r}; choose from {METHODS}")
        if not 0 < self.mask_rate < 1:
            raise ValueError("mask_rate must lie in (0, 1)")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.k < 0:
            raise ValueError("k must be >= 0")
        if self.method != "none" and self.k < 1:
            raise ValueError("an FA method needs k >= 1")
        if self.gaussian_sigma < 0 or self.bank_capacity < 1:
            raise ValueError("gaussian_sigma must be >= 0 and bank_capacity >= 1")

    @property
    def enabled(self) -> bool:
        return self.method != "none" and self.k > 0

    @property
    def needs_bank(self) -> bool:
        return self.method in ("nn", "nn_noise")


class FeatureBank:
    """Fixed-capacity ring buffer of unit-norm feature rows.

    Rows are written at ``cursor``, which wraps around, so once full the
    oldest rows are overwritten first.
    """

    def __init__(self, capacity: int, dim: int, dtype=None):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be positive")
        self.capacity = capacity
        self.dim = dim
        self.storage = np.zeros((capacity, dim), dtype=dtype or ad.get_dtype())
        self.cursor = 0
        self.fill = 0

    def push(self, batch) -> None:
        rows = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"bank expects rows of width {self.dim}, got {rows.shape}")
        norm = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
        rows = (rows / np.maximum(norm, 1e-12)).astype(self.storage.dtype)
        # only the last `capacity` rows can survive the push
        if len(rows) > self.capacity:
            skipped = len(rows) - self.capacity
            self.cursor = (self.cursor + skipped) % self.capacity
            self.fill = min(self.capacity, self.fill + skipped)
            rows = rows[skipped:]
        n = len(rows)
        end = self.cursor + n
        if end <= self.capacity:
            self.storage[self.cursor : end] = rows
        else:
            head = self.capacity - self.cursor
            self.storage[self.cursor :] = rows[:head]
            self.storage[: n - head] = rows[head:]
        self.cursor = end % self.capacity
        self.fill = min(self.capacity, self.fill + n)

    def contents(self) -> np.ndarray:
        """Stored rows from oldest to newest."""
        if self.fill < self.capacity:
            return self.storage[: self.fill].copy()
        return np.concatenate([self.storage[self.cursor :], self.storage[: self.cursor]])

    def topk_indices(self, query, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Storage indices and cosine similarities of the ``k`` best rows per query."""
        q = query.data if isinstance(query, Tensor) else np.asarray(query)
        if q.ndim != 2 or q.shape[1] != self.dim:
            raise ValueError(f"query must be b*{self.dim}, got {q.shape}")
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.fill < k:
            raise BankNotReady(
                f"feature bank holds {self.fill} rows but {k} neighbours were requested; "
                "warm the bank up by pushing features before querying"
            )
        qn = q / np.maximum(np.sqrt((q * q).sum(axis=1, keepdims=True)), 1e-12)
        sims = qn.astype(self.storage.dtype) @ self.storage[: self.fill].T
        # candidates are everything at or above the k-th largest value; sorting
        # them by (row, -sim, index) keeps the lower storage index first on ties
        kth = np.partition(sims, self.fill - k, axis=1)[:, self.fill - k]
        rows, cols = np.nonzero(sims >= kth[:, None])
        key = np.lexsort((cols, -sims[rows, cols], rows))
        rows, cols = rows[key], cols[key]
        starts = np.searchsorted(rows, np.arange(len(sims)))
        order = cols[starts[:, None] + np.arange(k)]
        return order, np.take_along_axis(sims, order, axis=1)

    def topk(self, query, k: int) -> np.ndarray:
        """``b x k x d`` array of the nearest stored rows, most similar first."""
        idx, _ = self.topk_indices(query, k)
        return self.storage[idx]


def fa_mask(z: Tensor, rate: float, k: int, rng: np.random.Generator) -> list[Tensor]:
    """Zero exactly ``round(rate * d)`` random coordinates per row, per copy."""
    z = ad.as_tensor(z)
    b, d = z.shape
    n_zero = int(round(rate * d))
    if n_zero in (0, d):
        raise ValueError(f"mask rate {rate} zeroes {n_zero} of {d} coordinates; need 0 < count < d")
    out = []
    for _ in range(k):
        keys = rng.random((b, d))
        dropped = np.argpartition(keys, n_zero - 1, axis=1)[:, :n_zero]
        mask = np.ones((b, d), dtype=z.data.dtype)
        np.put_along_axis(mask, dropped, 0, axis=1)
        out.append(ad.mul(z, ad.constant(mask)))
    return out


def mixup(f: Tensor, noise: Tensor, lam) -> Tensor:
    """Row-wise ``lam * f + (1 - lam) * noise`` with one ``lam`` per row."""
    f = ad.as_tensor(f)
    lam = np.asarray(lam, dtype=f.data.dtype).reshape(-1, 1)
    lam_full = np.broadcast_to(lam, f.shape).copy()
    return ad.add(ad.mul(f, ad.constant(lam_full)), ad.mul(noise, ad.constant(1 - lam_full)))


def _noise_source(
    f: Tensor, kind: str, cfg: FaConfig, bank: FeatureBank | None, rng: np.random.Generator
) -> list[Tensor]:
    b, d = f.shape
    k = cfg.k
    if kind == "nn":
        if bank is None:
            raise BankNotReady("NN noise needs a feature bank")
        nbrs = bank.topk(f, k)
        return [ad.constant(nbrs[:, j]) for j in range(k)]
    if kind == "batch":
        if b < 2:
            raise ValueError("batch noise needs a batch of at least 2 rows")
        out = []
        for _ in range(k):
            idx = rng.integers(0, b - 1, size=b)
            idx += idx >= np.arange(b)
            out.append(ad.take_rows(f, idx))
        return out
    if kind == "gaussian":
        return [ad.constant(rng.normal(0.0, cfg.gaussian_sigma, size=(b, d))) for _ in range(k)]
    raise ValueError(f"unknown noise kind {kind!r}")


def fa_mixup(
    z: Tensor,
    noise_kind: str,
    cfg: FaConfig,
    bank: FeatureBank | None,
    rng: np.random.Generator,
    *,
    return_info: bool = False,
):
    """Interpolate each row towards a noise feature with ``lam ~ U(alpha, 1)``.

    With ``return_info`` also returns, per copy, the ``(lam, noise)`` arrays
    that were used.
    """
    z = ad.as_tensor(z)
    noises = _noise_source(z, noise_kind, cfg, bank, rng)
    outs, info = [], []
    for n in noises:
        lam = rng.uniform(cfg.alpha, 1.0, size=z.shape[0])
        outs.append(mixup(z, n, lam))
        info.append((lam, n.data))
    return (outs, info) if return_info else outs


def fa_nn(z: Tensor, bank: FeatureBank, k: int) -> list[Tensor]:
    nbrs = bank.topk(z, k)
    return [ad.constant(nbrs[:, j]) for j in range(k)]


def apply_fa(
    cfg: FaConfig,
    z: Tensor,
    bank: FeatureBank | None,
    rng: np.random.Generator,
    *,
    differentiable: bool = False,
) -> list[Tensor]:
    """Produce ``cfg.k`` augmented copies of ``z``.

    Outputs are detached unless ``differentiable`` is set, in which case mask
    and mixup stay on the graph; NN results are constants either way.
    """
    if not cfg.enabled:
        return []
    z = ad.as_tensor(z)
    if not differentiable:
        z = ad.stop_gradient(z)
    m = cfg.method
    if m == "mask":
        return fa_mask(z, cfg.mask_rate, cfg.k, rng)
    if m == "nn":
        if bank is None:
            raise BankNotReady("NN augmentation needs a feature bank")
        return fa_nn(z, bank, cfg.k)
    kind = {"nn_noise": "nn", "batch_noise": "batch", "gaussian_noise": "gaussian"}[m]
    return fa_mixup(z, kind, cfg, bank, rng)
