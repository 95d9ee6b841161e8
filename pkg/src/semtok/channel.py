"""Non-trainable channel between encoder and decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ContractError, make_rng

KINDS = ("ideal", "awgn", "drop")
NOISE_MODES = ("exact", "fixed-sigma")


class DegenerateSignalError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    kind: str = "ideal"
    snr_db: float = math.inf
    p_d: float = 0.0
    seed: int = 0
    noise_mode: str = "exact"
    drop_class_token: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown channel kind {self.kind!r}")
        if not 0.0 <= self.p_d <= 1.0:
            raise ContractError(f"drop probability {self.p_d} outside [0, 1]")
        if self.noise_mode not in NOISE_MODES:
            raise ContractError(f"unknown noise mode {self.noise_mode!r}")

    @classmethod
    def ideal(cls):
        return cls()

    @classmethod
    def awgn(cls, snr_db, seed=0, noise_mode="exact"):
        return cls("awgn", snr_db=float(snr_db), seed=seed, noise_mode=noise_mode)

    @classmethod
    def drop(cls, p_d, seed=0, drop_class_token=False):
        return cls("drop", p_d=float(p_d), seed=seed, drop_class_token=drop_class_token)


def realized_snr_db(h, n):
    """10 log10(||h||^2 / ||n||^2); +inf when the noise is zero."""
    h = np.asarray(getattr(h, "data", h))
    n = np.asarray(getattr(n, "data", n))
    pn = float(np.sum(n * n))
    if pn == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.sum(h * h)) / pn)


def noise_for(h, snr_db, rng, noise_mode="exact"):
    """Noise array for signal ``h`` (numpy) at the requested SNR.

    ``exact`` rescales an i.i.d. standard normal draw so the realized SNR is
    the target. ``fixed-sigma`` uses per-component variance
    mean(h^2) * 10^(-snr/10), so only the expected SNR is the target.
    """
    ph = float(np.sum(h * h))
    if ph == 0.0:
        raise DegenerateSignalError("zero-power signal has no defined SNR")
    n0 = rng.standard_normal(h.shape)
    if noise_mode == "exact":
        pn0 = float(np.sum(n0 * n0))
        return n0 * math.sqrt(ph / (pn0 * 10.0 ** (snr_db / 10.0)))
    sigma2 = ph / h.size * 10.0 ** (-snr_db / 10.0)
    return n0 * math.sqrt(sigma2)


def awgn(h, snr_db, rng, noise_mode="exact"):
    """h + n. The noise is a constant: gradients reach ``h`` unchanged."""
    if math.isinf(snr_db) and snr_db > 0:
        return h
    n = noise_for(h.data, snr_db, rng, noise_mode)
    return T.add(h, T.constant(n))


def drop_decisions(n, p_d, rng):
    """Kill flags for ``n`` original rows; one uniform per row, always drawn."""
    return rng.random(n) < p_d


def packet_drop(h, positions, n, p_d, rng, drop_class_token=False):
    """Remove transmitted patch rows independently with probability ``p_d``.

    ``h`` holds the class row followed by the patch rows at ``positions``.
    Returns (h', surviving positions). A lost class row is zeroed rather
    than removed, since the decoder always needs one.
    """
    if not 0.0 <= p_d <= 1.0:
        raise ContractError(f"drop probability {p_d} outside [0, 1]")
    killed = drop_decisions(n, p_d, rng)
    cls_lost = bool(rng.random() < p_d) if drop_class_token else False
    keep = ~killed[positions]
    rows = np.concatenate([[0], 1 + np.flatnonzero(keep)])
    out = T.gather_rows(h, rows)
    if cls_lost:
        mask = np.zeros(len(rows), dtype=bool)
        mask[0] = True
        out = T.select_rows(mask, T.constant(np.zeros(out.shape)), out)
    return out, positions[keep]


def transmit(h, positions, n, spec, rng=None):
    """Send the class+patch rows ``h`` through the channel described by ``spec``."""
    if spec.kind == "ideal":
        return h, positions
    if rng is None:
        rng = make_rng(spec.seed)
    if spec.kind == "awgn":
        return awgn(h, spec.snr_db, rng, spec.noise_mode), positions
    return packet_drop(h, positions, n, spec.p_d, rng, spec.drop_class_token)
