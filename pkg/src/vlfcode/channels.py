"""Channel models and seeded noise streams.

Forward link: unit-power real symbols over AWGN, or block-fading with
per-slot complex gains known at the receiver (zero-forcing equalization).
Feedback link: AWGN on scaled received symbols and, for transmitter-side
stopping, on a scaled copy of the belief matrix. Decoded-group indices ride
an error-free side channel and are not modeled here.

SNR convention: eta in dB with unit symbol power, so sigma^2 = 10^(-eta/10).
``NOISELESS`` (infinite dB) selects sigma^2 = 0 exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from numpy.typing import NDArray

from .errors import ConfigurationError, TrajectoryError

__all__ = [
    "NOISELESS",
    "NoiseSource",
    "ChannelConfig",
    "FadingTrajectory",
    "snr_to_sigma2",
    "feedback_scale",
    "belief_scale",
    "awgn_transmit",
    "feedback_transmit",
    "load_fading_trajectory",
    "write_fading_trajectory",
    "jakes_trajectory",
    "sample_fading_windows",
    "pack_symbol_pairs",
    "equalize",
    "fading_transmit",
]

NOISELESS = float("inf")

MIN_GAIN = 1e-6


def snr_to_sigma2(eta_db: float) -> float:
    """Noise variance for an SNR of ``eta_db`` dB at unit symbol power.

    10^(-eta/10); NOISELESS maps to exactly 0.
    """
    if math.isnan(eta_db):
        raise ConfigurationError("SNR is NaN")
    if eta_db == NOISELESS:
        return 0.0
    return 10.0 ** (-eta_db / 10.0)


def feedback_scale(sigma_b2: float) -> float:
    """Power-preserving scale sqrt(1/(1+sigma_b^2)) applied before feedback.

    The fed-back payload C_s*y + w then has unit power when y does.
    """
    if sigma_b2 < 0:
        raise ConfigurationError(f"feedback noise variance must be >= 0, got {sigma_b2}")
    return math.sqrt(1.0 / (1.0 + sigma_b2))


def belief_scale(m: int) -> float:
    """Power normalizer 2^m / sqrt(2^m - 1) for feeding back belief vectors.

    A probability vector has squared norm at most 1 and at least 1/2^m; this
    scale puts the per-entry power of the 2^m-entry vector at unit order.
    """
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    n = 2**m
    return n / math.sqrt(n - 1)


class NoiseSource:
    """Deterministic Gaussian/bit stream with spawnable substreams.

    Wraps a :class:`numpy.random.SeedSequence` to key a ``torch.Generator``;
    equal seeds give byte-identical draw sequences, and ``spawn()`` yields
    independent children (used for per-chunk and per-purpose streams).
    """

    def __init__(self, seed: int | np.random.SeedSequence):
        if isinstance(seed, np.random.SeedSequence):
            self._ss = seed
        else:
            self._ss = np.random.SeedSequence(int(seed))
        state = self._ss.generate_state(1, np.uint64)[0]
        self._gen = torch.Generator(device="cpu")
        self._gen.manual_seed(int(state) & (2**63 - 1))
        self.n_draws = 0

    def spawn(self, n: int) -> list["NoiseSource"]:
        return [NoiseSource(ss) for ss in self._ss.spawn(n)]

    def normal(self, *shape: int, std: float = 1.0, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """std * N(0, 1) tensor. ``std == 0`` still consumes the draw so call
        sequences stay aligned between noiseless and noisy runs."""
        self.n_draws += 1
        z = torch.randn(*shape, generator=self._gen, dtype=dtype)
        return z * std

    def bits(self, *shape: int) -> torch.Tensor:
        """Uniform {0, 1} int64 tensor."""
        self.n_draws += 1
        return torch.randint(0, 2, shape, generator=self._gen)

    def uniform(self, *shape: int, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        """Uniform [0, 1) tensor."""
        self.n_draws += 1
        return torch.rand(*shape, generator=self._gen, dtype=dtype)

    def integers(self, low: int, high: int, *shape: int) -> torch.Tensor:
        """Uniform integers in [low, high)."""
        self.n_draws += 1
        return torch.randint(low, high, shape, generator=self._gen)


def awgn_transmit(x: torch.Tensor, sigma2: float, noise: NoiseSource) -> torch.Tensor:
    """y = x + w, w ~ N(0, sigma2) i.i.d. per symbol.

    sigma2 == 0 returns x + 0 (bit-exact noiseless path); the Gaussian draw
    happens either way to keep replay sequences aligned.
    """
    if sigma2 < 0:
        raise ConfigurationError(f"noise variance must be >= 0, got {sigma2}")
    w = noise.normal(*x.shape, std=math.sqrt(sigma2), dtype=x.dtype)
    return x + w


def feedback_transmit(payload: torch.Tensor, sigma_b2: float, noise: NoiseSource) -> torch.Tensor:
    """AWGN feedback link: payload + N(0, sigma_b2), any payload shape."""
    if sigma_b2 < 0:
        raise ConfigurationError(f"noise variance must be >= 0, got {sigma_b2}")
    w = noise.normal(*payload.shape, std=math.sqrt(sigma_b2), dtype=payload.dtype)
    return payload + w


# --------------------------------------------------------------------------
# Block fading
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class FadingTrajectory:
    """Complex channel gains, one row per time slot, one column per subcarrier."""

    gains: NDArray[np.complex128]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        g = np.asarray(self.gains, dtype=np.complex128)
        if g.ndim != 2 or g.shape[0] < 1 or g.shape[1] < 1:
            raise TrajectoryError(f"gains must be (slots, subcarriers), got shape {g.shape}")
        mag = np.abs(g)
        if (mag < MIN_GAIN).any():
            slot, sub = np.argwhere(mag < MIN_GAIN)[0]
            raise TrajectoryError(
                f"gain at slot {slot}, subcarrier {sub} has magnitude "
                f"{mag[slot, sub]:.3g} < {MIN_GAIN}; zero-forcing would blow up"
            )
        object.__setattr__(self, "gains", g)

    @property
    def n_slots(self) -> int:
        return self.gains.shape[0]

    @property
    def n_subcarriers(self) -> int:
        return self.gains.shape[1]


def load_fading_trajectory(path: str) -> FadingTrajectory:
    """Read a trajectory file.

    Format: first line ``#slots=<n> subcarriers=<k>``, then n lines of k
    comma-separated ``re,im`` pairs separated by whitespace, e.g.::

        #slots=2 subcarriers=2
        0.7,0.1 -0.3,0.9
        1.1,0.0 0.2,-0.5

    Malformed records raise :class:`TrajectoryError` naming the line.
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise TrajectoryError(f"{path}: empty trajectory file")
    header = lines[0]
    if not header.startswith("#"):
        raise TrajectoryError(f"{path}: missing '#slots=... subcarriers=...' header")
    fields = dict(
        tok.split("=", 1) for tok in header.lstrip("#").split() if "=" in tok
    )
    try:
        n_slots = int(fields["slots"])
        n_sub = int(fields["subcarriers"])
    except (KeyError, ValueError) as exc:
        raise TrajectoryError(f"{path}: bad header {header!r}") from exc
    body = lines[1:]
    if len(body) != n_slots:
        raise TrajectoryError(f"{path}: header promises {n_slots} slots, file has {len(body)}")
    gains = np.empty((n_slots, n_sub), dtype=np.complex128)
    for i, ln in enumerate(body):
        toks = ln.split()
        if len(toks) != n_sub:
            raise TrajectoryError(f"{path}: line {i + 2} has {len(toks)} entries, expected {n_sub}")
        for j, tok in enumerate(toks):
            try:
                re_s, im_s = tok.split(",")
                gains[i, j] = complex(float(re_s), float(im_s))
            except ValueError as exc:
                raise TrajectoryError(f"{path}: line {i + 2}, entry {j + 1}: cannot parse {tok!r}") from exc
    try:
        return FadingTrajectory(gains=gains, metadata={"path": path})
    except TrajectoryError as exc:
        raise TrajectoryError(f"{path}: {exc}") from None


def write_fading_trajectory(path: str, traj: FadingTrajectory) -> None:
    """Inverse of :func:`load_fading_trajectory`."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"#slots={traj.n_slots} subcarriers={traj.n_subcarriers}\n")
        for row in traj.gains:
            fh.write(" ".join(f"{h.real:.17g},{h.imag:.17g}" for h in row) + "\n")


def jakes_trajectory(
    n_slots: int,
    n_subcarriers: int,
    *,
    doppler: float = 0.01,
    n_paths: int = 16,
    seed: int = 0,
) -> FadingTrajectory:
    """Synthetic correlated Rayleigh-like gains (sum-of-sinusoids approximation).

    ``doppler`` is the normalized Doppler frequency f_d*T_s controlling how
    fast gains decorrelate across slots. Gains are clipped away from zero at
    ``MIN_GAIN`` so trajectories stay equalizable. This is a test-and-demo
    generator, not a calibrated propagation model.
    """
    if n_slots < 1 or n_subcarriers < 1 or n_paths < 1:
        raise ConfigurationError("n_slots, n_subcarriers, n_paths must all be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    t = np.arange(n_slots)[:, None, None]  # (slots, 1, 1)
    theta = rng.uniform(0, 2 * np.pi, size=(1, n_subcarriers, n_paths))
    phi = rng.uniform(0, 2 * np.pi, size=(1, n_subcarriers, n_paths))
    psi = rng.uniform(0, 2 * np.pi, size=(1, n_subcarriers, n_paths))
    arg = 2 * np.pi * doppler * t * np.cos(theta)
    re = np.cos(arg + phi).sum(axis=2)
    im = np.sin(arg + psi).sum(axis=2)
    g = (re + 1j * im) / math.sqrt(n_paths)
    mag = np.abs(g)
    weak = mag < MIN_GAIN
    if weak.any():
        g = np.where(weak, MIN_GAIN * np.exp(1j * np.angle(g)), g)
    return FadingTrajectory(gains=g, metadata={"generator": "jakes", "doppler": str(doppler)})


def sample_fading_windows(
    traj: FadingTrajectory, tau_max: int, batch: int, noise: NoiseSource
) -> NDArray[np.complex128]:
    """Draw ``batch`` length-``tau_max`` slot windows with uniform start offsets.

    Windows wrap around the end of the trajectory. Returns (batch, tau_max,
    n_subcarriers).
    """
    if tau_max < 1:
        raise ConfigurationError(f"tau_max must be >= 1, got {tau_max}")
    starts = noise.integers(0, traj.n_slots, batch).numpy()
    idx = (starts[:, None] + np.arange(tau_max)[None, :]) % traj.n_slots
    return traj.gains[idx]


def pack_symbol_pairs(x: torch.Tensor) -> torch.Tensor:
    """Pack real symbols pairwise into complex subcarrier symbols.

    (..., Q) real -> (..., ceil(Q/2)) complex, entry s = x_{2k} + i x_{2k+1};
    an odd trailing symbol is padded with an imaginary zero.
    """
    q = x.shape[-1]
    if q % 2:
        pad = torch.zeros(*x.shape[:-1], 1, dtype=x.dtype)
        x = torch.cat([x, pad], dim=-1)
    re = x[..., 0::2]
    im = x[..., 1::2]
    return torch.complex(re, im)


def equalize(y: torch.Tensor, h: torch.Tensor, n_symbols: int) -> torch.Tensor:
    """Zero-forcing: divide by the known gain, unpack back to real symbols.

    y, h: (..., n_subcarriers) complex. Returns (..., n_symbols) real in the
    original pairwise order. Noise on a subcarrier with gain h comes out with
    variance sigma^2/|h|^2 per real component.
    """
    z = y / h
    out = torch.stack([z.real, z.imag], dim=-1).reshape(*z.shape[:-1], -1)
    return out[..., :n_symbols]


def fading_transmit(
    x: torch.Tensor,
    h_slot: torch.Tensor,
    sigma2: float,
    noise: NoiseSource,
) -> torch.Tensor:
    """One block-fading use: pack, apply gains, add complex AWGN, equalize.

    x: (..., Q) real symbols; h_slot: (..., ceil(Q/2)) complex gains for this
    slot. Complex noise has variance ``sigma2`` per real component, so with
    |h| = 1 this reduces to :func:`awgn_transmit` statistically. Returns the
    equalized real symbols, shape (..., Q).
    """
    if sigma2 < 0:
        raise ConfigurationError(f"noise variance must be >= 0, got {sigma2}")
    s = pack_symbol_pairs(x)
    if h_slot.shape != s.shape:
        raise ConfigurationError(f"gain shape {tuple(h_slot.shape)} != packed shape {tuple(s.shape)}")
    w = noise.normal(*s.shape, 2, std=math.sqrt(sigma2), dtype=x.dtype)
    y = s * h_slot + torch.complex(w[..., 0], w[..., 1])
    return equalize(y, h_slot, x.shape[-1])


@dataclass(frozen=True)
class ChannelConfig:
    """Operating point of the forward and feedback links.

    eta_f_db / eta_b_db: SNRs in dB (``NOISELESS`` for a perfect link).
    fading: optional gain trajectory; None selects plain AWGN forward.
    """

    eta_f_db: float
    eta_b_db: float = NOISELESS
    fading: FadingTrajectory | None = None

    def __post_init__(self) -> None:
        if math.isnan(self.eta_f_db) or math.isnan(self.eta_b_db):
            raise ConfigurationError("SNRs must not be NaN")
        if self.eta_f_db == NOISELESS and self.fading is None:
            # Allowed (degenerate), but the forward link then carries no noise
            # at all; sigma_f2 == 0 is handled exactly downstream.
            pass

    @property
    def sigma_f2(self) -> float:
        return snr_to_sigma2(self.eta_f_db)

    @property
    def sigma_b2(self) -> float:
        return snr_to_sigma2(self.eta_b_db)

    @property
    def noiseless_feedback(self) -> bool:
        return self.eta_b_db == NOISELESS
