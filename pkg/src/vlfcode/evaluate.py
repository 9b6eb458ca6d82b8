"""Monte-Carlo evaluation: error rates, threshold/SNR sweeps, encoding dynamics.

Everything here is inference-only and deterministic in the master seed:
sessions are generated in chunks, each chunk keyed by its own spawned
substream, so results are independent of chunk size boundaries only up to
the documented chunking (the same seed + same chunk_size is byte-stable).
"""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from numpy.typing import NDArray
from scipy.stats import beta

from .channels import ChannelConfig, NoiseSource
from .codec import FeedbackCodec
from .errors import ConfigurationError
from .message import index_to_group
from .protocol import run_batch, run_rollout
from .training import compute_tau_plus, mu_schedule

OPERATING_POINT_SCHEMA = "vlf-operating-point-v1"
OPERATING_POINT_COLUMNS = (
    "variant",
    "eta_f_db",
    "eta_b_db",
    "threshold",
    "n_sessions",
    "bler",
    "bler_lo",
    "bler_hi",
    "mean_rate",
    "mean_tau",
    "mean_power",
)
DYNAMICS_SCHEMA = "vlf-dynamics-v1"
DYNAMICS_COLUMNS = ("round", "pattern_index", "sample_value")

_Z95 = 1.959963984540054  # two-sided 95% normal quantile, for mean-rate intervals


# --------------------------------------------------------------------------
# Confidence intervals
# --------------------------------------------------------------------------


def clopper_pearson(k: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    """Exact binomial interval on a proportion; valid at zero/any error count."""
    if n < 1 or not 0 <= k <= n:
        raise ConfigurationError(f"need 0 <= k <= n with n >= 1, got k={k}, n={n}")
    if not 0.0 < confidence < 1.0:
        raise ConfigurationError(f"confidence must be in (0, 1), got {confidence}")
    alpha = 1.0 - confidence
    lo = 0.0 if k == 0 else float(beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def intervals_overlap(a: tuple[float, float], b: tuple[float, float]) -> bool:
    """Closed-interval overlap test."""
    return a[0] <= b[1] and b[0] <= a[1]


# --------------------------------------------------------------------------
# Operating-point evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OperatingPointResult:
    """Aggregate statistics of N independent sessions at one operating point."""

    variant: str
    eta_f_db: float
    eta_b_db: float
    gamma: float | None
    gamma_t: float | None
    tau_max: int
    first_decode_round: int
    n_sessions: int
    n_errors: int
    bler: float
    bler_lo: float
    bler_hi: float
    mean_rate: float
    rate_se: float
    mean_differential_rate: float
    mean_tau: float
    mean_channel_uses: float
    mean_power: float
    termination_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_sessions < 1:
            raise ConfigurationError(f"n_sessions must be >= 1, got {self.n_sessions}")
        if not 0.0 <= self.bler <= 1.0:
            raise ConfigurationError(f"bler outside [0, 1]: {self.bler}")
        if not self.bler_lo <= self.bler <= self.bler_hi:
            raise ConfigurationError("bler outside its confidence interval")
        if sum(self.termination_counts.values()) != self.n_sessions:
            raise ConfigurationError("termination counts do not sum to n_sessions")

    @property
    def threshold(self) -> float:
        """The stopping threshold this point ran at (receiver side wins for hybrid)."""
        thr = self.gamma_t if self.variant == "T" else self.gamma
        return float("nan") if thr is None else thr

    def bler_interval(self) -> tuple[float, float]:
        return (self.bler_lo, self.bler_hi)

    def rate_interval(self) -> tuple[float, float]:
        """Normal-approximation 95% interval on the mean rate."""
        return (self.mean_rate - _Z95 * self.rate_se, self.mean_rate + _Z95 * self.rate_se)


def resolve_first_decode_round(
    variant: str,
    eta_f_db: float,
    m: int,
    tau_max: int,
    gamma: float | None = None,
    *,
    snr_in_db: bool = False,
) -> int:
    """First round the decoder may freeze groups, from the operating point."""
    mu = mu_schedule(variant, gamma if variant != "T" else None)
    return min(tau_max, compute_tau_plus(eta_f_db, m, mu, snr_in_db=snr_in_db))


def evaluate_operating_point(
    codec: FeedbackCodec,
    chan: ChannelConfig,
    *,
    variant: str,
    n_sessions: int,
    seed: int | NoiseSource = 0,
    gamma: float | None = None,
    gamma_t: float | None = None,
    tau_max: int | None = None,
    first_decode_round: int | str = "auto",
    chunk_size: int = 2048,
) -> OperatingPointResult:
    """Run ``n_sessions`` independent sessions and aggregate their statistics.

    Blocks are uniform random; BLER carries an exact 95% Clopper-Pearson
    interval; ``first_decode_round="auto"`` derives the earliest decode round
    from the channel SNR and the threshold's minimum-round schedule.
    """
    if n_sessions < 1:
        raise ConfigurationError(f"n_sessions must be >= 1, got {n_sessions}")
    if chunk_size < 1:
        raise ConfigurationError(f"chunk_size must be >= 1, got {chunk_size}")
    cfg = codec.cfg
    tau_eff = cfg.tau_max if tau_max is None else int(tau_max)
    if first_decode_round == "auto":
        fdr = resolve_first_decode_round(variant, chan.eta_f_db, cfg.m, tau_eff, gamma)
    else:
        fdr = int(first_decode_round)

    master = seed if isinstance(seed, NoiseSource) else NoiseSource(seed)
    bits_src, noise_parent = master.spawn(2)
    n_chunks = -(-n_sessions // chunk_size)
    chunk_noise = noise_parent.spawn(n_chunks)

    n_errors = 0
    rate_sum = rate_sq_sum = 0.0
    diff_rate_sum = 0.0
    tau_sum = 0.0
    uses_sum = 0.0
    power_sum = 0.0
    power_count = 0
    term_counts: dict[str, int] = {}

    done = 0
    for child in chunk_noise:
        nb = min(chunk_size, n_sessions - done)
        bits = bits_src.bits(nb, cfg.K).numpy().astype(np.uint8)
        bt = run_batch(
            codec,
            bits,
            chan,
            variant=variant,
            seed=child,
            gamma=gamma,
            gamma_t=gamma_t,
            tau_max=tau_eff,
            first_decode_round=fdr,
        )
        n_errors += int(bt.errors.sum())
        uses = bt.total_channel_uses().astype(np.float64)
        rates = cfg.K / uses
        rate_sum += float(rates.sum())
        rate_sq_sum += float((rates**2).sum())
        diff_rate_sum += float((rates - cfg.K / (bt.stop_round * cfg.Q)).sum())
        tau_sum += float(bt.stop_round.sum())
        uses_sum += float(uses.sum())
        power_sum += bt.power_sum
        power_count += bt.power_count
        causes, counts = np.unique(bt.termination, return_counts=True)
        for cause, count in zip(causes, counts):
            term_counts[str(cause)] = term_counts.get(str(cause), 0) + int(count)
        done += nb

    bler = n_errors / n_sessions
    lo, hi = clopper_pearson(n_errors, n_sessions)
    mean_rate = rate_sum / n_sessions
    rate_var = max(rate_sq_sum / n_sessions - mean_rate**2, 0.0)
    return OperatingPointResult(
        variant=variant,
        eta_f_db=chan.eta_f_db,
        eta_b_db=chan.eta_b_db,
        gamma=gamma,
        gamma_t=gamma_t,
        tau_max=tau_eff,
        first_decode_round=fdr,
        n_sessions=n_sessions,
        n_errors=n_errors,
        bler=bler,
        bler_lo=lo,
        bler_hi=hi,
        mean_rate=mean_rate,
        rate_se=(rate_var / n_sessions) ** 0.5,
        mean_differential_rate=diff_rate_sum / n_sessions,
        mean_tau=tau_sum / n_sessions,
        mean_channel_uses=uses_sum / n_sessions,
        mean_power=power_sum / max(power_count, 1),
        termination_counts=term_counts,
    )


def sweep(
    codec: FeedbackCodec,
    chan: ChannelConfig,
    *,
    variant: str,
    n_sessions: int,
    seed: int = 0,
    gamma_list: Sequence[float] | None = None,
    eta_f_grid: Sequence[float] | None = None,
    gamma: float | None = None,
    gamma_t: float | None = None,
    tau_max: int | None = None,
    first_decode_round: int | str = "auto",
    chunk_size: int = 2048,
) -> list[OperatingPointResult]:
    """Evaluate one axis of operating points with independent per-point seeds.

    Exactly one of ``gamma_list`` (receiver-threshold axis) or ``eta_f_grid``
    (forward-SNR axis) must be given and non-empty.
    """
    if (gamma_list is None) == (eta_f_grid is None):
        raise ConfigurationError("exactly one sweep axis required: gamma_list or eta_f_grid")
    if gamma_list is not None and gamma is not None:
        raise ConfigurationError("gamma_list sweep conflicts with a fixed gamma")
    values = [float(v) for v in (gamma_list if gamma_list is not None else eta_f_grid)]
    if not values:
        raise ConfigurationError("sweep axis is empty")

    children = NoiseSource(seed).spawn(len(values))
    results = []
    for value, child in zip(values, children):
        point_gamma = value if gamma_list is not None else gamma
        point_chan = chan if gamma_list is not None else replace(chan, eta_f_db=value)
        results.append(
            evaluate_operating_point(
                codec,
                point_chan,
                variant=variant,
                n_sessions=n_sessions,
                seed=child,
                gamma=point_gamma,
                gamma_t=gamma_t,
                tau_max=tau_max,
                first_decode_round=first_decode_round,
                chunk_size=chunk_size,
            )
        )
    return results


def check_confidence_overlap(a: OperatingPointResult, b: OperatingPointResult) -> bool:
    """Do two evaluations of one operating point agree (BLER intervals overlap)?"""
    return intervals_overlap(a.bler_interval(), b.bler_interval())


def monotone_up_to_overlap(
    values: Sequence[float], intervals: Sequence[tuple[float, float]]
) -> bool:
    """Is the sequence non-increasing wherever consecutive intervals separate?

    An increase between adjacent points only counts against monotonicity when
    their uncertainty intervals are disjoint.
    """
    if len(values) != len(intervals):
        raise ConfigurationError("values and intervals must align")
    for i in range(len(values) - 1):
        if values[i + 1] > values[i] and not intervals_overlap(intervals[i], intervals[i + 1]):
            return False
    return True


# --------------------------------------------------------------------------
# Encoding-dynamics experiment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelDensitySummary:
    """Gaussian-kernel densities per pattern on a shared grid (plotting aid)."""

    grid: NDArray[np.float64]  # (n_grid,)
    density: NDArray[np.float64]  # (n_patterns, n_grid)
    bandwidth: float


@dataclass(frozen=True)
class DynamicsResult:
    """Per-round, per-pattern samples of the first group's transmit symbol."""

    n_patterns: int
    n_trials: int
    rounds: tuple[int, ...]
    samples: dict[int, NDArray[np.float64]]  # round -> (n_patterns, n_trials)
    separation: dict[int, float]  # round -> between/within variance ratio
    densities: dict[int, KernelDensitySummary | None]

    def __post_init__(self) -> None:
        for rd, arr in self.samples.items():
            if arr.shape != (self.n_patterns, self.n_trials):
                raise ConfigurationError(
                    f"round {rd} samples shaped {arr.shape}, "
                    f"expected {(self.n_patterns, self.n_trials)}"
                )


def separation_statistic(samples: NDArray[np.float64]) -> float:
    """Between-pattern variance of per-pattern means over pooled within variance.

    0 when every pattern behaves identically; infinite when patterns separate
    with zero spread (a deterministic first round).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ConfigurationError(f"samples must be 2-D (patterns, trials), got {samples.ndim}-D")
    between = float(samples.mean(axis=1).var())
    within = float(samples.var(axis=1).mean())
    if between == 0.0:
        return 0.0
    if within == 0.0:
        return float("inf")
    return between / within


def silverman_bandwidth(pooled: NDArray[np.float64]) -> float:
    """Rule-of-thumb Gaussian kernel width for 1-D data."""
    pooled = np.asarray(pooled, dtype=np.float64)
    if pooled.size < 2:
        return 0.0
    return float(pooled.std() * (4.0 / (3.0 * pooled.size)) ** 0.2)


def _kde_summary(samples: NDArray[np.float64], n_grid: int = 129) -> KernelDensitySummary | None:
    """Fixed-bandwidth per-pattern densities; None when the data is degenerate.

    The bandwidth comes from the pooled samples so the per-pattern curves are
    comparable, which also keeps single-valued patterns (zero spread within a
    pattern) well-defined.
    """
    pooled = samples.reshape(-1)
    h = silverman_bandwidth(pooled)
    if h <= 0.0 or not np.isfinite(h):
        return None
    grid = np.linspace(pooled.min() - 3.0 * h, pooled.max() + 3.0 * h, n_grid)
    density = np.empty((samples.shape[0], n_grid))
    norm = 1.0 / (h * np.sqrt(2.0 * np.pi))
    for v in range(samples.shape[0]):
        z = (grid[None, :] - samples[v][:, None]) / h
        density[v] = norm * np.exp(-0.5 * z**2).mean(axis=0)
    return KernelDensitySummary(grid=grid, density=density, bandwidth=h)


def dynamics_experiment(
    codec: FeedbackCodec,
    chan: ChannelConfig,
    *,
    rounds: Sequence[int] = (1, 2, 4, 6),
    n_trials: int = 10_000,
    seed: int = 0,
    chunk_size: int = 1024,
) -> DynamicsResult:
    """Probe how the first group's symbol depends on its bits, round by round.

    Each trial fixes one noise realization and one draw of groups 2..Q, then
    replays the session once per pattern of group 1 with byte-identical noise,
    recording the group-1 transmit symbol at the requested rounds. Stopping is
    disabled so every round is observed.
    """
    cfg = codec.cfg
    want = tuple(sorted({int(r) for r in rounds}))
    if not want:
        raise ConfigurationError("rounds must be non-empty")
    if want[0] < 1 or want[-1] > cfg.tau_max:
        raise ConfigurationError(f"rounds must lie in [1, {cfg.tau_max}], got {want}")
    if n_trials < 1:
        raise ConfigurationError(f"n_trials must be >= 1, got {n_trials}")
    horizon = want[-1]
    n_patterns = cfg.n_patterns

    master = np.random.SeedSequence(seed)
    bits_ss, noise_ss = master.spawn(2)
    bits_rng = np.random.default_rng(bits_ss)
    n_chunks = -(-n_trials // chunk_size)
    chunk_keys = noise_ss.spawn(n_chunks)

    samples = {rd: np.empty((n_patterns, n_trials)) for rd in want}
    done = 0
    for key in chunk_keys:
        nb = min(chunk_size, n_trials - done)
        base_bits = bits_rng.integers(0, 2, size=(nb, cfg.K), dtype=np.uint8)
        for v in range(n_patterns):
            bits_v = base_bits.copy()
            bits_v[:, : cfg.m] = index_to_group(v, cfg.m)
            # Fresh SeedSequence per pattern: spawning inside the rollout is
            # stateful, so replaying the same noise needs a rebuilt key.
            noise = NoiseSource(np.random.SeedSequence(entropy=key.entropy, spawn_key=key.spawn_key))
            with torch.no_grad():
                r = run_rollout(
                    codec,
                    bits_v,
                    chan,
                    variant="R",
                    noise=noise,
                    gamma=None,
                    tau_max=horizon,
                    mode="infer",
                )
            for rd in want:
                samples[rd][v, done : done + nb] = r.x_history[:, rd - 1, 0].numpy()
        done += nb

    separation = {rd: separation_statistic(samples[rd]) for rd in want}
    densities = {rd: _kde_summary(samples[rd]) for rd in want}
    return DynamicsResult(
        n_patterns=n_patterns,
        n_trials=n_trials,
        rounds=want,
        samples=samples,
        separation=separation,
        densities=densities,
    )


# --------------------------------------------------------------------------
# CSV emission / read-back
# --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{float(x):.9g}"


def emit_results(results: Sequence[OperatingPointResult], path: str | Path) -> None:
    """Write the operating-point table; header always present, floats at 9 digits."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={OPERATING_POINT_SCHEMA}\n")
        writer = csv.writer(fh)
        writer.writerow(OPERATING_POINT_COLUMNS)
        for r in results:
            writer.writerow(
                [
                    r.variant,
                    _fmt(r.eta_f_db),
                    _fmt(r.eta_b_db),
                    _fmt(r.threshold),
                    r.n_sessions,
                    _fmt(r.bler),
                    _fmt(r.bler_lo),
                    _fmt(r.bler_hi),
                    _fmt(r.mean_rate),
                    _fmt(r.mean_tau),
                    _fmt(r.mean_power),
                ]
            )


def emit_dynamics(result: DynamicsResult, path: str | Path) -> None:
    """Write every dynamics sample as (round, pattern_index, sample_value) rows."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={DYNAMICS_SCHEMA}\n")
        fh.write(f"# n_trials={result.n_trials}\n")
        writer = csv.writer(fh)
        writer.writerow(DYNAMICS_COLUMNS)
        for rd in result.rounds:
            block = result.samples[rd]
            for v in range(result.n_patterns):
                for value in block[v]:
                    writer.writerow([rd, v, _fmt(value)])


def _read_csv(path: str | Path, schema: str, columns: tuple[str, ...]) -> list[list[str]]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != f"# schema={schema}":
            raise ConfigurationError(f"{path}: expected '# schema={schema}', got {first!r}")
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or tuple(rows[0]) != columns:
        raise ConfigurationError(f"{path}: header mismatch, expected {columns}")
    return rows[1:]


def read_results_csv(path: str | Path) -> list[dict[str, float | int | str]]:
    """Parse an operating-point table back into typed row dicts."""
    out = []
    for row in _read_csv(path, OPERATING_POINT_SCHEMA, OPERATING_POINT_COLUMNS):
        rec: dict[str, float | int | str] = {"variant": row[0]}
        for name, cell in zip(OPERATING_POINT_COLUMNS[1:], row[1:]):
            rec[name] = int(cell) if name == "n_sessions" else float(cell)
        out.append(rec)
    return out


def read_dynamics_csv(path: str | Path) -> dict[str, NDArray]:
    """Parse a dynamics table into column arrays (round, pattern_index, sample_value)."""
    rows = _read_csv(path, DYNAMICS_SCHEMA, DYNAMICS_COLUMNS)
    if not rows:
        return {
            "round": np.empty(0, dtype=np.int64),
            "pattern_index": np.empty(0, dtype=np.int64),
            "sample_value": np.empty(0, dtype=np.float64),
        }
    arr = np.asarray(rows)
    return {
        "round": arr[:, 0].astype(np.int64),
        "pattern_index": arr[:, 1].astype(np.int64),
        "sample_value": arr[:, 2].astype(np.float64),
    }
