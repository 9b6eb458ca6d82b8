"""Loss, curricula, optimization, and gradient verification.

The loss sums per-group cross-entropies over the decode window
[tau_plus, tau*_q], weighted geometrically by theta^(tau - c) so later
rounds dominate. tau_plus — the first round at which decoding is attempted —
comes from a channel-capacity heuristic floor'd by a per-threshold schedule.
Training runs two phases: a randomized (SNR, threshold) curriculum, then
fine-tuning at a fixed operating point.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import torch

from .channels import NOISELESS, ChannelConfig, NoiseSource
from .codec import CodecConfig, FeedbackCodec, build_codec, save_checkpoint
from .errors import ConfigurationError
from .protocol import run_rollout

__all__ = [
    "TrainConfig",
    "GradCheckReport",
    "mu_schedule",
    "compute_tau_plus",
    "weighted_loss",
    "train_codec",
    "train_phase1",
    "train_phase2",
    "gradient_check",
    "tiny_codec_config",
    "preset",
    "PRESET_NAMES",
]

LOG_FLOOR = 1e-12


def mu_schedule(variant: str, gamma: float | None = None) -> int:
    """Baseline floor for the first decode round.

    Transmitter-terminated sessions use 3; receiver-terminated ones grow
    with the freeze threshold: 5 up to 1-1e-5, 6 up to 1-1e-6, 7 beyond.
    """
    if variant == "T":
        return 3
    if variant not in ("R", "hybrid"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    if gamma is None:
        raise ConfigurationError("variant R/hybrid needs gamma for the mu schedule")
    if gamma <= 1 - 1e-5:
        return 5
    if gamma <= 1 - 1e-6:
        return 6
    return 7


def compute_tau_plus(eta_f_db: float, m: int, mu: int, *, snr_in_db: bool = False) -> int:
    """First round at which decoding is attempted.

    max{mu, floor(2m / log2(1 + s))}: no point checking beliefs before even a
    capacity-achieving code could have delivered the 2m-ish bits of evidence
    a group needs. ``s`` is the linear SNR 10^(eta_f/10) by default;
    ``snr_in_db`` selects the literal-dB reading instead.
    """
    if mu < 1:
        raise ConfigurationError(f"mu must be >= 1, got {mu}")
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if eta_f_db == NOISELESS:
        return mu
    s = eta_f_db if snr_in_db else 10.0 ** (eta_f_db / 10.0)
    if s <= 0:
        raise ConfigurationError(f"SNR reading {s} is non-positive; cannot form log2(1+s)")
    return max(mu, math.floor(2 * m / math.log2(1 + s)))


def weighted_loss(
    belief_history: torch.Tensor,
    pattern_indices: torch.Tensor,
    stop_rounds: torch.Tensor,
    tau_plus: int,
    theta: float,
    c: float,
) -> torch.Tensor:
    """-(1/B) sum_b sum_q sum_{tau=tau_plus}^{tau*_q} theta^(tau-c) log p_true.

    belief_history: (B, T, Q, 2^m); pattern_indices, stop_rounds: (B, Q).
    Rounds outside a group's window contribute nothing (hard gates carry no
    gradient); probabilities are floored at 1e-12 inside the log.
    """
    if theta <= 0:
        raise ConfigurationError(f"theta must be > 0, got {theta}")
    if tau_plus < 1:
        raise ConfigurationError(f"tau_plus must be >= 1, got {tau_plus}")
    B, T, Q, P = belief_history.shape
    if pattern_indices.shape != (B, Q) or stop_rounds.shape != (B, Q):
        raise ConfigurationError("pattern_indices and stop_rounds must be (B, Q)")
    if int(pattern_indices.min()) < 0 or int(pattern_indices.max()) >= P:
        raise ConfigurationError("pattern index out of range")
    idx = pattern_indices[:, None, :, None].expand(B, T, Q, 1)
    p_true = belief_history.gather(-1, idx).squeeze(-1)  # (B, T, Q)
    logp = torch.log(p_true.clamp_min(LOG_FLOOR))
    taus = torch.arange(1, T + 1)
    weights = torch.as_tensor(theta, dtype=belief_history.dtype) ** (taus.to(belief_history.dtype) - c)
    in_window = (taus[None, :, None] >= tau_plus) & (taus[None, :, None] <= stop_rounds[:, None, :])
    terms = weights[None, :, None] * logp * in_window.to(belief_history.dtype)
    return -terms.sum() / B


# --------------------------------------------------------------------------
# Training configuration and presets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run needs; frozen so runs are reproducible."""

    variant: str = "R"
    Q: int = 16
    m: int = 3
    tau_max: int = 10
    latent_dim: int = 32
    tau_vd: int = 3
    batch_size: int = 256
    steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-3
    theta: float = 10.0
    offset_c: float = 9.0
    mu: int | None = None  # None: derive from the threshold via mu_schedule
    eta_f_db: float | tuple[float, float] = 2.0  # fixed, or (lo, hi) curriculum
    eta_b_db: float = NOISELESS
    gamma: float | None = 1 - 1e-3  # receiver threshold (R / hybrid)
    gamma_t: float | None = None  # transmitter gate (T / hybrid)
    threshold_choices: tuple[float, ...] = ()  # curriculum over gamma (R) / gamma_t (T)
    phase: str = "pretrain"
    seed: int = 0
    fixed_horizon_frac: float = 0.1
    lr_floor_frac: float = 0.01
    grad_clip: float = 1.0
    dtype: str = "float64"
    snr_in_db_tau_plus: bool = False
    log_every: int = 25
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.variant not in ("R", "T", "hybrid"):
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigurationError("batch_size and steps must be >= 1")
        if self.theta <= 0:
            raise ConfigurationError(f"theta must be > 0, got {self.theta}")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("lr must be > 0 and weight_decay >= 0")
        if not 0.0 <= self.fixed_horizon_frac <= 1.0:
            raise ConfigurationError("fixed_horizon_frac must be in [0, 1]")
        if not 0.0 < self.lr_floor_frac <= 1.0:
            raise ConfigurationError("lr_floor_frac must be in (0, 1]")
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigurationError(f"phase must be pretrain|finetune, got {self.phase!r}")
        if self.variant == "R":
            if self.gamma is None:
                raise ConfigurationError("variant R requires gamma")
            if self.gamma_t is not None:
                raise ConfigurationError("variant R takes no gamma_t")
        if self.variant == "T":
            if self.gamma_t is None:
                raise ConfigurationError("variant T requires gamma_t")
            if self.gamma is not None:
                raise ConfigurationError("variant T takes no gamma")
        for g in self.threshold_choices:
            if not 0 < g < 1:
                raise ConfigurationError(f"threshold choice {g} outside (0, 1)")
        if isinstance(self.eta_f_db, tuple):
            if len(self.eta_f_db) != 2 or not self.eta_f_db[0] < self.eta_f_db[1]:
                raise ConfigurationError(f"eta_f_db range must be (lo, hi), got {self.eta_f_db}")
            if self.phase == "finetune":
                raise ConfigurationError("finetune runs at a fixed eta_f_db, not a range")
        if self.phase == "finetune" and self.threshold_choices:
            raise ConfigurationError("finetune runs at a fixed threshold")

    @property
    def K(self) -> int:
        return self.Q * self.m

    def codec_config(self) -> CodecConfig:
        return CodecConfig(
            Q=self.Q,
            m=self.m,
            tau_max=self.tau_max,
            latent_dim=self.latent_dim,
            tau_vd=self.tau_vd,
            variant=self.variant,
            dtype=self.dtype,
        )

    def fixed_tau_plus(self) -> int | None:
        """tau_plus when the operating point is fully pinned, else None."""
        if isinstance(self.eta_f_db, tuple) or self.threshold_choices:
            return None
        thr = self.gamma if self.variant in ("R", "hybrid") else self.gamma_t
        mu = self.mu if self.mu is not None else mu_schedule(self.variant, thr if self.variant != "T" else None)
        return min(self.tau_max, compute_tau_plus(self.eta_f_db, self.m, mu, snr_in_db=self.snr_in_db_tau_plus))


_PRESETS: dict[str, TrainConfig] = {
    # Full-size hyperparameters (long schedules; not run by the test suite).
    "paper-R": TrainConfig(
        variant="R",
        batch_size=8192,
        steps=40_000,
        latent_dim=64,
        theta=10.0,
        offset_c=9.0,
        tau_max=10,
        eta_f_db=(0.0, 3.0),
        threshold_choices=(1 - 1e-3, 1 - 1e-4, 1 - 1e-5, 1 - 1e-6, 1 - 1e-7),
        dtype="float32",
    ),
    "paper-T": TrainConfig(
        variant="T",
        batch_size=2048,
        steps=40_000,
        latent_dim=64,
        theta=10.0**0.25,
        offset_c=16.0,
        tau_max=20,
        eta_f_db=(0.0, 3.0),
        gamma=None,
        gamma_t=0.7,
        dtype="float32",
    ),
    # Desk-scale: trainable in tens of minutes on one CPU core. The flat
    # window (theta=1) replaces the full-size late-round emphasis: with short
    # schedules the steep weights starve early stop rounds of gradient and
    # the model freezes overconfidently wrong.
    "desk-R": TrainConfig(
        variant="R",
        batch_size=256,
        steps=4000,
        latent_dim=32,
        theta=1.0,
        offset_c=0.0,
        tau_max=10,
        eta_f_db=(1.0, 3.0),
        lr_floor_frac=0.03,
        threshold_choices=(1 - 1e-3, 1 - 1e-4, 1 - 1e-5),
    ),
    "desk-T": TrainConfig(
        variant="T",
        batch_size=256,
        steps=1200,
        latent_dim=32,
        theta=10.0**0.25,
        offset_c=8.0,  # the full-size anchor c=16 lies outside this shrunk horizon
        tau_max=10,
        eta_f_db=(1.0, 3.0),
        gamma=None,
        gamma_t=0.0,
    ),
    # Smallest config that exercises every code path; used by gradcheck.
    "tiny": TrainConfig(
        variant="R",
        Q=2,
        m=2,
        tau_max=3,
        latent_dim=8,
        tau_vd=2,
        batch_size=4,
        steps=10,
        theta=2.0,
        offset_c=1.0,
        eta_f_db=2.0,
        gamma=0.9,
        dtype="float64",
    ),
}

PRESET_NAMES = tuple(sorted(_PRESETS))


def preset(name: str, **overrides) -> TrainConfig:
    """Named TrainConfig, optionally with field overrides."""
    if name not in _PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(PRESET_NAMES)}")
    base = _PRESETS[name]
    return replace(base, **overrides) if overrides else base


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


def _sample_operating_point(
    config: TrainConfig, curriculum: NoiseSource
) -> tuple[float, float | None, float | None]:
    """Draw this batch's (eta_f, gamma, gamma_t) from the configured ranges."""
    if isinstance(config.eta_f_db, tuple):
        lo, hi = config.eta_f_db
        eta = lo + (hi - lo) * float(curriculum.uniform(1))
    else:
        eta = float(config.eta_f_db)
    gamma, gamma_t = config.gamma, config.gamma_t
    if config.threshold_choices:
        pick = float(config.threshold_choices[int(curriculum.integers(0, len(config.threshold_choices), 1))])
        if config.variant == "T":
            gamma_t = pick
        else:
            gamma = pick
    return eta, gamma, gamma_t


def train_codec(
    config: TrainConfig,
    codec: FeedbackCodec | None = None,
    out_dir: str | None = None,
) -> tuple[FeedbackCodec, list[dict]]:
    """Run one training phase; returns the model and the per-step history.

    A non-finite loss aborts the run: the last finite-loss parameters are
    restored and the final history record carries ``diverged: True``. With
    ``out_dir`` set, writes ``train_log.jsonl``, periodic checkpoints, and a
    final ``checkpoint.npz``.
    """
    cfg = config.codec_config()
    if codec is None:
        codec = build_codec(cfg, seed=config.seed)
    elif codec.cfg != cfg:
        raise ConfigurationError(
            f"resumed codec config {codec.cfg} does not match training config {cfg}"
        )
    opt = torch.optim.AdamW(codec.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    decay = config.lr_floor_frac ** (1.0 / max(config.steps - 1, 1))
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=decay)

    master = NoiseSource(config.seed)
    blocks_ns, curriculum_ns, rollout_parent = master.spawn(3)
    step_streams = rollout_parent.spawn(config.steps)

    fixed_until = math.ceil(config.fixed_horizon_frac * config.steps)
    history: list[dict] = []
    last_good = {k: v.detach().clone() for k, v in codec.state_dict().items()}
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "w", encoding="utf-8")

    def _checkpoint(path: str) -> None:
        extra = {"phase": config.phase, "train_seed": config.seed, "steps": config.steps}
        ftp = config.fixed_tau_plus()
        if ftp is not None:
            extra["first_decode_round"] = ftp
        save_checkpoint(path, codec, extra_meta=extra)

    try:
        for step in range(config.steps):
            bits = blocks_ns.bits(config.batch_size, config.K).numpy()
            eta, gamma, gamma_t = _sample_operating_point(config, curriculum_ns)
            thr = gamma_t if config.variant == "T" else gamma
            mu = config.mu if config.mu is not None else mu_schedule(
                config.variant, None if config.variant == "T" else thr
            )
            tau_plus = min(
                config.tau_max,
                compute_tau_plus(eta, config.m, mu, snr_in_db=config.snr_in_db_tau_plus),
            )
            fixed_horizon = step < fixed_until
            rollout = run_rollout(
                codec,
                bits,
                ChannelConfig(eta_f_db=eta, eta_b_db=config.eta_b_db),
                variant=config.variant,
                noise=step_streams[step],
                gamma=None if (fixed_horizon or config.variant == "T") else gamma,
                gamma_t=None if (fixed_horizon or config.variant == "R") else gamma_t,
                first_decode_round=tau_plus,
                mode="train",
                update_running=True,
            )
            loss = weighted_loss(
                rollout.belief_history,
                rollout.pattern_indices,
                rollout.stop_rounds,
                tau_plus,
                config.theta,
                config.offset_c,
            )
            if not torch.isfinite(loss):
                codec.load_state_dict(last_good)
                rec = {"step": step, "loss": float("nan"), "diverged": True}
                history.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec) + "\n")
                break
            lr_used = float(opt.param_groups[0]["lr"])
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(codec.parameters(), config.grad_clip)
            opt.step()
            sched.step()
            last_good = {k: v.detach().clone() for k, v in codec.state_dict().items()}
            rec = {
                "step": step,
                "loss": float(loss.detach()),
                "lr": lr_used,
                "eta_f_db": eta,
                "threshold": thr,
                "tau_plus": tau_plus,
                "fixed_horizon": fixed_horizon,
                "mean_stop": float(rollout.stop_rounds.to(torch.float64).mean()),
            }
            history.append(rec)
            if log_fh and (step % config.log_every == 0 or step == config.steps - 1):
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if out_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                _checkpoint(os.path.join(out_dir, f"checkpoint_step{step + 1:06d}.npz"))
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        _checkpoint(os.path.join(out_dir, "checkpoint.npz"))
    return codec, history


def train_phase1(config: TrainConfig, out_dir: str | None = None) -> tuple[FeedbackCodec, list[dict]]:
    """Curriculum pretraining from scratch."""
    if config.phase != "pretrain":
        raise ConfigurationError("train_phase1 expects phase='pretrain'")
    return train_codec(config, codec=None, out_dir=out_dir)


def train_phase2(
    codec: FeedbackCodec, config: TrainConfig, out_dir: str | None = None
) -> tuple[FeedbackCodec, list[dict]]:
    """Fine-tune an existing model at one fixed operating point."""
    if config.phase != "finetune":
        raise ConfigurationError("train_phase2 expects phase='finetune'")
    return train_codec(config, codec=codec, out_dir=out_dir)


def refresh_power_stats(
    codec: FeedbackCodec,
    chan: ChannelConfig,
    *,
    variant: str = "R",
    gamma: float | None = None,
    gamma_t: float | None = None,
    tau_max: int | None = None,
    n_batches: int = 80,
    batch_size: int = 256,
    seed: int = 0,
) -> FeedbackCodec:
    """Re-estimate the power normalizer's running statistics at an operating point.

    Training calibrates the normalizer to the distribution it trained on;
    deployed at a different channel or stopping threshold, the stored per-round
    statistics are slightly off and the transmitted power drifts away from
    unit. This pass keeps every weight frozen and replays train-mode rollouts
    at the given operating point, so the normalizer's moving averages converge
    to the deployment distribution. No gradients are computed; only the
    normalizer buffers change. Returns the same codec for chaining.
    """
    if n_batches < 1:
        raise ConfigurationError(f"n_batches must be >= 1, got {n_batches}")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    cfg = codec.cfg
    horizon = cfg.tau_max if tau_max is None else tau_max
    thr = gamma_t if variant == "T" else gamma
    mu = mu_schedule(variant, None if variant == "T" else thr)
    tau_plus = min(horizon, compute_tau_plus(chan.eta_f_db, cfg.m, mu))
    bits_ns, rollout_parent = NoiseSource(seed).spawn(2)
    streams = rollout_parent.spawn(n_batches)
    saved_momentum = codec.power.momentum
    try:
        with torch.no_grad():
            for batch in range(n_batches):
                # Batch 0 disables the stopping rules so every round up to the
                # horizon transmits, and momentum 1.0 overwrites the stale
                # statistics outright. Batch t >= 1 then runs the deployment
                # dynamics with momentum 1/t, which is a running average: any
                # round the stopping rules still reach ends at the exact mean
                # of its observed batch moments, and a round they never reach
                # keeps its full-horizon estimate.
                full_horizon = batch == 0
                codec.power.momentum = 1.0 / max(batch, 1)
                bits = bits_ns.bits(batch_size, cfg.K).numpy()
                run_rollout(
                    codec,
                    bits,
                    chan,
                    variant=variant,
                    noise=streams[batch],
                    gamma=None if (full_horizon or variant == "T") else gamma,
                    gamma_t=None if (full_horizon or variant == "R") else gamma_t,
                    tau_max=horizon,
                    first_decode_round=tau_plus,
                    mode="train",
                    update_running=True,
                )
    finally:
        codec.power.momentum = saved_momentum
    return codec


# --------------------------------------------------------------------------
# Gradient verification
# --------------------------------------------------------------------------


def tiny_codec_config() -> CodecConfig:
    """Smallest architecture that still runs every code path in 64-bit."""
    return CodecConfig(Q=2, m=2, tau_max=3, latent_dim=8, tau_vd=2, dtype="float64")


@dataclass
class GradCheckReport:
    """Analytic-vs-finite-difference comparison over full unrolled sessions."""

    max_rel_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)
    draws: int = 0
    n_parameters: int = 0
    gate: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.gate


def gradient_check(
    cfg: CodecConfig | None = None,
    *,
    draws: int = 5,
    fd_step: float = 1e-5,
    seed: int = 0,
    batch: int = 2,
    theta: float = 2.0,
    offset_c: float = 1.0,
    gate: float = 1e-4,
) -> GradCheckReport:
    """Check d(weighted_loss)/d(theta) for every parameter of a tiny codec.

    The session runs in training mode at a fixed horizon (stopping gates
    disabled) with frozen running statistics, so the loss is smooth in the
    parameters and central differences are a valid oracle. Relative error is
    |g_a - g_fd| / max(|g_a|, |g_fd|, 1e-4): the absolute floor keeps
    both-nearly-zero gradients from failing on roundoff.
    """
    cfg = cfg or tiny_codec_config()
    if cfg.dtype != "float64":
        raise ConfigurationError("gradient check requires a float64 configuration")
    chan = ChannelConfig(eta_f_db=2.0, eta_b_db=10.0)
    report = GradCheckReport(max_rel_error=0.0, draws=draws, gate=gate)

    for draw in range(draws):
        codec = build_codec(cfg, seed=seed + 1009 * draw)
        bits = NoiseSource(seed + 13 + draw).bits(batch, cfg.K).numpy()
        noise_seed = seed + 100_003 + draw

        def loss_value() -> torch.Tensor:
            rollout = run_rollout(
                codec,
                bits,
                chan,
                variant="R",
                noise=NoiseSource(noise_seed),
                gamma=None,
                first_decode_round=1,
                mode="train",
                update_running=False,
            )
            return weighted_loss(
                rollout.belief_history,
                rollout.pattern_indices,
                rollout.stop_rounds,
                1,
                theta,
                offset_c,
            )

        codec.zero_grad()
        loss_value().backward()
        for name, p in codec.named_parameters():
            grads = p.grad.detach().reshape(-1) if p.grad is not None else torch.zeros(p.numel())
            flat = p.data.reshape(-1)
            worst = report.per_parameter.get(name, 0.0)
            with torch.no_grad():
                for i in range(flat.numel()):
                    orig = float(flat[i])
                    flat[i] = orig + fd_step
                    up = float(loss_value())
                    flat[i] = orig - fd_step
                    down = float(loss_value())
                    flat[i] = orig
                    fd = (up - down) / (2 * fd_step)
                    ga = float(grads[i])
                    rel = abs(ga - fd) / max(abs(ga), abs(fd), 1e-4)
                    if rel > worst:
                        worst = rel
            report.per_parameter[name] = worst
        report.n_parameters = sum(p.numel() for p in codec.parameters())
    report.max_rel_error = max(report.per_parameter.values(), default=0.0)
    return report
