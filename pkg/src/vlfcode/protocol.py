"""Interactive transmission sessions with variable-length stopping.

One session: the encoder sends one parity symbol per still-active group each
round; the receiver updates per-group beliefs and (depending on the variant)
freezes groups whose peak belief crosses a threshold, feeding back what it
received plus, for transmitter-terminated variants, a scaled noisy copy of
the belief matrix. Frozen-group indices ride an error-free side channel:
frozen slots simply carry nothing from then on.

Variants:

- "R"       receiver-terminated: per-group freezing at threshold gamma; the
            session ends when every group is frozen (or the round budget is
            exhausted, which force-stops the remainder).
- "T"       transmitter-terminated: all Q groups transmit every round; the
            transmitter ends the session once the fed-back beliefs decode to
            the true message with per-group confidence at least gamma_t.
- "hybrid"  receiver freezing as in "R", plus the transmitter check applied
            to the remaining unfrozen groups. gamma=None recovers "T"
            exactly (per seed); gamma_t=None recovers "R" exactly.

All randomness flows from one NoiseSource split into fixed-purpose
substreams (forward, symbol feedback, belief feedback, fading), so the limit
equalities above are bit-exact, not merely distributional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
from numpy.typing import NDArray

from .channels import (
    ChannelConfig,
    NoiseSource,
    awgn_transmit,
    belief_scale,
    fading_transmit,
    feedback_scale,
    feedback_transmit,
    sample_fading_windows,
)
from .codec import (
    CodecConfig,
    FeedbackCodec,
    init_decoder_knowledge,
    init_encoder_knowledge,
    update_encoder_knowledge,
    write_prev_beliefs,
    write_received_slot,
)
from .errors import ConfigurationError, ProtocolError
from .message import BitGroupBlock, partition_bits, validate_threshold

__all__ = [
    "Rollout",
    "RoundRecord",
    "SessionTranscript",
    "BatchTranscripts",
    "run_rollout",
    "run_batch",
    "run_session_R",
    "run_session_T",
    "run_session_hybrid",
    "code_rate",
    "differential_rate",
    "verify_transcripts",
    "write_transcript_log",
]

CAUSE_THRESHOLD = "threshold"
CAUSE_TRANSMITTER = "transmitter"
CAUSE_FORCED = "tau_max_forced"
_CAUSE_NAMES = {1: CAUSE_THRESHOLD, 2: CAUSE_TRANSMITTER, 3: CAUSE_FORCED}


@dataclass
class Rollout:
    """Raw batched session output (torch tensors; beliefs keep the training graph)."""

    variant: str
    gamma: float | None
    gamma_t: float | None
    tau_max: int
    first_decode_round: int
    pattern_indices: torch.Tensor  # (B, Q) long, true patterns
    bits: NDArray[np.uint8]  # (B, K)
    belief_history: torch.Tensor  # (B, T_exec, Q, 2^m); padded with final beliefs after stop
    active_history: torch.Tensor  # (B, T_exec, Q) bool, active entering each round
    x_history: torch.Tensor  # (B, T_exec, Q) detached
    y_history: torch.Tensor  # (B, T_exec, Q) detached
    fb_history: torch.Tensor  # (B, T_exec, Q) detached
    stop_rounds: torch.Tensor  # (B, Q) long, >= 1
    session_stop_round: torch.Tensor  # (B,) long
    stop_cause: torch.Tensor  # (B,) long codes into _CAUSE_NAMES
    final_beliefs: torch.Tensor  # (B, Q, 2^m)
    enc_knowledge: torch.Tensor  # (B, Q, enc_in_dim) state after the last update, detached
    dec_knowledge: torch.Tensor  # (B, Q, dec_in_dim) state after the last update, detached
    power_sum: float
    power_count: int

    @property
    def n_rounds_executed(self) -> int:
        return self.belief_history.shape[1]

    def n_per_round(self) -> torch.Tensor:
        """(B, T_exec) symbols actually transmitted per round."""
        return self.active_history.sum(dim=2)


def _pattern_bit_table(m: int) -> torch.Tensor:
    """(2^m, m) uint8 table, row i = big-endian bits of pattern i."""
    idx = torch.arange(2**m)
    shifts = torch.arange(m - 1, -1, -1)
    return ((idx[:, None] >> shifts[None, :]) & 1).to(torch.uint8)


def run_rollout(
    codec: FeedbackCodec,
    bits: NDArray[np.integer] | torch.Tensor,
    chan: ChannelConfig,
    *,
    variant: str,
    noise: NoiseSource,
    gamma: float | None = None,
    gamma_t: float | None = None,
    tau_max: int | None = None,
    first_decode_round: int = 1,
    mode: str = "infer",
    update_running: bool = False,
) -> Rollout:
    """Run a batch of interactive sessions to completion.

    ``bits``: (B, K) in {0, 1}. ``gamma`` is the receiver freeze threshold
    (None disables freezing); ``gamma_t`` the transmitter confidence gate
    (None disables the transmitter check). Threshold checks of either kind
    run only from round ``first_decode_round`` on. In "train" mode the
    belief history carries gradients and the power normalizer uses (and,
    when ``update_running``, calibrates) batch statistics.
    """
    cfg = codec.cfg
    if variant not in ("R", "T", "hybrid"):
        raise ConfigurationError(f"unknown variant {variant!r}")
    if variant == "R" and gamma_t is not None:
        raise ConfigurationError("variant R has no transmitter check; use hybrid")
    if variant == "T" and gamma is not None:
        raise ConfigurationError("variant T has no receiver freezing; use hybrid")
    if gamma is not None and not (gamma >= 1.0):
        validate_threshold(gamma, cfg.m)
    if gamma is not None and gamma >= 1.0:
        gamma = None  # unreachable threshold == freezing disabled
    if gamma_t is not None and not 0.0 <= gamma_t < 1.0:
        raise ConfigurationError(f"gamma_t must be in [0, 1) or None, got {gamma_t}")
    if first_decode_round < 1:
        raise ConfigurationError(f"first_decode_round must be >= 1, got {first_decode_round}")
    T = cfg.tau_max if tau_max is None else int(tau_max)
    if not 1 <= T <= cfg.tau_max:
        raise ConfigurationError(f"tau_max must be in [1, {cfg.tau_max}], got {T}")

    bits_t = torch.as_tensor(np.asarray(bits)).to(torch.long)
    if bits_t.ndim != 2 or bits_t.shape[1] != cfg.K:
        raise ConfigurationError(f"bits must be (B, {cfg.K}), got {tuple(bits_t.shape)}")
    if not ((bits_t == 0) | (bits_t == 1)).all():
        raise ConfigurationError("bits must be 0/1")
    B = bits_t.shape[0]
    groups = bits_t.reshape(B, cfg.Q, cfg.m)
    weights = torch.as_tensor([2**i for i in range(cfg.m - 1, -1, -1)], dtype=torch.long)
    true_idx = (groups * weights).sum(-1)  # (B, Q)

    fwd_ns, fbsym_ns, fbbel_ns, fade_ns = noise.spawn(4)
    sigma_f2, sigma_b2 = chan.sigma_f2, chan.sigma_b2
    c_s = feedback_scale(sigma_b2)
    c_b = belief_scale(cfg.m)

    h_windows = None
    if chan.fading is not None:
        n_sub = (cfg.Q + 1) // 2
        if chan.fading.n_subcarriers != n_sub:
            raise ConfigurationError(
                f"trajectory has {chan.fading.n_subcarriers} subcarriers, Q={cfg.Q} needs {n_sub}"
            )
        wins = sample_fading_windows(chan.fading, T, B, fade_ns)
        h_windows = torch.from_numpy(wins)  # (B, T, n_sub) complex128

    dtype = cfg.torch_dtype
    enc_know = init_encoder_knowledge(groups, cfg)
    dec_know = init_decoder_knowledge(B, cfg)
    beliefs = torch.full((B, cfg.Q, cfg.n_patterns), 1.0 / cfg.n_patterns, dtype=dtype)
    mask = torch.ones(B, cfg.Q, dtype=torch.bool)
    alive = torch.ones(B, dtype=torch.bool)
    stop_rounds = torch.zeros(B, cfg.Q, dtype=torch.long)
    session_stop = torch.zeros(B, dtype=torch.long)
    cause = torch.zeros(B, dtype=torch.long)

    belief_hist: list[torch.Tensor] = []
    active_hist: list[torch.Tensor] = []
    x_hist: list[torch.Tensor] = []
    y_hist: list[torch.Tensor] = []
    fb_hist: list[torch.Tensor] = []
    power_sum = 0.0
    power_count = 0

    for tau in range(1, T + 1):
        active = mask & alive.unsqueeze(1)
        if not active.any():
            break
        active_hist.append(active)

        x, _ = codec.encode_round(enc_know, tau, active, mode=mode, update_running=update_running)
        with torch.no_grad():
            power_sum += float((x.detach() ** 2 * active).sum())
            power_count += int(active.sum())

        if h_windows is not None:
            y_raw = fading_transmit(x, h_windows[:, tau - 1, :], sigma_f2, fwd_ns)
        else:
            y_raw = awgn_transmit(x, sigma_f2, fwd_ns)
        y = y_raw * active.to(dtype)

        dec_know = write_received_slot(dec_know, y, tau, active, cfg)
        new_beliefs, _ = codec.decode_round(dec_know, tau)
        beliefs = torch.where(active.unsqueeze(-1), new_beliefs, beliefs)

        decoding_open = tau >= first_decode_round
        if gamma is not None and decoding_open:
            peak = beliefs.detach().max(dim=-1).values
            crossed = active & (peak >= gamma)
            stop_rounds = torch.where(crossed, torch.full_like(stop_rounds, tau), stop_rounds)
            mask = mask & ~crossed

        fb = feedback_transmit(c_s * y, sigma_b2, fbsym_ns) * active.to(dtype)

        if variant != "R":
            p_tilde = feedback_transmit(c_b * beliefs.detach(), sigma_b2, fbbel_ns)
            if gamma_t is not None and decoding_open:
                p_hat = p_tilde / c_b
                pred = p_hat.argmax(dim=-1)
                conf = p_hat.max(dim=-1).values
                remaining = mask & alive.unsqueeze(1)
                matched = (pred == true_idx) | ~remaining
                conf_ok = torch.where(remaining, conf, torch.full_like(conf, torch.inf))
                fire = (
                    alive
                    & remaining.any(dim=1)
                    & matched.all(dim=1)
                    & (conf_ok.min(dim=1).values >= gamma_t)
                )
                if fire.any():
                    stop_now = fire.unsqueeze(1) & remaining
                    stop_rounds = torch.where(stop_now, torch.full_like(stop_rounds, tau), stop_rounds)
                    session_stop = torch.where(fire, torch.full_like(session_stop, tau), session_stop)
                    cause = torch.where(fire, torch.full_like(cause, 2), cause)
                    alive = alive & ~fire
                    mask = mask & ~stop_now

        # Sessions whose last group froze this round conclude by threshold.
        done_by_threshold = alive & (session_stop == 0) & ~mask.any(dim=1)
        if done_by_threshold.any():
            session_stop = torch.where(
                done_by_threshold, torch.full_like(session_stop, tau), session_stop
            )
            cause = torch.where(done_by_threshold, torch.full_like(cause, 1), cause)

        belief_hist.append(beliefs)
        x_hist.append(x.detach())
        y_hist.append(y.detach())
        fb_hist.append(fb.detach())

        if tau < T:
            nxt = mask & alive.unsqueeze(1)
            enc_know = update_encoder_knowledge(enc_know, x, fb, tau, nxt, cfg)
            dec_know = write_prev_beliefs(dec_know, beliefs, nxt, cfg)

    # Round budget exhausted: force-stop whatever is still open.
    open_groups = mask & alive.unsqueeze(1)
    if open_groups.any():
        stop_rounds = torch.where(open_groups, torch.full_like(stop_rounds, T), stop_rounds)
    forced = session_stop == 0
    if forced.any():
        session_stop = torch.where(forced, torch.full_like(session_stop, T), session_stop)
        cause = torch.where(forced, torch.full_like(cause, 3), cause)

    if not belief_hist:
        raise ProtocolError("session executed zero rounds")

    return Rollout(
        variant=variant,
        gamma=gamma,
        gamma_t=gamma_t,
        tau_max=T,
        first_decode_round=first_decode_round,
        pattern_indices=true_idx,
        bits=np.asarray(bits_t.numpy(), dtype=np.uint8),
        belief_history=torch.stack(belief_hist, dim=1),
        active_history=torch.stack(active_hist, dim=1),
        x_history=torch.stack(x_hist, dim=1),
        y_history=torch.stack(y_hist, dim=1),
        fb_history=torch.stack(fb_hist, dim=1),
        stop_rounds=stop_rounds,
        session_stop_round=session_stop,
        stop_cause=cause,
        final_beliefs=beliefs,
        enc_knowledge=enc_know.detach(),
        dec_knowledge=dec_know.detach(),
        power_sum=power_sum,
        power_count=power_count,
    )


# --------------------------------------------------------------------------
# Transcripts
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RoundRecord:
    """One round of one session, receiver's and transmitter's shared view."""

    tau: int
    active: NDArray[np.bool_]  # groups that transmitted this round
    x: NDArray[np.float64]
    y: NDArray[np.float64]
    feedback: NDArray[np.float64]
    beliefs: NDArray[np.float64]  # (Q, 2^m) after this round's update


@dataclass(frozen=True)
class SessionTranscript:
    """Everything observable about one finished session."""

    variant: str
    Q: int
    m: int
    gamma: float | None
    gamma_t: float | None
    tau_max: int
    first_decode_round: int
    bits: NDArray[np.uint8]
    rounds: list[RoundRecord]
    stop_rounds: NDArray[np.int64]  # per-group tau*_q
    stop_round: int  # session tau*
    termination: str
    estimate: NDArray[np.uint8]
    error: bool

    @property
    def K(self) -> int:
        return self.Q * self.m

    @property
    def n_per_round(self) -> NDArray[np.int64]:
        return np.array([rec.active.sum() for rec in self.rounds], dtype=np.int64)

    @property
    def total_channel_uses(self) -> int:
        return int(self.n_per_round.sum())


@dataclass
class BatchTranscripts:
    """Batched numpy view of finished sessions (no gradients, cheap slicing)."""

    variant: str
    Q: int
    m: int
    gamma: float | None
    gamma_t: float | None
    tau_max: int
    first_decode_round: int
    bits: NDArray[np.uint8]  # (B, K)
    beliefs: NDArray[np.float64]  # (B, T_exec, Q, 2^m)
    active: NDArray[np.bool_]  # (B, T_exec, Q)
    x: NDArray[np.float64]
    y: NDArray[np.float64]
    feedback: NDArray[np.float64]
    stop_rounds: NDArray[np.int64]  # (B, Q)
    stop_round: NDArray[np.int64]  # (B,)
    termination: NDArray  # (B,) '<U…' cause names
    estimates: NDArray[np.uint8]  # (B, K)
    errors: NDArray[np.bool_]  # (B,)
    power_sum: float
    power_count: int

    @property
    def batch(self) -> int:
        return self.bits.shape[0]

    @property
    def K(self) -> int:
        return self.Q * self.m

    def n_per_round(self) -> NDArray[np.int64]:
        return self.active.sum(axis=2).astype(np.int64)

    def total_channel_uses(self) -> NDArray[np.int64]:
        return self.n_per_round().sum(axis=1)

    def rates(self) -> NDArray[np.float64]:
        return self.K / self.total_channel_uses().astype(np.float64)

    def mean_power(self) -> float:
        return self.power_sum / max(self.power_count, 1)

    def session(self, i: int) -> SessionTranscript:
        t_exec = self.beliefs.shape[1]
        rounds = []
        for t in range(t_exec):
            if not self.active[i, t].any():
                break
            rounds.append(
                RoundRecord(
                    tau=t + 1,
                    active=self.active[i, t],
                    x=self.x[i, t],
                    y=self.y[i, t],
                    feedback=self.feedback[i, t],
                    beliefs=self.beliefs[i, t],
                )
            )
        return SessionTranscript(
            variant=self.variant,
            Q=self.Q,
            m=self.m,
            gamma=self.gamma,
            gamma_t=self.gamma_t,
            tau_max=self.tau_max,
            first_decode_round=self.first_decode_round,
            bits=self.bits[i],
            rounds=rounds,
            stop_rounds=self.stop_rounds[i],
            stop_round=int(self.stop_round[i]),
            termination=str(self.termination[i]),
            estimate=self.estimates[i],
            error=bool(self.errors[i]),
        )


def to_transcripts(r: Rollout, Q: int, m: int) -> BatchTranscripts:
    """Detach a rollout into numpy transcripts with hard-decision estimates."""
    table = _pattern_bit_table(m)
    pred_idx = r.final_beliefs.detach().argmax(dim=-1)  # (B, Q)
    est = table[pred_idx].reshape(pred_idx.shape[0], -1).numpy().astype(np.uint8)
    errors = (est != r.bits).any(axis=1)
    causes = np.array([_CAUSE_NAMES[int(c)] for c in r.stop_cause], dtype="U16")
    return BatchTranscripts(
        variant=r.variant,
        Q=Q,
        m=m,
        gamma=r.gamma,
        gamma_t=r.gamma_t,
        tau_max=r.tau_max,
        first_decode_round=r.first_decode_round,
        bits=r.bits,
        beliefs=r.belief_history.detach().numpy(),
        active=r.active_history.numpy(),
        x=r.x_history.numpy(),
        y=r.y_history.numpy(),
        feedback=r.fb_history.numpy(),
        stop_rounds=r.stop_rounds.numpy(),
        stop_round=r.session_stop_round.numpy(),
        termination=causes,
        estimates=est,
        errors=errors,
        power_sum=r.power_sum,
        power_count=r.power_count,
    )


def run_batch(
    codec: FeedbackCodec,
    bits: NDArray[np.integer],
    chan: ChannelConfig,
    *,
    variant: str,
    seed: int | NoiseSource = 0,
    gamma: float | None = None,
    gamma_t: float | None = None,
    tau_max: int | None = None,
    first_decode_round: int = 1,
) -> BatchTranscripts:
    """Inference-mode batch of sessions, fully deterministic in the seed."""
    noise = seed if isinstance(seed, NoiseSource) else NoiseSource(seed)
    with torch.no_grad():
        r = run_rollout(
            codec,
            bits,
            chan,
            variant=variant,
            noise=noise,
            gamma=gamma,
            gamma_t=gamma_t,
            tau_max=tau_max,
            first_decode_round=first_decode_round,
            mode="infer",
        )
    return to_transcripts(r, codec.cfg.Q, codec.cfg.m)


def _single(codec, block, chan, **kw) -> SessionTranscript:
    if block.Q != codec.cfg.Q or block.m != codec.cfg.m:
        raise ConfigurationError(
            f"block (Q={block.Q}, m={block.m}) does not match codec (Q={codec.cfg.Q}, m={codec.cfg.m})"
        )
    return run_batch(codec, block.bits[None, :], chan, **kw).session(0)


def run_session_R(
    block: BitGroupBlock,
    codec: FeedbackCodec,
    chan: ChannelConfig,
    gamma: float,
    *,
    seed: int | NoiseSource = 0,
    tau_max: int | None = None,
    first_decode_round: int = 1,
) -> SessionTranscript:
    """One receiver-terminated session."""
    validate_threshold(gamma, block.m)
    return _single(
        codec, block, chan, variant="R", gamma=gamma, seed=seed,
        tau_max=tau_max, first_decode_round=first_decode_round,
    )


def run_session_T(
    block: BitGroupBlock,
    codec: FeedbackCodec,
    chan: ChannelConfig,
    gamma_t: float,
    *,
    seed: int | NoiseSource = 0,
    tau_max: int | None = None,
    first_decode_round: int = 1,
) -> SessionTranscript:
    """One transmitter-terminated session (all groups transmit every round)."""
    return _single(
        codec, block, chan, variant="T", gamma_t=gamma_t, seed=seed,
        tau_max=tau_max, first_decode_round=first_decode_round,
    )


def run_session_hybrid(
    block: BitGroupBlock,
    codec: FeedbackCodec,
    chan: ChannelConfig,
    gamma: float | None,
    gamma_t: float | None,
    *,
    seed: int | NoiseSource = 0,
    tau_max: int | None = None,
    first_decode_round: int = 1,
) -> SessionTranscript:
    """Receiver freezing plus transmitter termination on the remainder.

    ``gamma=None`` disables freezing (the session then replays variant T
    bit-for-bit at equal seeds); ``gamma_t=None`` disables the transmitter
    check (replaying variant R).
    """
    return _single(
        codec, block, chan, variant="hybrid", gamma=gamma, gamma_t=gamma_t, seed=seed,
        tau_max=tau_max, first_decode_round=first_decode_round,
    )


def code_rate(t: SessionTranscript) -> float:
    """Message bits per channel use: K / sum_tau n^(tau)."""
    n = t.total_channel_uses
    if n <= 0:
        raise ProtocolError("transcript has no channel uses")
    return t.K / n


def differential_rate(t: SessionTranscript) -> float:
    """Rate advantage of per-group stopping over whole-block stopping.

    K/sum(n) - K/(tau* * Q): zero when every group stops at tau*, positive
    as soon as some group froze earlier.
    """
    return code_rate(t) - t.K / (t.stop_round * t.Q)


def verify_transcripts(bt: BatchTranscripts) -> list[str]:
    """Structural invariant sweep; returns human-readable violations (empty = clean).

    Checked: per-group stop rounds within budget; active flags monotone
    (never re-activate); no transmission at or after a group's freeze round
    (variant R / hybrid threshold stops mean strictly after); conservation
    sum_tau n^(tau) = sum_q tau*_q; variant T transmits exactly Q symbols
    per executed round; zero symbols after the session's stop round.
    """
    out: list[str] = []
    B, T_exec, Q = bt.active.shape
    n_round = bt.n_per_round()
    rounds_axis = np.arange(1, T_exec + 1)

    if (bt.stop_rounds < 1).any() or (bt.stop_rounds > bt.tau_max).any():
        out.append("stop_rounds outside [1, tau_max]")
    if (bt.stop_round < 1).any() or (bt.stop_round > bt.tau_max).any():
        out.append("session stop_round outside [1, tau_max]")
    if (bt.stop_rounds.max(axis=1) != bt.stop_round).any():
        out.append("session stop_round != max of group stop rounds")

    reactivated = (~bt.active[:, :-1, :] & bt.active[:, 1:, :]).any()
    if reactivated:
        out.append("a frozen group transmitted again")

    # active entering round t  <=>  t <= tau*_q
    expected_active = rounds_axis[None, :, None] <= bt.stop_rounds[:, None, :]
    if (bt.active != expected_active).any():
        out.append("active flags disagree with stop rounds")

    if (n_round.sum(axis=1) != bt.stop_rounds.sum(axis=1)).any():
        out.append("channel-use conservation violated: sum_tau n != sum_q tau*_q")

    if bt.variant == "T":
        ran = rounds_axis[None, :] <= bt.stop_round[:, None]
        bad = ran & (n_round != Q)
        if bad.any():
            out.append("variant T round with n != Q")

    sent_after_stop = (np.abs(bt.x) > 0) & ~expected_active
    if sent_after_stop.any():
        out.append("nonzero symbol transmitted after freeze")
    return out


def write_transcript_log(bt: BatchTranscripts, path: str) -> None:
    """Append-style JSONL export: one session per line, schema version 1."""
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(bt.batch):
            t = bt.session(i)
            fh.write(
                json.dumps(
                    {
                        "schema": 1,
                        "variant": t.variant,
                        "Q": t.Q,
                        "m": t.m,
                        "gamma": t.gamma,
                        "gamma_t": t.gamma_t,
                        "tau_max": t.tau_max,
                        "first_decode_round": t.first_decode_round,
                        "bits": t.bits.tolist(),
                        "estimate": t.estimate.tolist(),
                        "error": t.error,
                        "termination": t.termination,
                        "stop_round": t.stop_round,
                        "stop_rounds": t.stop_rounds.tolist(),
                        "n_per_round": t.n_per_round.tolist(),
                        "x": [r.x.tolist() for r in t.rounds],
                        "y": [r.y.tolist() for r in t.rounds],
                        "feedback": [r.feedback.tolist() for r in t.rounds],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
