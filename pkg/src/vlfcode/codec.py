"""Encoder/decoder networks and their knowledge tensors.

Both ends keep a per-group "knowledge" row that grows by one slot per round:
the encoder sees its group's bits plus the sent-symbol and feedback
histories; the decoder sees the received history plus its previous belief
vector. Each network embeds the rows with a round-dependent feature stack
(shallow early, deeper later), adds a learned per-group position embedding,
mixes rows with single-head self-attention, and maps the mixed latents to a
parity symbol (encoder) or a belief vector (decoder).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError, ProtocolError
from .message import BitGroupBlock

__all__ = [
    "CodecConfig",
    "VariableDepthExtractor",
    "SelfAttention",
    "PowerNormalizer",
    "EncoderNet",
    "DecoderNet",
    "FeedbackCodec",
    "build_codec",
    "init_encoder_knowledge",
    "update_encoder_knowledge",
    "init_decoder_knowledge",
    "write_received_slot",
    "write_prev_beliefs",
    "build_encoder_knowledge",
    "build_decoder_knowledge",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("R", "T", "hybrid")

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class CodecConfig:
    """Shapes and switches shared by the encoder/decoder pair.

    Q groups of m bits, sessions of at most tau_max rounds; the feature
    stack deepens after round tau_vd; latent_dim is the attention width.
    ``variant`` records which stopping rule the model was trained for (the
    forward math is variant-agnostic).
    """

    Q: int
    m: int
    tau_max: int
    latent_dim: int = 32
    tau_vd: int = 3
    variant: str = "R"
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.Q < 1 or self.m < 1 or self.tau_max < 1:
            raise ConfigurationError(f"Q, m, tau_max must be >= 1, got {self.Q}, {self.m}, {self.tau_max}")
        if self.latent_dim < 1 or self.tau_vd < 1:
            raise ConfigurationError("latent_dim and tau_vd must be >= 1")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def K(self) -> int:
        return self.Q * self.m

    @property
    def n_patterns(self) -> int:
        return 2**self.m

    @property
    def enc_in_dim(self) -> int:
        # bits (+/-1) | sent slots 1..tau_max-1 | feedback slots 1..tau_max-1
        return self.m + 2 * (self.tau_max - 1)

    @property
    def dec_in_dim(self) -> int:
        # received slots 1..tau_max | previous belief vector
        return self.tau_max + self.n_patterns

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]


class VariableDepthExtractor(nn.Module):
    """Round-switched feature stack: 2 layers through round tau_vd, 4 after."""

    def __init__(self, in_dim: int, latent_dim: int, tau_vd: int):
        super().__init__()
        self.tau_vd = tau_vd
        self.shallow = nn.Sequential(
            nn.Linear(in_dim, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
        )
        self.deep = nn.Sequential(
            nn.Linear(in_dim, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
            nn.ReLU(),
            nn.Linear(latent_dim, latent_dim),
        )

    def forward(self, x: torch.Tensor, tau: int) -> torch.Tensor:
        if tau < 1:
            raise ProtocolError(f"round index must be >= 1, got {tau}")
        return self.shallow(x) if tau <= self.tau_vd else self.deep(x)


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention with learned query/key maps.

    Values are the raw latents (no value projection): the output for group j
    is sum_i rho_ij * latent_i with rho_ij = softmax_i(<W_q l_j, W_k l_i>/sqrt(d)).
    All Q rows act as sources; freezing is enforced by discarding outputs
    downstream, never by re-normalizing the softmax.
    """

    def __init__(self, latent_dim: int):
        super().__init__()
        self.query = nn.Linear(latent_dim, latent_dim, bias=False)
        self.key = nn.Linear(latent_dim, latent_dim, bias=False)
        self.scale = 1.0 / math.sqrt(latent_dim)

    def forward(self, latents: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        q = self.query(latents)
        k = self.key(latents)
        scores = torch.matmul(q, k.transpose(-2, -1)) * self.scale
        rho = torch.softmax(scores, dim=-1)  # rho[..., j, i]: weight of source i at destination j
        mixed = torch.matmul(rho, latents)
        return mixed, rho


class PowerNormalizer(nn.Module):
    """Per-round standardization of transmitted symbols to zero mean, unit power.

    Training mode uses the batch statistics of the *active* symbols
    (differentiable) and, unless disabled, folds them into per-round running
    statistics; inference mode applies the stored statistics.
    """

    eps = 1e-8

    def __init__(self, tau_max: int, momentum: float = 0.05):
        super().__init__()
        if not 0.0 < momentum <= 1.0:
            raise ConfigurationError(f"momentum must be in (0, 1], got {momentum}")
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(tau_max, dtype=torch.float64))
        self.register_buffer("running_var", torch.ones(tau_max, dtype=torch.float64))

    @property
    def running_std(self) -> torch.Tensor:
        return torch.sqrt(self.running_var + self.eps)

    def forward(
        self,
        raw: torch.Tensor,
        tau: int,
        active: torch.Tensor,
        mode: str,
        update_running: bool = True,
    ) -> torch.Tensor:
        if mode == "train":
            sel = raw[active]
            if sel.numel() == 0:
                raise ProtocolError(f"round {tau}: no active symbols to normalize")
            mean = sel.mean()
            var = ((sel - mean) ** 2).mean()
            out = (raw - mean) / torch.sqrt(var + self.eps)
            if update_running:
                with torch.no_grad():
                    mom = self.momentum
                    self.running_mean[tau - 1] = (1 - mom) * self.running_mean[tau - 1] + mom * mean
                    self.running_var[tau - 1] = (1 - mom) * self.running_var[tau - 1] + mom * var
            return out
        if mode == "infer":
            mean = self.running_mean[tau - 1].to(raw.dtype)
            std = self.running_std[tau - 1].to(raw.dtype)
            return (raw - mean) / std
        raise ConfigurationError(f"mode must be 'train' or 'infer', got {mode!r}")


class EncoderNet(nn.Module):
    """Knowledge rows -> one parity symbol per group (pre-normalization)."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        d = cfg.latent_dim
        self.extract = VariableDepthExtractor(cfg.enc_in_dim, d, cfg.tau_vd)
        # Zero-init learned position embedding: without it, weight sharing
        # makes equal-content groups indistinguishable to attention.
        self.position = nn.Parameter(torch.zeros(cfg.Q, d))
        self.attend = SelfAttention(d)
        self.head = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, 1))

    def forward(self, knowledge: torch.Tensor, tau: int) -> tuple[torch.Tensor, torch.Tensor]:
        latents = self.extract(knowledge, tau) + self.position
        mixed, rho = self.attend(latents)
        return self.head(mixed).squeeze(-1), rho


class DecoderNet(nn.Module):
    """Knowledge rows -> one belief vector (softmax over 2^m patterns) per group."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        d = cfg.latent_dim
        self.extract = VariableDepthExtractor(cfg.dec_in_dim, d, cfg.tau_vd)
        self.position = nn.Parameter(torch.zeros(cfg.Q, d))
        self.attend = SelfAttention(d)
        self.head = nn.Sequential(
            nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU(), nn.Linear(d, cfg.n_patterns)
        )

    def forward(self, knowledge: torch.Tensor, tau: int) -> tuple[torch.Tensor, torch.Tensor]:
        latents = self.extract(knowledge, tau) + self.position
        mixed, rho = self.attend(latents)
        beliefs = torch.softmax(self.head(mixed), dim=-1)
        return beliefs, rho


class FeedbackCodec(nn.Module):
    """The trained pair: encoder, decoder, and the symbol power normalizer."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = EncoderNet(cfg)
        self.decoder = DecoderNet(cfg)
        self.power = PowerNormalizer(cfg.tau_max)

    def encode_round(
        self,
        knowledge: torch.Tensor,
        tau: int,
        active: torch.Tensor,
        mode: str = "infer",
        update_running: bool = True,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Normalized symbols for round tau; frozen groups transmit exactly 0."""
        raw, rho = self.encoder(knowledge, tau)
        x = self.power(raw, tau, active, mode, update_running)
        return x * active.to(x.dtype), rho

    def decode_round(self, knowledge: torch.Tensor, tau: int) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decoder(knowledge, tau)


def build_codec(cfg: CodecConfig, seed: int = 0) -> FeedbackCodec:
    """Construct a codec with seed-reproducible parameter initialization."""
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        codec = FeedbackCodec(cfg)
    return codec.to(cfg.torch_dtype)


# --------------------------------------------------------------------------
# Knowledge tensors
# --------------------------------------------------------------------------
#
# Encoder row q: [bits (+/-1) | sent slot 1..tau_max-1 | feedback slot 1..tau_max-1]
# Decoder row q: [received slot 1..tau_max | previous belief vector]
# Slot t is column (t-1) within its band. Unwritten slots stay zero.


def init_encoder_knowledge(bits: torch.Tensor, cfg: CodecConfig) -> torch.Tensor:
    """Fresh encoder knowledge from message bits, shape (B, Q, enc_in_dim).

    ``bits``: (B, Q, m) in {0, 1}; stored antipodally (0 -> -1, 1 -> +1).
    """
    B = bits.shape[0]
    if bits.shape[1:] != (cfg.Q, cfg.m):
        raise ConfigurationError(f"bits shape {tuple(bits.shape)} != (B, {cfg.Q}, {cfg.m})")
    know = torch.zeros(B, cfg.Q, cfg.enc_in_dim, dtype=cfg.torch_dtype)
    know[:, :, : cfg.m] = 2.0 * bits.to(cfg.torch_dtype) - 1.0
    return know


def update_encoder_knowledge(
    knowledge: torch.Tensor,
    x: torch.Tensor,
    feedback: torch.Tensor,
    tau: int,
    active: torch.Tensor,
    cfg: CodecConfig,
) -> torch.Tensor:
    """Write round-tau sent/feedback values into the rows flagged active.

    Functional (returns a new tensor) so training graphs stay valid. Rows
    with ``active`` False keep their slots at zero — the frozen-group union
    rule.
    """
    if tau >= cfg.tau_max:
        raise ProtocolError(f"no slot for round {tau} with tau_max={cfg.tau_max}")
    new = knowledge.clone()
    keep = active.to(knowledge.dtype)
    sent_col = cfg.m + (tau - 1)
    fb_col = cfg.m + (cfg.tau_max - 1) + (tau - 1)
    new[:, :, sent_col] = x * keep
    new[:, :, fb_col] = feedback * keep
    return new


def init_decoder_knowledge(batch: int, cfg: CodecConfig) -> torch.Tensor:
    """Fresh decoder knowledge, shape (B, Q, dec_in_dim).

    Received slots start at zero; the previous-belief band starts at the
    uniform prior 1/2^m (the belief state entering round 1).
    """
    know = torch.zeros(batch, cfg.Q, cfg.dec_in_dim, dtype=cfg.torch_dtype)
    know[:, :, cfg.tau_max :] = 1.0 / cfg.n_patterns
    return know


def write_received_slot(
    knowledge: torch.Tensor, y: torch.Tensor, tau: int, active: torch.Tensor, cfg: CodecConfig
) -> torch.Tensor:
    """Write round-tau equalized receptions into active rows' slot tau."""
    if tau > cfg.tau_max:
        raise ProtocolError(f"no received slot for round {tau} with tau_max={cfg.tau_max}")
    new = knowledge.clone()
    new[:, :, tau - 1] = y * active.to(knowledge.dtype)
    return new


def write_prev_beliefs(
    knowledge: torch.Tensor, beliefs: torch.Tensor, active: torch.Tensor, cfg: CodecConfig
) -> torch.Tensor:
    """Replace the previous-belief band of active rows; frozen rows keep theirs."""
    new = knowledge.clone()
    keep = active.to(knowledge.dtype).unsqueeze(-1)
    band = slice(cfg.tau_max, cfg.tau_max + cfg.n_patterns)
    new[:, :, band] = beliefs * keep + knowledge[:, :, band] * (1 - keep)
    return new


def build_encoder_knowledge(
    block: BitGroupBlock,
    sent: np.ndarray,
    feedback: np.ndarray,
    tau: int,
    stop_rounds: np.ndarray,
    cfg: CodecConfig,
) -> torch.Tensor:
    """One-shot reference rebuild of the encoder knowledge entering round tau.

    ``sent``/``feedback``: (rounds_so_far, Q), row t-1 holding round t's
    values. ``stop_rounds``: (Q,), 0 for still-active groups, else the round
    at which the group froze. Group q's slots are filled for rounds
    t <= tau-1 with t <= stop_rounds[q]-1 when frozen: a group frozen in
    round t* transmitted through t*, but its post-round union stopped after
    t*-1. Used as the oracle the incremental protocol updates are checked
    against.
    """
    if block.Q != cfg.Q or block.m != cfg.m:
        raise ConfigurationError("block does not match codec config")
    bits = torch.from_numpy(np.ascontiguousarray(block.groups)).unsqueeze(0)
    know = init_encoder_knowledge(bits, cfg)[0]
    stop = np.asarray(stop_rounds)
    for t in range(1, tau):
        if t >= cfg.tau_max:
            break
        open_rows = (stop == 0) | (t <= stop - 1)
        keep = torch.from_numpy(open_rows).to(cfg.torch_dtype)
        know[:, cfg.m + (t - 1)] = torch.as_tensor(sent[t - 1], dtype=cfg.torch_dtype) * keep
        know[:, cfg.m + (cfg.tau_max - 1) + (t - 1)] = (
            torch.as_tensor(feedback[t - 1], dtype=cfg.torch_dtype) * keep
        )
    return know


def build_decoder_knowledge(
    received: np.ndarray,
    prev_beliefs: np.ndarray,
    tau: int,
    stop_rounds: np.ndarray,
    cfg: CodecConfig,
) -> torch.Tensor:
    """One-shot reference rebuild of the decoder knowledge entering round tau.

    ``received``: (rounds_so_far, Q). Received slots fill for t <= tau-1 with
    t <= stop_rounds[q] (a group frozen in round t* received through t*).
    ``prev_beliefs``: (Q, 2^m) — each group's latest belief vector (uniform if
    it never decoded).
    """
    know = init_decoder_knowledge(1, cfg)[0]
    stop = np.asarray(stop_rounds)
    for t in range(1, tau):
        if t > cfg.tau_max:
            break
        open_rows = (stop == 0) | (t <= stop)
        keep = torch.from_numpy(open_rows).to(cfg.torch_dtype)
        know[:, t - 1] = torch.as_tensor(received[t - 1], dtype=cfg.torch_dtype) * keep
    know[:, cfg.tau_max :] = torch.as_tensor(prev_beliefs, dtype=cfg.torch_dtype)
    return know


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

_META_KEY = "__meta__"
_CKPT_FORMAT = 1


def save_checkpoint(path: str, codec: FeedbackCodec, extra_meta: dict | None = None) -> None:
    """Write parameters, normalizer state, and hyperparameters to an .npz."""
    cfg = codec.cfg
    meta = {
        "format": _CKPT_FORMAT,
        "Q": cfg.Q,
        "m": cfg.m,
        "tau_max": cfg.tau_max,
        "latent_dim": cfg.latent_dim,
        "tau_vd": cfg.tau_vd,
        "variant": cfg.variant,
        "dtype": cfg.dtype,
    }
    if extra_meta:
        overlap = set(extra_meta) & set(meta)
        if overlap:
            raise CheckpointError(f"extra_meta may not override {sorted(overlap)}")
        meta.update(extra_meta)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    arrays = {f"state.{k}": v.detach().cpu().numpy() for k, v in codec.state_dict().items()}
    np.savez(path, **{_META_KEY: blob}, **arrays)


def load_checkpoint(path: str) -> tuple[FeedbackCodec, dict]:
    """Rebuild a codec from an .npz; validates metadata and array shapes."""
    with np.load(path) as data:
        if _META_KEY not in data:
            raise CheckpointError(f"{path}: missing metadata record")
        meta = json.loads(bytes(data[_META_KEY].tobytes()).decode("utf-8"))
        if meta.get("format") != _CKPT_FORMAT:
            raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')}")
        try:
            cfg = CodecConfig(
                Q=int(meta["Q"]),
                m=int(meta["m"]),
                tau_max=int(meta["tau_max"]),
                latent_dim=int(meta["latent_dim"]),
                tau_vd=int(meta["tau_vd"]),
                variant=str(meta["variant"]),
                dtype=str(meta["dtype"]),
            )
        except KeyError as exc:
            raise CheckpointError(f"{path}: metadata missing field {exc}") from None
        codec = build_codec(cfg, seed=0)
        state = {}
        expected = codec.state_dict()
        for key, ref in expected.items():
            npz_key = f"state.{key}"
            if npz_key not in data:
                raise CheckpointError(f"{path}: missing array {npz_key}")
            arr = data[npz_key]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"{path}: array {npz_key} has shape {tuple(arr.shape)}, expected {tuple(ref.shape)}"
                )
            state[key] = torch.from_numpy(arr.copy()).to(ref.dtype)
        extra = [k for k in data.files if k != _META_KEY and k.removeprefix("state.") not in expected]
        if extra:
            raise CheckpointError(f"{path}: unexpected arrays {extra}")
    codec.load_state_dict(state)
    return codec, meta
