import json

import numpy as np
import pytest
import torch

from vlfcode.channels import NOISELESS, ChannelConfig, NoiseSource, jakes_trajectory
from vlfcode.codec import (
    CodecConfig,
    build_codec,
    build_decoder_knowledge,
    build_encoder_knowledge,
)
from vlfcode.errors import ConfigurationError
from vlfcode.message import partition_bits
from vlfcode.protocol import (
    code_rate,
    differential_rate,
    run_batch,
    run_rollout,
    run_session_hybrid,
    run_session_R,
    run_session_T,
    verify_transcripts,
    write_transcript_log,
)

CFG = CodecConfig(Q=4, m=2, tau_max=6, latent_dim=16, tau_vd=2)
CHAN = ChannelConfig(eta_f_db=2.0, eta_b_db=NOISELESS)
NOISY = ChannelConfig(eta_f_db=2.0, eta_b_db=10.0)


def _codec(seed=0, cfg=CFG):
    return build_codec(cfg, seed=seed)


def _spread_codec(seed=3, cfg=CFG, gain=3.0):
    """Untrained codec with amplified weights so beliefs spread enough to
    actually cross thresholds (fresh init is too close to uniform)."""
    codec = build_codec(cfg, seed=seed)
    with torch.no_grad():
        for p in codec.parameters():
            p.mul_(gain)
    return codec


def _bits(n, k, seed=0):
    return np.random.default_rng(seed).integers(0, 2, size=(n, k))


def _equal_transcripts(a, b) -> bool:
    return (
        np.array_equal(a.x, b.x)
        and np.array_equal(a.y, b.y)
        and np.array_equal(a.feedback, b.feedback)
        and np.array_equal(a.beliefs, b.beliefs)
        and np.array_equal(a.active, b.active)
        and np.array_equal(a.stop_rounds, b.stop_rounds)
        and np.array_equal(a.stop_round, b.stop_round)
        and np.array_equal(a.termination, b.termination)
        and np.array_equal(a.estimates, b.estimates)
    )


def test_replay_is_byte_identical():
    codec = _codec()
    bits = _bits(32, CFG.K, seed=5)
    a = run_batch(codec, bits, NOISY, variant="R", gamma=0.5, seed=77)
    b = run_batch(codec, bits, NOISY, variant="R", gamma=0.5, seed=77)
    assert _equal_transcripts(a, b)
    c = run_batch(codec, bits, NOISY, variant="R", gamma=0.5, seed=78)
    assert not _equal_transcripts(a, c)


@pytest.mark.parametrize(
    "variant,kw",
    [
        ("R", dict(gamma=0.60)),
        ("T", dict(gamma_t=0.30)),
        ("hybrid", dict(gamma=0.60, gamma_t=0.30)),
    ],
)
def test_invariants_untrained(variant, kw):
    codec = _spread_codec(seed=3)
    bits = _bits(256, CFG.K, seed=1)
    bt = run_batch(codec, bits, NOISY, variant=variant, seed=11, **kw)
    assert verify_transcripts(bt) == []
    # Mixed terminations actually occur at these loose thresholds.
    assert bt.stop_round.min() < CFG.tau_max
    if variant == "T":
        n = bt.n_per_round()
        ran = np.arange(1, n.shape[1] + 1)[None, :] <= bt.stop_round[:, None]
        assert (n[ran] == CFG.Q).all()


def test_conservation_exact():
    codec = _spread_codec(seed=3)
    bits = _bits(128, CFG.K, seed=2)
    bt = run_batch(codec, bits, CHAN, variant="R", gamma=0.6, seed=9)
    assert len(np.unique(bt.stop_rounds)) > 1  # non-degenerate stopping
    assert np.array_equal(bt.total_channel_uses(), bt.stop_rounds.sum(axis=1))


def test_no_transmission_after_freeze():
    codec = _spread_codec(seed=5)
    bits = _bits(128, CFG.K, seed=3)
    bt = run_batch(codec, bits, NOISY, variant="R", gamma=0.6, seed=13)
    assert bt.stop_rounds.min() < CFG.tau_max  # some groups really froze early
    for i in range(bt.batch):
        for q in range(CFG.Q):
            stop = bt.stop_rounds[i, q]
            assert (bt.x[i, stop:, q] == 0).all()
            assert (bt.x[i, :stop, q] != 0).all()  # transmitted through its stop round


def test_hybrid_limits_bit_exact():
    codec = _spread_codec(seed=3)
    bits = _bits(64, CFG.K, seed=4)
    for seed in (0, 1, 2):
        r = run_batch(codec, bits, NOISY, variant="R", gamma=0.6, seed=seed)
        h_r = run_batch(codec, bits, NOISY, variant="hybrid", gamma=0.6, gamma_t=None, seed=seed)
        assert _equal_transcripts(r, h_r)
        t = run_batch(codec, bits, NOISY, variant="T", gamma_t=0.3, seed=seed)
        h_t = run_batch(codec, bits, NOISY, variant="hybrid", gamma=None, gamma_t=0.3, seed=seed)
        assert _equal_transcripts(t, h_t)
        # gamma >= 1 is the same sentinel as None.
        h_t2 = run_batch(codec, bits, NOISY, variant="hybrid", gamma=1.0, gamma_t=0.3, seed=seed)
        assert _equal_transcripts(t, h_t2)


def test_noiseless_T_terminate_implies_correct():
    # With noiseless feedback the transmitter sees the receiver's exact
    # beliefs, so a pre-budget stop certifies the final hard decision.
    codec = _codec(seed=7)
    bits = _bits(512, CFG.K, seed=5)
    bt = run_batch(codec, bits, CHAN, variant="T", gamma_t=0.0, seed=21)
    early = bt.stop_round < CFG.tau_max
    assert early.any()  # loose gate: untrained sessions do stop early sometimes
    assert not bt.errors[early].any()
    assert (bt.termination[early] == "transmitter").all()


def test_first_decode_round_gates_stopping():
    codec = _spread_codec(seed=3)
    bits = _bits(128, CFG.K, seed=6)
    early = run_batch(codec, bits, NOISY, variant="R", gamma=0.6, seed=3)
    assert early.stop_rounds.min() < 3  # would stop before round 3 if ungated
    bt = run_batch(codec, bits, NOISY, variant="R", gamma=0.6, seed=3, first_decode_round=3)
    assert bt.stop_rounds.min() >= 3
    assert verify_transcripts(bt) == []


def test_tau_max_forced_cause():
    codec = _codec(seed=9)
    bits = _bits(16, CFG.K, seed=7)
    # gamma just below 1 never crossed by an untrained model -> all forced.
    bt = run_batch(codec, bits, NOISY, variant="R", gamma=1 - 1e-9, seed=1)
    assert (bt.termination == "tau_max_forced").all()
    assert (bt.stop_rounds == CFG.tau_max).all()
    assert (bt.stop_round == CFG.tau_max).all()


def test_fading_rollout_invariants():
    traj = jakes_trajectory(64, (CFG.Q + 1) // 2, seed=2)
    chan = ChannelConfig(eta_f_db=5.0, eta_b_db=NOISELESS, fading=traj)
    codec = _codec(seed=10)
    bits = _bits(64, CFG.K, seed=8)
    bt = run_batch(codec, bits, chan, variant="R", gamma=0.45, seed=17)
    assert verify_transcripts(bt) == []
    # Wrong subcarrier count is a configuration error.
    bad = ChannelConfig(eta_f_db=5.0, fading=jakes_trajectory(64, 5, seed=2))
    with pytest.raises(ConfigurationError, match="subcarrier"):
        run_batch(codec, bits, bad, variant="R", gamma=0.45, seed=17)


def test_incremental_knowledge_matches_one_shot_rebuild():
    codec = _spread_codec(seed=3)
    bits = _bits(48, CFG.K, seed=9)
    noise = NoiseSource(31)
    with torch.no_grad():
        r = run_rollout(
            codec, bits, NOISY, variant="hybrid", noise=noise, gamma=0.6, gamma_t=0.3
        )
    E = r.n_rounds_executed
    for i in range(8):
        block = partition_bits(bits[i], CFG.Q)
        stop = r.stop_rounds[i].numpy()
        enc_ref = build_encoder_knowledge(
            block, r.x_history[i].numpy(), r.fb_history[i].numpy(), E + 1, stop, CFG
        )
        assert torch.allclose(r.enc_knowledge[i], enc_ref, atol=0)
        prev = np.empty((CFG.Q, CFG.n_patterns))
        for q in range(CFG.Q):
            s = int(stop[q])
            prev[q] = 0.25 if s <= 1 else r.belief_history[i, s - 2, q].numpy()
        dec_ref = build_decoder_knowledge(r.y_history[i].numpy(), prev, E + 1, stop, CFG)
        assert torch.allclose(r.dec_knowledge[i], dec_ref, atol=0)


def test_single_session_wrappers_and_rates():
    codec = _spread_codec(seed=3)
    block = partition_bits(_bits(1, CFG.K, seed=10)[0], CFG.Q)
    t = run_session_R(block, codec, NOISY, gamma=0.6, seed=41)
    assert t.variant == "R" and t.Q == CFG.Q and t.m == CFG.m
    assert len(t.rounds) == t.stop_round
    assert t.total_channel_uses == t.stop_rounds.sum()
    assert code_rate(t) == pytest.approx(t.K / t.total_channel_uses)
    # Worked example: uses = sum(stop_rounds), tau* = max(stop_rounds).
    assert differential_rate(t) == pytest.approx(
        t.K / t.stop_rounds.sum() - t.K / (t.stop_round * t.Q)
    )
    assert differential_rate(t) >= 0
    tt = run_session_T(block, codec, CHAN, gamma_t=0.0, seed=42)
    assert set(tt.n_per_round) == {CFG.Q}
    th = run_session_hybrid(block, codec, NOISY, 0.5, 0.3, seed=43)
    assert th.variant == "hybrid"
    with pytest.raises(ConfigurationError):
        run_session_R(block, codec, NOISY, gamma=1.5, seed=1)


def test_differential_rate_worked_example():
    # A session whose groups stop at different rounds gains over whole-block
    # stopping: K/sum(tau*_q) > K/(tau* Q).
    codec = _spread_codec(seed=3)
    block = partition_bits(np.array([1, 0, 1, 1, 0, 0, 1, 0]), 4)
    found = None
    for seed in range(200):
        t = run_session_R(block, codec, NOISY, gamma=0.6, seed=seed)
        if t.stop_round > t.stop_rounds.min():
            found = t
            break
    assert found is not None, "no session with spread stop rounds in 200 seeds"
    assert differential_rate(found) > 0


def test_variant_argument_validation():
    codec = _codec()
    bits = _bits(2, CFG.K)
    with pytest.raises(ConfigurationError):
        run_batch(codec, bits, CHAN, variant="R", gamma=0.5, gamma_t=0.5, seed=0)
    with pytest.raises(ConfigurationError):
        run_batch(codec, bits, CHAN, variant="T", gamma=0.5, gamma_t=0.5, seed=0)
    with pytest.raises(ConfigurationError):
        run_batch(codec, bits, CHAN, variant="Z", seed=0)
    with pytest.raises(ConfigurationError):
        run_batch(codec, bits, CHAN, variant="T", gamma_t=1.2, seed=0)


def test_power_accounting():
    codec = _spread_codec(seed=3)
    bits = _bits(64, CFG.K, seed=11)
    bt = run_batch(codec, bits, NOISY, variant="R", gamma=0.6, seed=19)
    # Sum of squared recorded symbols over active slots equals the audit sum.
    manual = float((bt.x**2).sum())
    assert manual == pytest.approx(bt.power_sum, rel=1e-12)
    assert bt.power_count == int(bt.active.sum())
    assert bt.mean_power() > 0


def test_transcript_log_roundtrip(tmp_path):
    codec = _spread_codec(seed=3)
    bits = _bits(5, CFG.K, seed=12)
    bt = run_batch(codec, bits, NOISY, variant="hybrid", gamma=0.6, gamma_t=0.3, seed=23)
    path = str(tmp_path / "log.jsonl")
    write_transcript_log(bt, path)
    lines = [json.loads(ln) for ln in open(path)]
    assert len(lines) == 5
    for i, rec in enumerate(lines):
        assert rec["schema"] == 1
        assert rec["variant"] == "hybrid"
        assert rec["bits"] == bt.bits[i].tolist()
        assert rec["stop_round"] == int(bt.stop_round[i])
        assert len(rec["x"]) == int(bt.stop_round[i])
        assert rec["n_per_round"] == bt.n_per_round()[i, : bt.stop_round[i]].tolist()
