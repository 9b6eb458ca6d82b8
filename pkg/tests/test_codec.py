import numpy as np
import pytest
import torch

from vlfcode.codec import (
    CodecConfig,
    FeedbackCodec,
    PowerNormalizer,
    SelfAttention,
    build_codec,
    build_decoder_knowledge,
    build_encoder_knowledge,
    init_decoder_knowledge,
    init_encoder_knowledge,
    load_checkpoint,
    save_checkpoint,
    update_encoder_knowledge,
    write_prev_beliefs,
    write_received_slot,
)
from vlfcode.errors import CheckpointError, ConfigurationError, ProtocolError
from vlfcode.message import partition_bits

TINY = CodecConfig(Q=4, m=2, tau_max=5, latent_dim=16, tau_vd=2)


def test_config_validation_and_dims():
    assert TINY.enc_in_dim == 2 + 2 * 4
    assert TINY.dec_in_dim == 5 + 4
    assert TINY.n_patterns == 4
    with pytest.raises(ConfigurationError):
        CodecConfig(Q=0, m=2, tau_max=5)
    with pytest.raises(ConfigurationError):
        CodecConfig(Q=4, m=2, tau_max=5, variant="X")
    with pytest.raises(ConfigurationError):
        CodecConfig(Q=4, m=2, tau_max=5, dtype="float16")


def test_build_codec_seeded_and_dtype():
    a = build_codec(TINY, seed=1)
    b = build_codec(TINY, seed=1)
    c = build_codec(TINY, seed=2)
    for (ka, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert any(
        not torch.equal(va, vc)
        for (_, va), (_, vc) in zip(a.state_dict().items(), c.state_dict().items())
    )
    assert next(a.parameters()).dtype == torch.float64
    f32 = build_codec(CodecConfig(Q=4, m=2, tau_max=5, dtype="float32"), seed=1)
    assert next(f32.parameters()).dtype == torch.float32


def test_extractor_depth_switch():
    codec = build_codec(TINY, seed=0)
    x = torch.randn(2, TINY.Q, TINY.enc_in_dim, dtype=torch.float64)
    early = codec.encoder.extract(x, TINY.tau_vd)
    late = codec.encoder.extract(x, TINY.tau_vd + 1)
    assert early.shape == late.shape == (2, TINY.Q, TINY.latent_dim)
    assert not torch.allclose(early, late)
    shallow_again = codec.encoder.extract(x, 1)
    assert torch.equal(early, shallow_again)
    with pytest.raises(ProtocolError):
        codec.encoder.extract(x, 0)


def test_attention_rows_sum_to_one_over_all_sources():
    attn = SelfAttention(8).to(torch.float64)
    lat = torch.randn(3, 6, 8, dtype=torch.float64)
    mixed, rho = attn(lat)
    assert mixed.shape == lat.shape
    assert rho.shape == (3, 6, 6)
    assert torch.allclose(rho.sum(dim=-1), torch.ones(3, 6, dtype=torch.float64), atol=1e-12)
    assert (rho > 0).all()


def test_attention_uniform_on_equal_latents():
    # Identical latents across groups give exactly uniform weights 1/Q.
    attn = SelfAttention(8).to(torch.float64)
    lat = torch.randn(1, 1, 8, dtype=torch.float64).expand(1, 5, 8)
    _, rho = attn(lat)
    assert torch.allclose(rho, torch.full((1, 5, 5), 0.2, dtype=torch.float64), atol=1e-12)


def test_permutation_equivariance_with_zero_positions():
    codec = build_codec(TINY, seed=3)
    with torch.no_grad():
        codec.encoder.position.zero_()
    know = torch.randn(1, TINY.Q, TINY.enc_in_dim, dtype=torch.float64)
    perm = torch.tensor([2, 0, 3, 1])
    raw, _ = codec.encoder(know, 1)
    raw_p, _ = codec.encoder(know[:, perm], 1)
    assert torch.allclose(raw_p, raw[:, perm], atol=1e-10)
    # With a non-zero position embedding the symmetry is (generically) broken.
    with torch.no_grad():
        codec.encoder.position.normal_(std=1.0)
    raw2, _ = codec.encoder(know, 1)
    raw2_p, _ = codec.encoder(know[:, perm], 1)
    assert not torch.allclose(raw2_p, raw2[:, perm], atol=1e-6)


def test_decoder_outputs_probability_rows():
    codec = build_codec(TINY, seed=4)
    know = torch.randn(3, TINY.Q, TINY.dec_in_dim, dtype=torch.float64)
    beliefs, rho = codec.decode_round(know, 2)
    assert beliefs.shape == (3, TINY.Q, TINY.n_patterns)
    assert (beliefs > 0).all()
    assert torch.allclose(beliefs.sum(-1), torch.ones(3, TINY.Q, dtype=torch.float64), atol=1e-12)
    assert rho.shape == (3, TINY.Q, TINY.Q)


def test_power_normalizer_train_and_infer():
    pn = PowerNormalizer(tau_max=3, momentum=1.0).to(torch.float64)
    raw = torch.tensor([[3.0, 5.0, 7.0, 9.0]], dtype=torch.float64)
    active = torch.ones(1, 4, dtype=torch.bool)
    out = pn(raw, 1, active, mode="train")
    assert abs(out.mean().item()) < 1e-12
    assert abs(out.pow(2).mean().item() - 1.0) < 1e-6
    # momentum=1.0 copies the batch stats; inference then reproduces them.
    out2 = pn(raw, 1, active, mode="infer")
    assert torch.allclose(out, out2, atol=1e-9)
    assert (pn.running_std > 0).all()


def test_power_normalizer_active_only_stats():
    pn = PowerNormalizer(tau_max=1, momentum=1.0).to(torch.float64)
    raw = torch.tensor([[1.0, -1.0, 100.0]], dtype=torch.float64)
    active = torch.tensor([[True, True, False]])
    out = pn(raw, 1, active, mode="train")
    # Stats from the two active symbols only: mean 0, var 1.
    assert torch.allclose(out[0, :2], torch.tensor([1.0, -1.0], dtype=torch.float64), atol=1e-6)
    with pytest.raises(ProtocolError):
        pn(raw, 1, torch.zeros(1, 3, dtype=torch.bool), mode="train")


def test_power_normalizer_no_update_switch():
    pn = PowerNormalizer(tau_max=2).to(torch.float64)
    before = pn.running_mean.clone()
    raw = torch.randn(4, 3, dtype=torch.float64) * 5 + 2
    pn(raw, 1, torch.ones(4, 3, dtype=torch.bool), mode="train", update_running=False)
    assert torch.equal(pn.running_mean, before)


def test_encode_round_zeroes_frozen_groups():
    codec = build_codec(TINY, seed=5)
    bits = torch.randint(0, 2, (2, TINY.Q, TINY.m))
    know = init_encoder_knowledge(bits, TINY)
    active = torch.tensor([[True, True, False, True], [True, False, False, True]])
    x, rho = codec.encode_round(know, 1, active, mode="train", update_running=False)
    assert x.shape == (2, TINY.Q)
    assert (x[~active] == 0).all()
    assert (x[active] != 0).all()
    assert rho.shape == (2, TINY.Q, TINY.Q)


def test_encoder_knowledge_slots():
    bits = torch.tensor([[[0, 1], [1, 1], [0, 0], [1, 0]]])
    know = init_encoder_knowledge(bits, TINY)
    assert know.shape == (1, 4, TINY.enc_in_dim)
    assert torch.equal(
        know[0, :, :2],
        torch.tensor([[-1.0, 1.0], [1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]], dtype=torch.float64),
    )
    assert (know[0, :, 2:] == 0).all()
    x = torch.tensor([[0.5, -0.5, 1.5, 2.5]], dtype=torch.float64)
    fb = torch.tensor([[5.0, 6.0, 7.0, 8.0]], dtype=torch.float64)
    active = torch.tensor([[True, True, False, True]])
    know2 = update_encoder_knowledge(know, x, fb, 1, active, TINY)
    # Slot for round 1: sent at column m, feedback at column m + (tau_max-1).
    assert torch.equal(know2[0, :, 2], torch.tensor([0.5, -0.5, 0.0, 2.5], dtype=torch.float64))
    assert torch.equal(know2[0, :, 2 + 4], torch.tensor([5.0, 6.0, 0.0, 8.0], dtype=torch.float64))
    # Original tensor untouched (functional update).
    assert (know[0, :, 2:] == 0).all()
    with pytest.raises(ProtocolError):
        update_encoder_knowledge(know2, x, fb, TINY.tau_max, active, TINY)


def test_decoder_knowledge_slots():
    know = init_decoder_knowledge(2, TINY)
    assert know.shape == (2, 4, TINY.dec_in_dim)
    assert (know[:, :, : TINY.tau_max] == 0).all()
    assert torch.allclose(know[:, :, TINY.tau_max :], torch.full((2, 4, 4), 0.25, dtype=torch.float64))
    y = torch.tensor([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]], dtype=torch.float64)
    active = torch.tensor([[True, False, True, True], [True, True, True, True]])
    know2 = write_received_slot(know, y, 2, active, TINY)
    assert torch.equal(know2[0, :, 1], torch.tensor([1.0, 0.0, 3.0, 4.0], dtype=torch.float64))
    assert torch.equal(know2[1, :, 1], y[1])
    beliefs = torch.rand(2, 4, 4, dtype=torch.float64)
    know3 = write_prev_beliefs(know2, beliefs, active, TINY)
    assert torch.allclose(know3[0, 1, TINY.tau_max :], torch.full((4,), 0.25, dtype=torch.float64))
    assert torch.allclose(know3[0, 0, TINY.tau_max :], beliefs[0, 0])


def test_one_shot_encoder_rebuild_matches_incremental():
    # A group frozen in round t* keeps slots 1..t*-1 only.
    rng = np.random.default_rng(0)
    block = partition_bits(rng.integers(0, 2, size=8), 4)
    sent = rng.normal(size=(3, 4))
    fb = rng.normal(size=(3, 4))
    stop = np.array([2, 0, 3, 0])  # groups 0 and 2 froze in rounds 2 and 3
    know = build_encoder_knowledge(block, sent, fb, 4, stop, TINY)
    # Incremental: active-after-round-t rows get slot t.
    bits = torch.from_numpy(block.groups).unsqueeze(0)
    inc = init_encoder_knowledge(bits, TINY)
    for t in range(1, 4):
        active = torch.from_numpy((stop == 0) | (t <= stop - 1)).unsqueeze(0)
        inc = update_encoder_knowledge(
            inc,
            torch.from_numpy(sent[t - 1]).unsqueeze(0),
            torch.from_numpy(fb[t - 1]).unsqueeze(0),
            t,
            active,
            TINY,
        )
    assert torch.allclose(know, inc[0], atol=0)
    # Group 0 froze in round 2: slot 1 filled, slot 2 empty despite having transmitted.
    assert know[0, 2] != 0
    assert know[0, 3] == 0
    # Group 2 froze in round 3: slots 1, 2 filled, slot 3 empty.
    assert know[2, 3] != 0 and know[2, 4] == 0


def test_one_shot_decoder_rebuild():
    rng = np.random.default_rng(1)
    received = rng.normal(size=(3, 4))
    prev = rng.dirichlet(np.ones(4), size=4)
    stop = np.array([2, 0, 0, 0])
    know = build_decoder_knowledge(received, prev, 4, stop, TINY)
    # Frozen-at-2 group received through round 2 (slots 1 and 2), not round 3.
    assert know[0, 0] != 0 and know[0, 1] != 0 and know[0, 2] == 0
    assert know[1, 2] != 0
    assert torch.allclose(know[:, TINY.tau_max :], torch.as_tensor(prev, dtype=torch.float64))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    codec = build_codec(TINY, seed=9)
    with torch.no_grad():
        codec.power.running_mean.add_(0.25)
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, codec, extra_meta={"note": "t", "first_decode_round": 2})
    loaded, meta = load_checkpoint(path)
    assert meta["Q"] == 4 and meta["note"] == "t" and meta["first_decode_round"] == 2
    for (k, a), (_, b) in zip(codec.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), k
    know = torch.randn(2, TINY.Q, TINY.dec_in_dim, dtype=torch.float64)
    out_a, _ = codec.decode_round(know, 1)
    out_b, _ = loaded.decode_round(know, 1)
    assert torch.equal(out_a, out_b)


def test_checkpoint_shape_validation(tmp_path):
    codec = build_codec(TINY, seed=9)
    path = str(tmp_path / "ck.npz")
    save_checkpoint(path, codec)
    data = dict(np.load(path))
    key = "state.encoder.position"
    data[key] = data[key][:, :-1]
    np.savez(path, **data)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
    data.pop(key)
    np.savez(path, **data)
    with pytest.raises(CheckpointError, match="missing array"):
        load_checkpoint(path)
