import math

import numpy as np
import pytest
import torch

from vlfcode.channels import (
    NOISELESS,
    ChannelConfig,
    NoiseSource,
    awgn_transmit,
    belief_scale,
    equalize,
    fading_transmit,
    feedback_scale,
    feedback_transmit,
    jakes_trajectory,
    load_fading_trajectory,
    pack_symbol_pairs,
    sample_fading_windows,
    snr_to_sigma2,
    write_fading_trajectory,
)
from vlfcode.errors import ConfigurationError, TrajectoryError


def test_snr_to_sigma2_frozen_values():
    # 10^(-eta/10): frozen reference points.
    assert snr_to_sigma2(0.0) == 1.0
    assert abs(snr_to_sigma2(1.0) - 0.7943282347242815) < 1e-15
    assert abs(snr_to_sigma2(10.0) - 0.1) < 1e-16
    assert abs(snr_to_sigma2(-3.0) - 1.9952623149688795) < 1e-14
    assert snr_to_sigma2(NOISELESS) == 0.0


def test_feedback_scale_frozen_values():
    assert abs(feedback_scale(0.01) - math.sqrt(1 / 1.01)) < 1e-15
    assert abs(feedback_scale(0.01) - 0.9950371902099892) < 1e-12
    assert abs(feedback_scale(1.0) - 0.7071067811865476) < 1e-15
    assert feedback_scale(0.0) == 1.0


def test_belief_scale_frozen_values():
    assert abs(belief_scale(3) - 8 / math.sqrt(7)) < 1e-15
    assert abs(belief_scale(3) - 3.0237157840738176) < 1e-12
    assert abs(belief_scale(2) - 4 / math.sqrt(3)) < 1e-14
    assert abs(belief_scale(1) - 2.0) < 1e-15


def test_noise_source_determinism_and_independence():
    a = NoiseSource(1234).normal(5, 3)
    b = NoiseSource(1234).normal(5, 3)
    assert torch.equal(a, b)
    c = NoiseSource(1235).normal(5, 3)
    assert not torch.equal(a, c)
    kids = NoiseSource(1234).spawn(2)
    k0 = kids[0].normal(4)
    k1 = kids[1].normal(4)
    assert not torch.equal(k0, k1)
    # Children replay deterministically too.
    kids2 = NoiseSource(1234).spawn(2)
    assert torch.equal(k0, kids2[0].normal(4))


def test_awgn_noiseless_is_exact():
    x = torch.randn(7, 3, dtype=torch.float64)
    y = awgn_transmit(x, 0.0, NoiseSource(0))
    assert torch.equal(y, x)


def test_awgn_statistics():
    ns = NoiseSource(7)
    x = torch.zeros(200_000, dtype=torch.float64)
    y = awgn_transmit(x, 0.5, ns)
    assert abs(y.var().item() - 0.5) < 0.01
    assert abs(y.mean().item()) < 0.01


def test_feedback_transmit_shapes_and_noiseless():
    p = torch.rand(4, 8, dtype=torch.float64)
    out = feedback_transmit(p, 0.0, NoiseSource(3))
    assert torch.equal(out, p)
    noisy = feedback_transmit(p, 0.3, NoiseSource(3))
    assert noisy.shape == p.shape and not torch.equal(noisy, p)


def test_channel_config_properties():
    cfg = ChannelConfig(eta_f_db=2.0, eta_b_db=NOISELESS)
    assert abs(cfg.sigma_f2 - 10 ** (-0.2)) < 1e-15
    assert cfg.sigma_b2 == 0.0
    assert cfg.noiseless_feedback
    with pytest.raises(ConfigurationError):
        ChannelConfig(eta_f_db=float("nan"))


def test_pack_equalize_roundtrip():
    x = torch.tensor([1.0, -2.0, 3.0, 0.5, -1.5], dtype=torch.float64)
    s = pack_symbol_pairs(x)
    assert s.shape == (3,)
    assert s[0] == 1.0 - 2.0j and s[2] == -1.5 + 0.0j
    h = torch.tensor([0.5 + 0.5j, 2.0 + 0.0j, 0.0 - 1.0j], dtype=torch.complex128)
    y = s * h
    back = equalize(y, h, 5)
    assert torch.allclose(back, x, atol=1e-12)


def test_fading_noiseless_recovers_symbols():
    x = torch.randn(6, dtype=torch.float64)
    h = torch.tensor([1.0 + 1.0j, 0.3 - 0.7j, 2.0 + 0.0j], dtype=torch.complex128)
    y = fading_transmit(x, h, 0.0, NoiseSource(0))
    assert torch.allclose(y, x, atol=1e-12)


def test_fading_effective_noise_variance():
    # Gain magnitude 0.5 with sigma^2 = 1 -> effective variance 4 per symbol.
    n = 100_000
    x = torch.zeros(n, 2, dtype=torch.float64)
    h = torch.full((n, 1), 0.5 + 0.0j, dtype=torch.complex128)
    y = fading_transmit(x, h, 1.0, NoiseSource(11))
    assert abs(y.var().item() - 4.0) < 0.1


def test_trajectory_file_roundtrip(tmp_path):
    g = np.array([[0.7 + 0.1j, -0.3 + 0.9j], [1.1 + 0.0j, 0.2 - 0.5j]])
    from vlfcode.channels import FadingTrajectory

    traj = FadingTrajectory(g)
    path = str(tmp_path / "traj.txt")
    write_fading_trajectory(path, traj)
    back = load_fading_trajectory(path)
    assert back.n_slots == 2 and back.n_subcarriers == 2
    assert np.array_equal(back.gains, g)


def test_trajectory_loader_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("no header\n0.1,0.2\n")
    with pytest.raises(TrajectoryError):
        load_fading_trajectory(str(p))
    p.write_text("#slots=2 subcarriers=1\n0.5,0.0\n")
    with pytest.raises(TrajectoryError, match="2 slots"):
        load_fading_trajectory(str(p))
    p.write_text("#slots=1 subcarriers=2\n0.5,0.0\n")
    with pytest.raises(TrajectoryError, match="line 2"):
        load_fading_trajectory(str(p))
    p.write_text("#slots=1 subcarriers=1\nxyz\n")
    with pytest.raises(TrajectoryError, match="line 2"):
        load_fading_trajectory(str(p))
    # Near-zero gain is rejected with its record named.
    p.write_text("#slots=2 subcarriers=1\n0.5,0.0\n0.0000001,0.0\n")
    with pytest.raises(TrajectoryError, match="slot 1"):
        load_fading_trajectory(str(p))


def test_jakes_trajectory_properties():
    traj = jakes_trajectory(256, 8, doppler=0.05, seed=3)
    assert traj.gains.shape == (256, 8)
    assert (np.abs(traj.gains) >= 1e-6).all()
    # Deterministic in the seed.
    again = jakes_trajectory(256, 8, doppler=0.05, seed=3)
    assert np.array_equal(traj.gains, again.gains)
    # Consecutive slots are correlated, far slots much less so.
    g = traj.gains[:, 0]
    lag1 = abs(np.corrcoef(np.abs(g[:-1]), np.abs(g[1:]))[0, 1])
    lag64 = abs(np.corrcoef(np.abs(g[:-64]), np.abs(g[64:]))[0, 1])
    assert lag1 > lag64


def test_sample_fading_windows_wraps():
    traj = jakes_trajectory(10, 2, seed=0)
    wins = sample_fading_windows(traj, 7, 64, NoiseSource(5))
    assert wins.shape == (64, 7, 2)
    # Every window row must exist in the trajectory (wrap-around indexing).
    flat = {complex(v) for v in traj.gains.reshape(-1)}
    assert {complex(v) for v in wins.reshape(-1)} <= flat
