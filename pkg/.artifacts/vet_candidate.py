"""Vet a checkpoint against the trained-model acceptance criteria (5-8).

Usage: python3 vet_candidate.py <checkpoint.npz> [eval_seed]
"""
import sys

from vlfcode.channels import ChannelConfig
from vlfcode.codec import load_checkpoint
from vlfcode.evaluate import (
    dynamics_experiment,
    evaluate_operating_point,
    monotone_up_to_overlap,
    sweep,
)

path = sys.argv[1]
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 501
codec, _ = load_checkpoint(path)
chan = ChannelConfig(eta_f_db=2.0)

smoke = evaluate_operating_point(
    codec, chan, variant="R", n_sessions=10_000, seed=seed,
    gamma=1 - 1e-3, chunk_size=2000,
)
print(f"[C5] BLER={smoke.bler:.4f} CI=({smoke.bler_lo:.4f},{smoke.bler_hi:.4f}) "
      f"E[R]={smoke.mean_rate:.4f} -> {'PASS' if smoke.bler <= 1e-2 and smoke.mean_rate >= 0.3 else 'FAIL'}")

pts = sweep(codec, chan, variant="R", n_sessions=10_000, seed=502,
            gamma_list=[1 - 1e-3, 1 - 1e-4, 1 - 1e-5], chunk_size=2000)
rates = [p.mean_rate for p in pts]
blers = [p.bler for p in pts]
r_ok = monotone_up_to_overlap(rates, [p.rate_interval() for p in pts])
b_ok = monotone_up_to_overlap(blers, [p.bler_interval() for p in pts])
print(f"[C6] E[R]={['%.4f' % v for v in rates]} BLER={['%.4f' % v for v in blers]} "
      f"rate_mono={r_ok} bler_mono={b_ok} -> {'PASS' if r_ok and b_ok else 'FAIL'}")

dyn = dynamics_experiment(codec, chan, rounds=(1, 4), n_trials=10_000, seed=503, chunk_size=1000)
s1, s4 = dyn.separation[1], dyn.separation[4]
print(f"[C7] sep(1)={s1:.4g} sep(4)={s4:.4g} ratio={s1 / s4 if s4 else float('inf'):.1f} "
      f"-> {'PASS' if s1 >= 10 * s4 else 'FAIL'}")

powers = [smoke.mean_power] + [p.mean_power for p in pts]
print(f"[C8] max_power={max(powers):.4f} -> {'PASS' if max(powers) <= 1.02 else 'FAIL'}")
