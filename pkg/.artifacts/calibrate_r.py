"""Desk-R calibration: phase 1 + phase 2, then BLER at the 2 dB operating point."""
import pathlib
import sys
import time

import numpy as np
import torch

sys.path.insert(0, "/root/pkg/src")
from vlfcode.channels import ChannelConfig
from vlfcode.protocol import run_batch
from vlfcode.training import compute_tau_plus, mu_schedule, preset, train_phase1, train_phase2

torch.set_num_threads(1)
out = pathlib.Path("/root/pkg/.artifacts/calib")
out.mkdir(parents=True, exist_ok=True)

t0 = time.time()
cfg1 = preset("desk-R", seed=7)
codec, hist1 = train_phase1(cfg1, out_dir=str(out / "phase1"))
print(f"phase1 {time.time()-t0:.0f}s; losses tail:", [round(h["loss"], 2) for h in hist1[-5:]], flush=True)

cfg2 = preset(
    "desk-R", seed=8, phase="finetune", steps=400, lr=1e-4,
    eta_f_db=2.0, gamma=1 - 1e-3, threshold_choices=(),
)
t1 = time.time()
codec, hist2 = train_phase2(codec, cfg2, out_dir=str(out / "phase2"))
print(f"phase2 {time.time()-t1:.0f}s; losses tail:", [round(h["loss"], 2) for h in hist2[-5:]], flush=True)

# criterion-5 style eval: 10^4 sessions, 2 dB noiseless feedback, gamma = 1-1e-3
gamma = 1 - 1e-3
tau_plus = compute_tau_plus(2.0, 3, mu_schedule("R", gamma))
print("tau_plus =", tau_plus, flush=True)
chan = ChannelConfig(eta_f_db=2.0)
rng = np.random.default_rng(12345)
n_err = n_tot = 0
uses = []
t2 = time.time()
for chunk in range(5):
    bits = rng.integers(0, 2, size=(2000, 48))
    tr = run_batch(codec, bits, chan, variant="R", seed=1000 + chunk,
                   gamma=gamma, first_decode_round=tau_plus)
    n_err += int(tr.errors.sum())
    n_tot += tr.errors.size
    uses.append(tr.total_channel_uses())
uses = np.concatenate(uses)
rate = 48.0 / uses
print(f"eval {time.time()-t2:.0f}s: BLER={n_err}/{n_tot}={n_err/n_tot:.4g} "
      f"mean_rate={rate.mean():.4f} mean_uses={uses.mean():.1f}", flush=True)
print(f"total wall {time.time()-t0:.0f}s")
