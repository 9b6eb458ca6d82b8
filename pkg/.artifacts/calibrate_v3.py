"""Continue fine-tuning the v2 checkpoint: 3000 more adaptive-stop steps."""
import pathlib
import time

import numpy as np

from vlfcode.channels import ChannelConfig, NoiseSource
from vlfcode.codec import load_checkpoint, save_checkpoint
from vlfcode.protocol import run_batch
from vlfcode.training import preset, train_phase2

out = pathlib.Path("/root/pkg/.artifacts/calib3")
out.mkdir(parents=True, exist_ok=True)

t0 = time.time()
codec, meta = load_checkpoint("/root/pkg/.artifacts/calib2/phase2/checkpoint.npz")

cfg3 = preset(
    "desk-R", seed=9, phase="finetune", steps=3000, lr=1e-4, lr_floor_frac=0.05,
    eta_f_db=2.0, gamma=1 - 1e-3, threshold_choices=(),
)
t1 = time.time()
codec, h3 = train_phase2(codec, cfg3, out_dir=str(out / "phase3"))
print(f"phase3 {time.time()-t1:.0f}s; loss tail:", [round(h["loss"], 3) for h in h3[-5:]], flush=True)

chan = ChannelConfig(eta_f_db=2.0)
bits_src, noise_parent = NoiseSource(99).spawn(2)
kids = noise_parent.spawn(5)
n_err = n_tot = sess_forced = 0
gerr_by_stop = np.zeros(11); gcnt_by_stop = np.zeros(11)
uses = []
t2 = time.time()
for kid in kids:
    bits = bits_src.bits(2000, 48).numpy().astype(np.uint8)
    bt = run_batch(codec, bits, chan, variant="R", seed=kid, gamma=1 - 1e-3, first_decode_round=5)
    n_err += int(bt.errors.sum()); n_tot += 2000
    sess_forced += int((bt.termination == "tau_max_forced").sum())
    est = bt.estimates.reshape(2000, 16, 3); tx = bt.bits.reshape(2000, 16, 3)
    gerr = (est != tx).any(axis=2)
    np.add.at(gcnt_by_stop, bt.stop_rounds, 1)
    np.add.at(gerr_by_stop, bt.stop_rounds, gerr)
    uses.append(bt.total_channel_uses())
uses = np.concatenate(uses)
print(f"eval {time.time()-t2:.0f}s: BLER {n_err}/{n_tot} = {n_err/n_tot:.4g}; forced {sess_forced/n_tot:.3f}; "
      f"E[R]={np.mean(48.0/uses):.4f}", flush=True)
for r in range(1, 11):
    if gcnt_by_stop[r]:
        print(f"  tau*={r}: n={int(gcnt_by_stop[r]):7d} err={int(gerr_by_stop[r]):5d} rate={gerr_by_stop[r]/max(gcnt_by_stop[r],1):.2e}")
save_checkpoint(str(out / "final.npz"), codec)
print(f"total wall {time.time()-t0:.0f}s; saved", out / "final.npz", flush=True)
