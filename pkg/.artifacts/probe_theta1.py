"""Fine-tune the calibrated checkpoint with a flat loss window, then re-measure."""
import sys, time
import numpy as np, torch

sys.path.insert(0, "/root/pkg/src")
torch.set_num_threads(1)
from vlfcode.channels import ChannelConfig, NoiseSource
from vlfcode.codec import load_checkpoint
from vlfcode.protocol import run_batch
from vlfcode.training import preset, train_phase2

codec, _ = load_checkpoint("/root/pkg/.artifacts/calib/phase2/checkpoint.npz")
cfg = preset(
    "desk-R", seed=31, phase="finetune", steps=1200, batch_size=384, lr=3e-4,
    eta_f_db=2.0, gamma=1 - 1e-3, threshold_choices=(), theta=1.0, offset_c=0.0,
)
t0 = time.time()
codec, hist = train_phase2(codec, cfg, out_dir="/root/pkg/.artifacts/probe1")
print(f"finetune {time.time()-t0:.0f}s; loss tail:", [round(h["loss"], 3) for h in hist[-5:]], flush=True)

chan = ChannelConfig(eta_f_db=2.0)
bits_src, noise_parent = NoiseSource(99).spawn(2)
kids = noise_parent.spawn(5)
n_err = n_tot = sess_forced = 0
gerr_by_stop = np.zeros(11); gcnt_by_stop = np.zeros(11)
for kid in kids:
    bits = bits_src.bits(2000, 48).numpy().astype(np.uint8)
    bt = run_batch(codec, bits, chan, variant="R", seed=kid, gamma=1 - 1e-3, first_decode_round=5)
    n_err += int(bt.errors.sum()); n_tot += 2000
    sess_forced += int((bt.termination == "tau_max_forced").sum())
    est = bt.estimates.reshape(2000, 16, 3); tx = bt.bits.reshape(2000, 16, 3)
    gerr = (est != tx).any(axis=2)
    np.add.at(gcnt_by_stop, bt.stop_rounds, 1)
    np.add.at(gerr_by_stop, bt.stop_rounds, gerr)
print(f"BLER {n_err}/{n_tot} = {n_err/n_tot:.4g}; forced sessions {sess_forced/n_tot:.3f}")
for r in range(1, 11):
    if gcnt_by_stop[r]:
        print(f"  tau*={r}: n={int(gcnt_by_stop[r]):7d} err={int(gerr_by_stop[r]):5d} rate={gerr_by_stop[r]/max(gcnt_by_stop[r],1):.2e}")
