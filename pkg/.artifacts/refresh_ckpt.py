"""Apply the deployment-point power-stats refresh to a checkpoint.

Usage: python3 refresh_ckpt.py <in.npz> <out.npz>

Uses the same refresh parameters as the acceptance fixture (_REFRESH):
gamma = 1 - 1e-3, n_batches = 80, batch_size = 256, seed = 20, at 2 dB.
"""
import sys

from vlfcode.channels import ChannelConfig
from vlfcode.codec import load_checkpoint, save_checkpoint
from vlfcode.training import refresh_power_stats

src, dst = sys.argv[1], sys.argv[2]
codec, meta = load_checkpoint(src)
refresh_power_stats(
    codec,
    ChannelConfig(eta_f_db=2.0),
    variant="R",
    gamma=1 - 1e-3,
    n_batches=80,
    batch_size=256,
    seed=20,
)
save_checkpoint(dst, codec)
print(f"refreshed {src} -> {dst}")
