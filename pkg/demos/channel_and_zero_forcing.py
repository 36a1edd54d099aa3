"""
Channels, pilots and zero-forcing
=================================

Draw a few channels from each family, corrupt them with pilot noise and
watch how estimation error turns into symbol error after equalization.
"""

import numpy as np

from dmce.channel import LinkConfig, build_channel, estimate_csi, sample_channels, transmit
from dmce.linalg import crandn, solve_least_squares
from dmce.metrics import nmse_db, snr_db_to_noise_variance

rng = np.random.default_rng(0)

# each family keeps unit average power per entry
for mode in ("rayleigh", "ray_tracing", "site"):
    h = sample_channels(LinkConfig(channel_mode=mode), rng, 20000)
    print(f"{mode:12s} mean |h|^2 = {np.mean(np.abs(h) ** 2):.3f}")

# the site family has a strong deterministic part shared by every draw
link = LinkConfig()
h = build_channel(link, rng).h
print("one site channel:\n", np.round(h, 3))

# noiseless transmission is undone exactly by zero-forcing
x = crandn(rng, (2, 8))
y = transmit(h, x, 0.0, rng)
print("noiseless ZF error:", np.linalg.norm(solve_least_squares(h, y) - x))

# with noise, equalizing through an estimate adds a second error source
for snr in (0, 10, 20):
    sigma2 = snr_db_to_noise_variance(snr)
    y = transmit(h, x, sigma2, rng)
    est = estimate_csi(h, sigma2, rng)
    perfect = np.mean(np.abs(solve_least_squares(h, y) - x) ** 2)
    noisy = np.mean(np.abs(solve_least_squares(est.h_hat, y) - x) ** 2)
    print(f"{snr:3d} dB  CSI NMSE {nmse_db(est.h_hat, h):6.1f} dB  "
          f"symbol MSE perfect {perfect:.3f}  estimated {noisy:.3f}")
