"""
Denoising channel estimates with a small diffusion model
========================================================

Train a noise predictor on site channels (about half a minute), then
enhance pilot estimates by starting the reverse chain at the step whose
noise level matches the pilot noise.
"""

import numpy as np

from dmce.channel import CsiEstimate, LinkConfig, sample_channels
from dmce.diffusion import enhance_csi, linear_schedule, select_entry_step, train_noise_predictor
from dmce.metrics import nmse_db, snr_db_to_noise_variance
from dmce.neuralnet import TrainConfig

link = LinkConfig()
schedule = linear_schedule()

# the forward process covers noise ratios from 1e-4 up to far above 1
ratio = schedule.noise_ratio()
print("noise ratio at t=1, 100, 1000:", ratio[0], ratio[99], ratio[-1])

sampler = lambda rng, n: sample_channels(link, rng, n)
history = []
cfg = TrainConfig(learning_rate=0.05, decay=0.97, epochs=60, batch_size=128, steps_per_epoch=200, rng_seed=1)
pred = train_noise_predictor(sampler, schedule, cfg, history=history)
print("loss first/last epoch: %.3f / %.3f" % (history[0], history[-1]))

rng = np.random.default_rng(2)
h = sample_channels(link, rng, 1000)
for snr in (-4, 0, 4, 8, 12):
    var = snr_db_to_noise_variance(snr)
    h_hat = h + np.sqrt(var / 2) * (rng.standard_normal(h.shape) + 1j * rng.standard_normal(h.shape))
    h_tilde = enhance_csi(pred, CsiEstimate(h_hat, var), schedule, rng)
    t_s = select_entry_step(var / pred.signal_power, schedule)
    print(f"{snr:3d} dB  t_s={t_s:4d}  NMSE initial {np.mean(nmse_db(h_hat, h)):6.1f} dB"
          f"  enhanced {np.mean(nmse_db(h_tilde, h)):6.1f} dB")
