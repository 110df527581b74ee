"""
Call on the max of two assets under a singular Levy process
===========================================================

Both log-prices load on one tempered stable-like jump process with infinite
activity.  Jumps smaller than eps are replaced by a Gaussian term, the
large ones are sampled exactly.  We compare the neural control variate
with multilevel Monte Carlo, which is the usual alternative here.

This is a scaled-down version of configs/levy_call_on_max_2d.yaml.
"""
import numpy as np

from neuralcv import CallOnMax, SingularTempered, build_exp_levy, default_scheme
from neuralcv.cvtrain import TrainConfig, coarse_scheme, first_pass, train
from neuralcv.estimators import cv_mc, mlmc, vanilla_mc

T = 3.0
nu = SingularTempered(c_minus=1.0, c_plus=1.0, alpha=0.5, mu=2.0, eps=1e-2)
sigma = np.array([[0.15, 0.0], [0.06, 0.1375]])
model = build_exp_levy(0.02, sigma, [0.2, 0.2], nu, T=T)
payoff = CallOnMax(1.0)
h = T / 80
scheme = default_scheme(model, h)

print("large-jump intensity above eps: %.2f per year" % model.derived.lambda_eps)

cfg = TrainConfig(M_r=3000, batch_size=500, max_epochs=4, hidden_size=20, eps_tol=5e-3, seed=5)
data = first_pass(model, payoff, coarse_scheme(model, h, cfg.step_factor), cfg.M_r, seed=5)
net = train(data, cfg, fine_h=h)
print("training variance:", np.round(net.history, 4))

tol = 5e-3
plain = vanilla_mc(model, scheme, payoff, tol, seed=6)
cv = cv_mc(model, net, scheme, payoff, tol, seed=6)
ml = mlmc(model, payoff, h, 4, 3, tol, seed=6)

for e in (plain, cv, ml):
    print("%-8s %.4f +- %.4f  %.1fs" % (e.method, e.mean, e.half_width, e.wall_time))
print("MLMC level variances:", ["%.1e" % v for v in ml.info["V_l"]])
