"""
Merton jump-diffusion: controls for both noise sources
======================================================

With jumps the martingale control has two parts, one against the Brownian
increments and one against the compensated jump measure.  The network
outputs both.  The Merton series gives the exact price.
"""
import numpy as np

from neuralcv import Call, build_merton, default_scheme
from neuralcv.cvtrain import TrainConfig, coarse_scheme, first_pass, train
from neuralcv.estimators import cv_mc, vanilla_mc
from neuralcv.oracles import merton_call

r, sigma, lam, a, g, T = 0.02, 0.2, 1.0, -0.05, 0.3, 3.0
model = build_merton(r, sigma, lam, a, g, T=T)
scheme = default_scheme(model, T / 100)  # jump-adapted grid
print("scheme:", scheme.kind, " h =", scheme.h)

cfg = TrainConfig(M_r=4000, batch_size=500, max_epochs=6, hidden_size=20, eps_tol=2e-3, seed=3)

for K in (0.8, 1.0, 1.2):
    payoff = Call(K)
    data = first_pass(model, payoff, coarse_scheme(model, scheme.h, cfg.step_factor), cfg.M_r, seed=3)
    net = train(data, cfg, fine_h=scheme.h)
    plain = vanilla_mc(model, scheme, payoff, 2e-3, seed=4)
    cv = cv_mc(model, net, scheme, payoff, 2e-3, seed=4)
    ref = merton_call(1.0, K, r, sigma, lam, a, g, T)
    print("K=%.1f  exact %.5f | plain %.5f (M=%6d) | cv %.5f (M=%6d) | reduction %4.1fx | epochs %d"
          % (K, ref, plain.mean, plain.M, cv.mean, cv.M, plain.variance / cv.variance, net.epochs_run))

# which part of the control does the work?  the output columns follow the layout
print("layout:", net.layout.mode, " outputs per row:", net.layout.n_out)
out = net(np.full(5, 1.5), np.linspace(-0.5, 0.5, 5)[:, None])
print("controls at t=1.5 over a few log-prices:\n", np.round(out, 4))
