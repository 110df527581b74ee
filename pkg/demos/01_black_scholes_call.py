"""
Learning a control variate for a Black-Scholes call
===================================================

We train a small network on coarse paths, then use it as a martingale
control on fine paths and compare against plain Monte Carlo.
The exact optimal control is known here, so we can also see how close
the network gets.
"""
import numpy as np

from neuralcv import Call, SchemeSpec, build_gbm
from neuralcv.cvtrain import TrainConfig, coarse_scheme, first_pass, replay_with_function, train, variance_loss
from neuralcv.estimators import cv_mc, vanilla_mc
from neuralcv.oracles import bs_call, bs_optimal_control

r, sigma, T, K = 0.02, 0.3, 3.0, 1.0
model = build_gbm(r, sigma, T=T)
payoff = Call(K)
scheme = SchemeSpec("euler", T / 100)

# a smaller run than the desk configs so this finishes in about a minute
cfg = TrainConfig(M_r=4000, batch_size=500, max_epochs=8, hidden_size=20, eps_tol=2e-3, seed=1)

###############################################################################
# First pass: coarse paths with zero control, stored for replay

data = first_pass(model, payoff, coarse_scheme(model, scheme.h, cfg.step_factor), cfg.M_r, seed=1)
print("stored paths:", data.M, " replay rows:", data.n_rows)

###############################################################################
# Train.  history[0] is the variance before any update.

net = train(data, cfg, fine_h=scheme.h)
print("variance per epoch:", np.round(net.history, 5))
print("epochs run:", net.epochs_run, " stopped by rule:", net.stopped_by_rule)

# the analytic control on the same stored paths, for comparison
g_star = replay_with_function(data, lambda t, x: bs_optimal_control(t, x[:, 0], K, r, sigma, T)[:, None])
print("variance with exact control on the same paths: %.2e" % variance_loss(g_star)[0])

###############################################################################
# Second pass: fresh fine paths

tol = 1e-3
plain = vanilla_mc(model, scheme, payoff, tol, seed=2)
cv = cv_mc(model, net, scheme, payoff, tol, seed=2)
exact = bs_call(1.0, K, r, sigma, T)

for e in (plain, cv):
    print("%-8s %.5f +- %.5f   M=%-7d var=%.3e  %.1fs"
          % (e.method, e.mean, e.half_width, e.M, e.variance, e.wall_time))
print("closed form    %.5f   (Euler bias is of order h)" % exact)
print("variance reduction: %.0fx" % (plain.variance / cv.variance))
