"""
Reusing a trained network across strikes
========================================

Neighbouring strikes have similar optimal controls, so a network trained
for one strike is a good starting point for the next.  Warm-started runs
should need fewer epochs before the stopping rule fires.
"""
from neuralcv import Call, SchemeSpec, build_gbm
from neuralcv.cvtrain import TrainConfig, coarse_scheme, first_pass, train

model = build_gbm(0.02, 0.3)
scheme = SchemeSpec("euler", 3.0 / 100)
cfg = TrainConfig(M_r=4000, batch_size=500, max_epochs=10, hidden_size=20, eps_tol=1e-3, seed=7)
coarse = coarse_scheme(model, scheme.h, cfg.step_factor)

strikes = [0.9, 1.0, 1.1, 1.2]
cold, warm = [], []
prev = None
for K in strikes:
    data = first_pass(model, Call(K), coarse, cfg.M_r, seed=7)
    c = train(data, cfg, fine_h=scheme.h)
    w = train(data, cfg, fine_h=scheme.h, warm_start=prev) if prev is not None else c
    cold.append(c.epochs_run)
    warm.append(w.epochs_run)
    print("K=%.1f  cold: %2d epochs, var %.2e | warm: %2d epochs, var %.2e"
          % (K, c.epochs_run, c.best_variance, w.epochs_run, w.best_variance))
    prev = w.params

print("total epochs  cold %d  warm %d" % (sum(cold), sum(warm)))
