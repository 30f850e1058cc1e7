"""Sequential calibration of the sinusoidal model, one method at a time.

Run with ``python demos/sine_walkthrough.py``. Takes a few seconds.

The field data are ten noisy observations of sin(10x - 5 theta) at five design
inputs with theta = pi/5. Each method starts from the same ten simulations and
acquires twenty more; we then compare how well the final emulator recovers the
posterior of theta and where the acquired inputs landed.
"""
import numpy as np

from seqcal import metrics
from seqcal.designer import DesignConfig, initial_design, run
from seqcal.testbeds import make_field_data, sine2d

model = sine2d()
rng = np.random.default_rng(7)
fe = make_field_data(model, rng)
init = initial_design(fe, 10, rng)
theta_ref, x_ref = model.theta_ref(), model.x_ref()

# the "true" posterior uses the simulator itself instead of an emulator
truth = metrics.true_posterior(fe, theta_ref, model.eval_scaled)
print(f"field inputs: {np.unique(fe.field_x).round(2)}")
print(f"true posterior mode: theta = {theta_ref[np.argmax(truth), 0]:.3f} (generating value {np.pi / 5:.3f})\n")

for method in ("Ap", "Ay", "Lhs"):
    cfg = DesignConfig(n0=10, n=20, acquisition=method, theta_ref=theta_ref, x_ref=x_ref, seed=1)
    hist = run(model.simulator(), fe, cfg, init_design=init)
    e = hist.emulator
    mad_p = metrics.mad_p(e, fe, theta_ref, truth=truth)
    mad_y = metrics.mad_y(e, fe, x_ref, hist.theta_hat, model.field_mean_scaled(x_ref))
    on_field = np.isin(hist.acquired_x[:, 0].round(12), np.unique(fe.field_x)).mean()
    print(f"{method:4s} MADp {mad_p:.2e}  MADy {mad_y:.3f}  theta_hat {hist.theta_hat[0]:.3f}  "
          f"x on field inputs {on_field:.0%}  theta IQR "
          f"{np.subtract(*np.quantile(hist.acquired_theta[:, 0], [0.75, 0.25])):.3f}")

# Ap keeps x on the five field inputs and concentrates theta, which is what the
# posterior needs. Ay spreads x over the design space to predict the field mean
# at unseen inputs. LHS fills the whole box and learns neither quickly.
