"""How the finite-difference step trades truncation against rounding.

Sweeps the step of the gradient-difference HVP on a rippled 1-D curve with
gradients rounded to fp32 and to bf16, then does the same for the
function-value second difference under injected noise.

    python3 demos/step_size.py
"""

import numpy as np

from shardhess.fdhvp import NoiseModel, fd_error_sweep, optimal_epsilon
from shardhess.objectives import RippledSpec, make_rippled
from shardhess.precision import machine_eps

curve = make_rippled(RippledSpec(b=0.05, omega=4.0, dims=1, a=1.0))
x, v = [0.7], [1.0]

print("unit-norm step rule:")
for mode in ("fp32", "bf16"):
    print(f"  {mode}: eps* = {optimal_epsilon(NoiseModel(d3_grad_norm=1.0, grad_norm=1.0), machine_eps(mode)):.3g}")

# Large steps pay the cubic truncation term, small steps pay rounding of the
# stored gradients. The crossover should sit near the predicted step.
print("\ngradient-difference HVP:")
for mode in ("fp32", "bf16"):
    sweep = fd_error_sweep(curve, x, v, np.logspace(-8, 0, 81), precision=mode)
    s = sweep.summary(upper=0.1)
    print(f"  {mode}: best eps {s['empirical_minimizer']:.3g} (predicted {s['predicted_epsilon']:.3g})",
          "slopes", None if s["slope_above"] is None else f"{s['slope_above']:+.2f} / {s['slope_below']:+.2f}")

# With noisy function values the best step moves as a fourth root of the noise.
print("\nnoisy second difference:")
for sigma in (1e-8, 1e-6, 1e-4):
    sweep = fd_error_sweep(curve, x, v, np.logspace(-5, 0, 61), sigma_f=sigma,
                           estimator="second_difference", trials=200, seed=1)
    print(f"  sigma {sigma:.0e}: best eps {sweep.minimizer():.3g} "
          f"(predicted {sweep.predicted_epsilon:.3g})")
