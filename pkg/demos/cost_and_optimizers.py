"""Predicted SLQ cost under sharding, and curvature-driven Nesterov on a rippled bowl.

    python3 demos/cost_and_optimizers.py
"""

import math

from shardhess.costmodel import CostParams, compare_step_times, cost_table
from shardhess.objectives import RippledSpec, make_rippled
from shardhess.optbench import adaptive_nesterov, grid_search_lr

# A single-rank profile rescaled to more ranks. Compute shrinks, but at this
# model size the new all-gathers and reduce-scatters cost more than it saves.
profile = CostParams(alpha=1e-5, beta=1e-11, gamma=1e-12, F_fwd=1e9, F_bwd=2e9, P=1e8, L=24,
                     T_scalar=2e-5, c0=4, c1=2)
print("  R   r     t_hvp[s]   t_slq[s] (s=8, m=100)")
for row in cost_table(profile, ranks=(1, 2, 8, 32), windows=(0, 5), probes=(8,), steps=(100,)):
    print(f"{row['R']:3d} {row['r']:3d} {row['t_hvp']:12.4g} {row['t_slq']:10.4g}")

step = compare_step_times(0.080, 0.020, 0.055)
print(f"\nDP {step.t_dp * 1e3:.0f} ms vs FSDP {step.t_fsdp * 1e3:.0f} ms, "
      f"overhead {step.relative_overhead:.2f}")

surface = make_rippled(RippledSpec(b=0.05, omega=40.0, dims=2))
print("\nrippled bowl (B=0.05, omega=40), start (2, 2), 500 steps")
for method in ("gd", "momentum", "adam"):
    lr, traj = grid_search_lr(surface, method)
    print(f"  {method:8s} lr {lr:.3g}: final loss {traj.final_loss:.3g}")

# Pointwise curvature sees the ripples; a second difference over one ripple
# period sees the bowl underneath.
for mode in ("pointwise", ("fd_averaged", 2 * math.pi / 40)):
    traj = adaptive_nesterov(surface, mode)
    print(f"  nesterov {traj.meta['curvature_mode']:11s}: final loss {traj.final_loss:.3g}, "
          f"ends at {[round(float(c), 3) for c in traj.iterates[-1]]}")
