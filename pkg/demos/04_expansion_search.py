"""Growing the input-perturbation box until verification first fails.

Starts from a small box of additive (speed, turn-rate) perturbations around
the safe controller output and scales it axis-wise until the sampled
verification verdict flips, keeping the last verified box.  That box later
becomes the learner's action range.
"""

import numpy as np

from saferl.boxes import IntervalBox
from saferl.controller import ControllerConfig, SafeController
from saferl.evasion import EvasionSource, TaskConfig
from saferl.verify import find_expansion_set

task = TaskConfig()
source = EvasionSource(task, lambda: SafeController(task, ControllerConfig()))

e_init = IntervalBox([-2e-4, -5e-3], [2e-4, 5e-3])
delta_f = np.array([10.0, 1.0])
print("initial box:", e_init)
print("growth fractions per iteration:", delta_f)

result = find_expansion_set(
    source,
    e_init,
    delta_f,
    source.robustness,
    n=25,  # reduced sample count to keep the demo quick
    epsilon=0.05,
    base_seed=1717,
    max_iters=10,
)

print("verified box:", result.box)
print("growth steps accepted:", result.growth_steps)
print("converged (a growth step failed):", result.converged)
print(
    "passing verification: rho_star = "
    f"{result.verified_report.rho_star:+.3f} with confidence "
    f"{result.verified_report.confidence:.3f}"
)
if result.failed_report is not None:
    print(
        "first failing candidate had rho_star = "
        f"{result.failed_report.rho_star:+.3f}"
    )

# the turn-rate half-width stops at the hold-phase tolerance of the evade
# predicate (0.01 rad/s): beyond it, perturbations can push the held turn
# rate outside the admissible band in the wrong direction
