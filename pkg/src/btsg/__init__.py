"""Safe cart-pole swing-up with behavior-tree controller switching.

Subpackages: dynamics (normalized cart-pole + integrators), trajopt
(indirect optimal control and the trajectory database), btcore (the
state-space behavior-tree engine), controllers (the three leaves and their
conditions), mlp (the control regressor), assembly (the BT123 tree and
certification), harness (command-line interface).
"""

from .assembly import Bt123Config, build_bt123, certify, initial_state, load_config
from .btcore import Status, fallback, run, run_to_status, sequence, tick
from .controllers import ModelBasedGains
from .dynamics import SimParams, eval_dynamics, step_bound, step_euler, step_rk4
from .mlp import MlpPolicy, TrainConfig, load_weights, save_weights, train
from .trajopt import (
    ShootingGuess,
    TrajectoryDatabase,
    random_walk_database,
    shoot,
    solve_bvp,
    solve_min_effort,
    solve_nominal,
)

__version__ = "0.1.0"
