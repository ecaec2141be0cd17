"""Measurement-robust backup-set safety filters for a planar Segway.

The package covers the full pipeline: Segway dynamics, LQR backup-controller
synthesis with a certified invariant ellipsoid, backup-flow integration with
sensitivities, measurement-robustness machinery (error models, Lipschitz
bundles, constraint tightening), conic-program safety filters, and a
deterministic closed-loop simulation harness with a CLI.
"""

from .errors import (BadCombination, DimensionMismatch, EmptyLog, EmptySet,
                     MassMatrixSingular, MaxIterations, NonFinite, NotHurwitz,
                     NotStabilizable, SafeguardError)
from .segway import SegwayParams, state
from .linear_control import (BackupPolicy, QuadraticBackupSet, SafeSetSpec,
                             backup_control, lqr_gain, solve_care,
                             solve_lyapunov, synthesize_backup_set,
                             translate_center)
from .backup_flow import (ConstraintData, FlowGrid, constraint_data,
                          flow_with_sensitivity, membership)
from .robustness import (EpsilonProvider, ErrorModel, LipschitzBundle,
                         apply_measurement, epsilon_of, estimate_lipschitz,
                         lipschitz_bundle, mr_parameters, mu_bound,
                         sup_backup_speed)
from .filters import (ConeRow, ConicProgram, FilterContext, FilterSolution,
                      assemble, filter_step, solve_1d, solve_general)
from .simulate import (SafetyReport, ScenarioConfig, SimLog, evaluate_safety,
                       run_scenario, sweep_epsilon)
from .synthesis import SynthesisSettings, build_context

__version__ = "0.1.0"
