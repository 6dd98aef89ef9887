"""Unlocked layer-parallel training by wave transport on a depth/solver-time worldsheet."""

from .grid import (DimensionError, GridConfig, MetricFactor, NodeState, WaveField, field_to_nodes,
                   inverse_wave_transform, matched_metrics, nodes_to_field, power_split, wave_transform)
from .layers import (AffineLayer, CallableLoss, IdentityLayer, L2Penalty, LayerMap,
                     SoftmaxCrossEntropy, SquaredLoss, ZeroPenalty)
from .pmp import (NetworkSpec, NonFiniteError, ResidualSet, backprop_oracle, discrete_hamiltonian,
                  forward_rollout, adjoint_recursion, inject_sources, node_residuals, oracle_field,
                  param_residual, wave_residuals)
from .transport import JunctionOperator, balanced_step, make_junction, upwind_transport
from .boundaries import boundary_passivity_report, input_scatter, terminal_scatter
from .ports import Impedance, matched_flow, port_scatter, reflection_norm
from .energy import energy_balance_report, passivity_monitor, wave_energy
from .trainer import (InstabilityError, MetricsRow, TrainConfig, WaveState, init_state, relax,
                      sgd_baseline, sync_step, train)
from .harness import DeadlockError, HarnessTrace, LocalityError, async_run
from .models import dataset_linreg, dataset_xor, make_mlp
from .estimator import WavePMPClassifier, WavePMPRegressor

__version__ = "0.1.0"
