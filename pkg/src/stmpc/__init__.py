"""Self-triggered min-max MPC for linear plants behind a token-bucket shaped, lossy channel."""
from .closed_loop_sim import (
    SimConfig, SimResult, TraceRecord, assert_runtime_invariants, run, sampling_interval_summary,
)
from .lifted_dynamics import (
    ControlPacket, LiftedMatrices, OverallState, PlantModel, interval_cost, lift, ncs_step,
    stage_cost, terminal_rollout,
)
from .minmax_controller import (
    FeedbackPolicy, InfeasibleProblem, MpcConfig, SelfTriggeredMPC, Solution, evaluate_policy,
    inner_max, outer_min, shifted_candidate,
)
from .network import (
    AdversarialLoss, AssumptionViolation, BoundedRandomLoss, LossHistory, LossSequence, ScriptedLoss,
    TokenBucketSpec, bucket_step, enumerate_admissible, split_by_first_bit, update_counter,
)
from .sets import UNCONSTRAINED, Ellipsoid, Polytope
from .terminal_design import (
    InfeasibleTerminalLMI, TerminalIngredients, construct_terminal_set, design_terminal, synthesize,
    verify_decrease, verify_qmi,
)

__version__ = "0.1.0"
