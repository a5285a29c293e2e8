"""Simulation and numerical verification of a multi-photon parametric open quantum system."""
from .fock import (
    ModeLayout,
    OperatorMatrix,
    QuantumState,
    annihilation,
    basis_state,
    commutator,
    creation,
    identity,
    interior_projector,
    make_layout,
    number,
)
from .model import Drive, ModelParams, MultiPhotonModel, build_model
from .dynamics import Liouvillian, PropagationResult, expectation, liouvillian_apply, propagate
from .trajectories import (
    EnsembleStats,
    MeasurementRecord,
    UnravelingSystem,
    characteristic_functional,
    ensemble_average,
    homodyne_unraveling,
    jump_unraveling,
)
from .report import CheckReport

__version__ = "0.1.0"
