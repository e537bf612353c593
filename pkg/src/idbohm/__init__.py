"""Bohmian trajectory simulator on labeled and unordered configuration spaces.

Implements the standard guidance law on R^(d*N), the permutation-symmetrized
law on the space of unordered N-point configurations, the fiber-bundle
representation of wave functions over that space (lift/restrict, parallel
transport, exchange subbundles), and the ensemble statistics that verify
equivariance and the marginal equivalence of the two laws.
"""

__version__ = "0.1.0"

from .core import (
    CoincidenceError,
    LabeledConfiguration,
    Numbering,
    Permutation,
    SpeciesSlot,
    SpeciesTable,
    UnorderedConfiguration,
    apply_permutation,
    canonicalize,
    enumerate_permutations,
    permutation_sign,
    uniform_species,
)
from .wavefunction import (
    GaussianProductState,
    GaussianSuperposition,
    GridState,
    OutOfBoxError,
    UnstableStepError,
    WaveFunction,
    exchange_symmetrize,
    grid_from_analytic,
    load_grid_state,
    product_state,
    save_grid_state,
    superpose,
)
from .dynamics import (
    NodeError,
    TrajectoryRecord,
    VelocityLaw,
    integrate_trajectory,
    standard_velocity,
    strong_permutation_invariance_check,
    symmetrized_density,
    symmetrized_velocity,
    symmetrized_velocity_labeled,
)
from .bundle import (
    FiberElement,
    PathInNRd,
    WaveFunctionSection,
    holonomy_sign_test,
    lift,
    mixed_species_subbundle_check,
    parallel_transport,
    path_from_points,
    permutation_representation,
    phi_schrodinger_residual,
    phi_velocity,
    project_boson,
    project_fermion,
    restrict,
    transform_norm_check,
)
from .ensemble import (
    EnsembleSpec,
    EquivarianceReport,
    MarginalIdentityResult,
    continuity_residual_scan,
    equivariance_test,
    marginal_identity_test,
    propagate_ensemble,
    sample_initial,
)
from .scenario import Scenario, ScenarioError, load_scenario, scenario_hash

__all__ = [name for name in dir() if not name.startswith("_")]
