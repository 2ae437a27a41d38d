"""Simulation and analysis of microwave-driven two-level qubits in inhomogeneous ensembles."""
from .core import (
    NO_DECAY,
    BlochState,
    DecayRates,
    PulseSegment,
    PulseSequence,
    Rotation,
    compose,
    compose_all,
    ideal_rotation,
    khz_to_rad,
    rad_to_khz,
    state_from_logical,
)
from .dynamics import (
    LeakageChannel,
    TimedTrace,
    evolve_bloch,
    evolve_sequence,
    leakage_populations,
    pi1_closed_form,
    torrey_inversion,
    torrey_population,
)
from .ensemble import (
    EnsembleSpec,
    SignalModel,
    average_population,
    average_sequence_population,
    quadrature_nodes,
    required_order,
    synthesize_signal,
)
from .sequences import (
    PROPAGATOR,
    STATE,
    ErrorPoint,
    FidelityMeasure,
    bb1,
    build_sequence,
    corpse,
    ensemble_gate_fidelity,
    plain_pulse,
    robustness_scan,
    rotary_echo,
    scrofulous_pi,
    sequence_fidelity,
    sequence_rotation,
)
from .diagnostics import (
    FitError,
    FitResult,
    estimate_pi_fidelity,
    fit_coherence_saturation,
    fit_rabi_trace,
    fit_rotary_trace,
)

__version__ = "0.1.0"
