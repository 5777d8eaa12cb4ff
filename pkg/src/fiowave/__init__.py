"""Wave packets, FIO Hardy-Sobolev norms, rough pseudodifferential operators and a
packet parametrix for rough wave equations on the torus."""

from .spectral_core import (
    Field,
    Grid,
    LPFamily,
    MultiplierSpec,
    NormReport,
    apply_multiplier,
    littlewood_paley,
    norm_classical,
    predicted_loss_sigma,
    rp_exponent,
    sp_exponent,
)
from .cosphere import (
    CospherePoint,
    DirectionGrid,
    PhaseFunctionSample,
    ball_members,
    maximal_Mlambda,
    metric_d,
)
from .wavepacket import (
    FIONormReport,
    PacketCoefficients,
    PacketFrame,
    build_frame,
    norm_HspFIO,
    parabolic_cutoff_phi,
    reproducing_m,
    synthesize_V,
    transform_W,
)
from .symbols import (
    Symbol,
    estimate_seminorm,
    quantize_adjoint,
    quantize_apply,
    separable_expand,
    smooth_split,
)
from .waveop import (
    Coefficients,
    HalfWaveData,
    WaveOperator,
    assemble_L,
    build_Ltilde,
    principal_symbol_A,
    sqrt_symbol,
)
from .parametrix import (
    PropagatorConfig,
    SolutionBundle,
    cos_sqrtL,
    halfwave_evolve,
    hamiltonian_flow,
    parametrix_Et,
    spectral_reference,
    wave_solve,
)

__version__ = "0.1.0"
