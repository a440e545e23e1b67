"""coarsetrace: quantized trace pairings of finite-propagation lattice operators."""

from ._kernels import get_backend, set_backend, set_threads
from .errors import (CoarseTraceError, ConfigError, DimensionMismatchError,
                     FormulaMismatchError, GapClosedError,
                     IndeterminateRoundingError, ShapeMismatchError,
                     TailFitError, UnboundedSupportError, ValidationError,
                     WindowTooSmallError)
from .space import (All, Box, Complement, Empty, FiniteSet, HalfPlane,
                    HalfSpace, Intersection, LatticeSpace, Partition, Region,
                    Sector, SectorPullback, Thickening, TransversalityCertificate,
                    Union, ball_offsets, check_transversality, classifying_map,
                    complement, distance, distance_to_region, enumerate_region,
                    intersection, partition_from_doc, partition_from_halfspaces,
                    partition_to_doc, region_from_doc, region_to_doc,
                    sector_partition, standard_halfspaces, standard_partition,
                    thicken, union)
from .opalg import (DecayTail, KernelOperator, Propagation, SupportBudget,
                    SwitchFunction, TraceResult, UnitizedOperator, add, adjoint,
                    commutator, compose, csum, identity_operator,
                    materialize_product, mult_operator, scale, sub,
                    support_of_product, trace, verify_idempotent,
                    verify_invertible)
from .pairings import (FlowReport, PairingReport, flow, kitaev_idempotent,
                       kitaev_idempotent_raw, kitaev_invertible,
                       kubo_idempotent, kubo_invertible, normalization_constant,
                       pairing_n0, quantize)
from .cohomology import (CharacterChain, WedgeCochain, as_differential, pair,
                         permuted_partition, switch_reduction,
                         verify_equipartition, verify_sum_rule)
from .models import (HofstadterSpec, WalkSpec, chern_oracle,
                     conjugate_idempotent, conjugate_invertible,
                     deform_partition, hofstadter_projection,
                     random_local_idempotent, random_local_invertible,
                     shift_unitary, shifted_walk, split_step_walk)

__version__ = "0.1.0"
