"""Planner and end-to-end simulator for trusted-node-free entanglement QKD networks."""

from .topology import (
    ChannelPair,
    NetworkPlan,
    NonIntegerSubnet,
    Routing,
    channel_count,
    plan_network,
    validate_plan,
)
from .photonsim import (
    DetectorConfig,
    MergedTagStream,
    SourceConfig,
    StationConfig,
    TagStream,
    generate_pair_events,
    merge_tags,
    simulate_network,
)
from .correlate import (
    CoincidenceSet,
    CorrelationHistogram,
    PeakCounts,
    calibrate_offset,
    cross_correlation,
    find_coincidences,
    optimize_window,
    peak_counts,
)
from .distill import (
    SecureKeyReport,
    SecurityParams,
    binary_entropy,
    blockwise_report,
    estimate_basis_bias,
    phase_error_upper,
    secure_key_length,
    secure_key_length_tagged,
    sift,
)
from .ratemodel import LinkPrediction, predict_link, sweep_pump, sweep_scalability

__version__ = "0.1.0"
