"""Location-aware shared-tree multicast for mobile ad hoc networks, with a
deterministic discrete-event simulator, two baselines and a metrics pipeline."""

__version__ = "0.1.0"
