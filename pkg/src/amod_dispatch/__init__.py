"""Multi-agent dispatching for autonomous mobility-on-demand fleets."""

__version__ = "0.1.0"
