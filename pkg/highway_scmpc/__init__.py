"""
highway-scmpc: interaction-aware traffic prediction feeding a scenario-based MPC for
highway driving, with a closed-loop simulator, a CLI and a small HTTP service.
"""

from highway_scmpc.version import VERSION

__version__ = VERSION
