"""Self-evolving agent runtime.

The runtime answers a stream of queries in parallel batches while growing a
registry of synthesized tools: a manager selects or requests tools, a
developer synthesizes them as sandboxed Python modules, an executor drives a
think/act/observe loop, and an integrator extracts the final answer. At each
batch barrier, redundant candidate tools are clustered and merged before
being committed to an immutable registry snapshot. Every run is replayable
from its append-only event trace, and convergence is tracked with the
evolutionary generality loss metric.
"""

__version__ = "0.1.0"
