"""stallkit: stall-duration analysis for two-tier CDN video streaming.

Library layout:

* ``model``      -- topology / decision-variable types, feasibility, projection
* ``queueing``   -- shifted-exponential and Pollaczek-Khinchine MGF engine
* ``bounds``     -- closed-form stall-tail, mean-stall, and first-chunk bounds
* ``policies``   -- TTL edge cache plus LRU-family baselines and placements
* ``simulator``  -- seeded discrete-event simulation of the full pipeline
* ``workload``   -- synthetic trace generation and trace ingestion
* ``optimizer``  -- five-block alternating minimization of the weighted bounds
* ``cli``        -- experiment runner (bounds / optimize / simulate / sweep)
"""

from .model import DecisionVariables, StreamParams, SystemTopology

__all__ = ["SystemTopology", "DecisionVariables", "StreamParams"]
__version__ = "0.1.0"
