"""moegeo: a numerical laboratory for sparse routing geometry.

Dictionaries and sparse subset selection, coherence-controlled recovery
experiments, determinantal diversity selection, entropy identities for top-k
routing, and a small mixture-of-experts trainer with decorrelation
regularizers. Pure numpy, fully seeded, desk-scale.
"""

__version__ = "0.1.0"
