"""twinlink: a deterministic desk-scale digital-twin manipulation stack.

A simulated tabletop world (the reality proxy) and a planning twin exchange
framed, versioned messages to perceive a scene, plan arm motion, execute it,
and validate the outcome, end to end and fully seeded.
"""

__version__ = "0.1.0"
