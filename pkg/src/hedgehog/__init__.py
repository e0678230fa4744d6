"""Invariant-domain approximants for irrationally indifferent germs.

Subpackages build up a staged construction: conformal lifts of Jordan domains
(`conformal`), entire periodic approximations and carved invariant domains
(`runge`), pullback vector fields and their flows (`flow`), the staged
renormalization engine (`renorm`), domain schedules (`schedules`), and
measurement (`metrics`), driven by a batch CLI (`cli`).
"""

__version__ = "0.1.0"
