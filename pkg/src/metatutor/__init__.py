"""Simulated metacognitive interventions on logic and probability tutors.

Modules: ``domain`` (curricula, corpus format), ``sim`` (student simulator),
``forest`` (group classifier), ``deepq`` (offline double DQN), ``stats``
(learning gains and tests) and ``harness`` (experiments and reports).
"""

__version__ = "0.1.0"
