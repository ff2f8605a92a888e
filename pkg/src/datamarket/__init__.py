"""Gradient-trained data markets with analytic oracles.

Learns revenue-optimal menus of priced statistical experiments (single buyer)
and multi-buyer experiment/payment mechanisms under incentive constraints, and
cross-checks them against closed-form optimal mechanisms, virtual-value
threshold rules with ironing, and exact linear programs on discrete instances.
"""

__version__ = "0.1.0"
