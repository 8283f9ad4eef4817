"""Self-tuning of dynamical systems to a bifurcation point.

Simulation, hypothesis checking, stability analysis and falsification tools
for closed loops ``plant + adaptation law`` that drive a bifurcation
parameter ``mu`` to its critical value ``mu0``.
"""

from .adaptation import (AdaptationLaw, bounded_osc_law, custom_law, equilibrium_point,
                         log_law, make_law, sigmoid_law, validate_theorem1,
                         validate_theorem3_4)
from .dynamics import (FirstOrderLoop, FirstOrderModel, OscillatorLoop, OscillatorModel,
                       Perturbation, simulate)
from .errors import (ChartMismatch, ConfigError, DomainViolation, ExpressionError,
                     HypothesisViolation, Infeasible, JacobianMismatch, NonFiniteState,
                     NotInImage, SelfTuneError, StepUnderflow)
from .ode import IntegratorConfig, Trajectory, integrate
from .scenario import Scenario

__version__ = "0.1.0"
