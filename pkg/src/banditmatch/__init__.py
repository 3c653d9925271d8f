"""Multi-action dialog policy learning from logged bandit feedback.

Subpackages: a small autodiff core (nncore), a synthetic dialog world
(dialogworld), corpus/feedback logging (datasets), the policy wrapper
(policy), feedback-enhanced thresholding (fet), loss terms (objectives),
training/evaluation loops (trainer), and the command-line front end (cli).
"""

__version__ = "0.1.0"
