"""belieflab: exact belief filters, Bayes-optimal planners, and trainable
meta-RL agents for six small partially observable tasks, plus the state
machine simulation analysis that compares the two.

Subsystems
----------
numkit    float64 tensor autodiff + Adam (substrate for all networks)
envs      the six task families (sampling, reset, batched stepping)
belief    exact Bayesian filters per family
planners  Gittins index, exact bandit DP, belief-grid value iteration
agents    recurrent actor-critic baseline and predictive-module agent
training  ELBO / advantage-actor-critic losses and the meta-training loop
sms       state machine simulation (state/output dissimilarities)
cli       experiment driver (train / eval / sms / sweeps / exports)
"""

__version__ = "0.1.0"
