"""MPC-structured differentiable critics with amortized fictitious controllers.

Subpackages and modules:

- ``diffcore``: flat parameter vectors, losses, optimizers, gradient checks
- ``components``: dynamics, controllers, costs and constraints with hand-written backprop
- ``core``: the rollout Q-function and its critic, actor and model losses
- ``lqr``: Riccati solver and closed-loop error metrics
- ``mpc``: constrained QP-based MPC, its sensitivities and a timing harness
- ``envs``: the unstable LQR task and a nonlinear reactor benchmark
- ``rl``: agents, training loops and offline validation
- ``cli``: the ``mpcritic`` command
"""
