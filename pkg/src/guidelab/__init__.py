"""guidelab: a 2D laboratory for score-based diffusion guidance.

Analytic fractal mixture data, small trained denoisers, probability-flow
ODE sampling, guidance arithmetic, degradation experiments, metrics, and
figure rendering, all deterministic given seeds.
"""

__version__ = "0.1.0"
