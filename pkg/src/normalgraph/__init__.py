"""Normal-graph parameterisation of hypersurfaces and their fourth-order flows.

Submodules:

``grid``          structured chart grids and difference stencils
``reference``     closed-form reference surfaces (circle, sphere, cylinder, torus, periodic graphs)
``geometry``      metric, normal, curvatures and connection of a normal graph
``flow``          surface diffusion and Willmore height equations, IMEX and RK4 stepping
``certify``       sampled tubular-radius certification
``observables``   area, volume, Willmore energy, fits and decay rates
``experiments``   INI configs, presets and the artefact-writing runner
``cli``           command-line entry point

Nothing heavy is imported here so that ``NORMALGRAPH_THREADS`` can be
applied by the command-line entry point before numpy loads.
"""

__version__ = "0.1.0"
