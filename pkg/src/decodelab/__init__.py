"""Performance lab for capacity-optimized stacked DRAM and chiplet decode accelerators.

The package is organized around the flow of the underlying study:

``memstack``    analytical model of a capacity-first stacked-DRAM device
``system``      accelerator configuration, roofline math, power provisioning
``isa``         three-stream per-core instruction set and binary container
``models``      transformer model descriptions and footprint math
``sharding``    tensor-parallel layout planning
``lowering``    compilation of a decode step to per-core programs
``engine``      deterministic event-driven simulator
``experiments`` end-to-end studies (SKU selection, scaling, energy, cost)
``report``      figure rendering and delimited output
``cli``         command-line entry points
"""

__version__ = "0.1.0"
