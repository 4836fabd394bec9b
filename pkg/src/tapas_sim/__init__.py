"""Trace-driven simulator for thermal- and power-aware LLM inference
scheduling in air-cooled GPU datacenters.

Subpackages are organized by concern: ``topology`` (static datacenter
layout), ``thermal`` and ``power`` (learned physical models plus ground
truth), ``workload`` (trace generators and configuration profiles),
``allocator``/``router``/``configurator`` (the three control loops),
``engine`` (the discrete-time loop and metrics), ``oracles`` (independent
reference implementations used by the test suite), and ``cli``.
"""

__version__ = "0.1.0"
