"""Toolkit for simulating, calibrating, and learning on a fluid-filled
membrane tactile fingertip sensor.

Subpackages:
    geometry      parametric fingertip/indenter geometry, meshes, SDFs
    fem           quasi-static hyperelastic membrane solver
    sensor        virtual indentation testbed and synthetic electrodes
    registration  rigid transform estimation from matched point triples
    pipeline      signal processing and experiment/simulation alignment
    calibrate     bounded parameter identification against reference forces
    learn         MLP regressions between electrodes, features, and fields
    cli           end-to-end workflow commands
"""

__version__ = "0.1.0"
