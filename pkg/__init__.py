# g2kit: pulsed single-photon source characterization toolkit
__version__ = "1.0.0"
