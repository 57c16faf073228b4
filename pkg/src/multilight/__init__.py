"""Multi-light intrinsic neural fields: synthetic SDF scenes, physics-based
pseudo labels and a two-stage reflectance/shading decomposition."""

__version__ = "0.1.0"
