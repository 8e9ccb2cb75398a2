"""Joint sparse-view camera pose estimation and SDF surface recovery.

Cameras are over-parameterized as bundles of Plucker rays with depth,
denoised by a DDPM conditioned on a triplane signed distance field; the
denoised ray endpoints in turn supervise the surface.
"""

__version__ = "0.1.0"
