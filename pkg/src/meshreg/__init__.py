"""2D/3D deformable mesh registration from single-projection images.

A displacement-map generator network and a graph-convolutional deformer
trained jointly on synthetic organ phantoms, with registration metrics,
statistical deformation augmentation, and a CLI.
"""

from .kernels import active_backend

__version__ = "0.1.0"

__all__ = ["active_backend", "__version__"]
