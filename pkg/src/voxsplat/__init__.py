"""voxsplat: LoD-voxel gaussian splatting with simulated multi-worker training.

Scene state lives in a K-level voxel hierarchy whose records a shared decoder
expands into gaussians per view. Rendering, training, depth-prior filtering,
and TSDF meshing are desk-scale CPU implementations with deterministic,
worker-count-independent numerics.
"""

__version__ = "0.1.0"
