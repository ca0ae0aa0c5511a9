"""Buffer-guided neural field rendering.

A dense voxel field is volume-rendered at low resolution, previous frames
are forward-warped into the current view, and a small convolutional network
fuses the warped buffers with the upsampled current frame into a full
resolution image.  Depth maps from previous frames bound the sampling
intervals of the current one, which is where the speed comes from.
"""

__version__ = "0.1.0"
