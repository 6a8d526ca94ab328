"""morelike: image generation steered by relative constraints.

A generator maps a set of "more like A than B" image pairs plus a noise
vector to an image; training pairs a WGAN-GP objective with a constraint
critic scoring satisfaction in a semantic space.
"""

__version__ = "0.1.0"

from .engine import Tensor, Tape, backward, grad, grad_check, no_grad  # noqa: F401
