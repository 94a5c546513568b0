"""Compression of anchor-based Gaussian-splatting scenes with grid-conditioned
feature prediction and hyperprior entropy coding."""

__version__ = "0.1.0"
SPEC_VERSION = 1        # bitstream / checkpoint format revision

from .diffmath import ContractError
from .model import VARIANTS, SceneModel
from .scene import SynthSpec, TargetAnchorSet, load_targets, save_targets, synth_targets
