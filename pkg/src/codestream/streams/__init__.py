from .core import *
from .diffusion import *
