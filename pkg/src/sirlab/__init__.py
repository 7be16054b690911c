from .cli import main as main
from . import models as models

__version__ = "0.1.0"
