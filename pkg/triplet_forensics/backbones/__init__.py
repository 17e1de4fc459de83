from .common import *
from .tiny import *
from .xception import *
from .linear import *
