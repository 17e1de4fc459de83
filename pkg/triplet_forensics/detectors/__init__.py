from .common import *
from .cascade import *
from .hog import *
from .center import *
