from .memprobe import *
from .memprobe import __version__
from .memprobe_index import *
from .memprobe_linear import *
from .memprobe_knn import *
from .memprobe_tree import *
from .memprobe_fusion import *
from .memprobe_harness import *
from .memprobe_files import *
