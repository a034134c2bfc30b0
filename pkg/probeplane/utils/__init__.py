from .file_utils import *
from .json_utils import *
from .record_utils import ExperimentRecorder
from .progress_tracker import BenchTracker
