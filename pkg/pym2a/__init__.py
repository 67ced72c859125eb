# Support Modules
from pym2a.error_classes import *
from pym2a.utility_classes import *

# Reporting
from pym2a.s01_reporting_classes import *

# Configuration
from pym2a.s02_config_classes import *

# File formats
from pym2a.s03_file_formats import *

# MIDI parsing, piano rolls and segmentation
from pym2a.s04_midi_core import *

# STFT, MIDI filterbank and features
from pym2a.s05_spectral import *

# Baseline synthesis
from pym2a.s06_synth import *

# Pitch posteriors
from pym2a.s07_pitch import *

# Objective metrics and note-level analysis
from pym2a.s08_eval import *

# Listening-test statistics
from pym2a.s09_stats import *

# Command phases and the command line
from pym2a.s10_phasing import *
from pym2a.s11_cli import *
