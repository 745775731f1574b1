# RIShift package (RI-spectrogram enhancement with multi-metrics learning)
# Modules are imported explicitly; no wildcard imports.
#
# Usage from a script or notebook at the repo root:
#   from rimml import dsp_utils, losses, network, training, metrics
#
# Command line:
#   python -m rimml.cli --config experiments/smoke/config.ini prepare
