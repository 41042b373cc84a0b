import os
import sys

# The test modules import their helpers (util, generate_data) as top-level
# modules, as under `python -m unittest discover -s test`.
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
