import sys
from pathlib import Path

# lets the acceptance suite reuse the oracles defined next to the unit tests
sys.path.insert(0, str(Path(__file__).parent))
