import sys
from pathlib import Path

# shared helpers (gen, oracles, criteria) live next to the tests
sys.path.insert(0, str(Path(__file__).parent))
