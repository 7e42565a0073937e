# main.py
# Entry point of the consistedit toolkit (also works from a PyInstaller bundle)
# Usage: python main.py run --config experiments/default.json --out results/demo
import sys
from pathlib import Path

# Make the app package importable when run from another directory
if getattr(sys, 'frozen', False):
    application_path = Path(sys.executable).parent
else:
    application_path = Path(__file__).parent
sys.path.insert(0, str(application_path))

from app.controllers import cli


def main():
    """Run the command-line interface"""
    cli(prog_name='disco3d')


if __name__ == "__main__":
    main()
