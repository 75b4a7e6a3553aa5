import sys

from textrich.cli import main

sys.exit(main())
