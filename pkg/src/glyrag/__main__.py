import sys

from glyrag.cli import main

sys.exit(main())
