import sys

from pvfim.cli import main

sys.exit(main())
