import sys

from dragbench.cli import main

sys.exit(main())
