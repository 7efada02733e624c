import sys

from cinelab.cli import main

sys.exit(main())
