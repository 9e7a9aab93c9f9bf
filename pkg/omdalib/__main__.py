import sys

from omdalib.cli import main

sys.exit(main())
