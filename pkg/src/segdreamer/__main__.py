import sys

from segdreamer.cli import main

sys.exit(main())
