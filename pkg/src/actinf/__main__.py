import sys

from actinf.cli import main

sys.exit(main())
