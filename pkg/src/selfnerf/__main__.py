import sys

from selfnerf.cli import main

sys.exit(main())
