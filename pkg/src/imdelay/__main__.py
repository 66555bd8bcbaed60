import sys

from imdelay.cli import main

sys.exit(main())
