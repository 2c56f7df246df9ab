import sys

from panofocus.cli import main

sys.exit(main())
