import sys

from bioslim.cli import main

sys.exit(main())
