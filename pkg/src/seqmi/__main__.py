import sys

from seqmi.cli import main

sys.exit(main())
