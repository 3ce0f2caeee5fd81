import sys

from hybridep.cli import main

sys.exit(main())
