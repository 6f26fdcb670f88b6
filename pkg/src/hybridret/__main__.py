import sys

from hybridret.cli import main

sys.exit(main())
