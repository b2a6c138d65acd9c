import sys

from ffnet.cli import main

sys.exit(main())
