import sys

from dialtask.cli import main

sys.exit(main())
