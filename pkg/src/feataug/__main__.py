import sys

from feataug.cli import main

sys.exit(main())
