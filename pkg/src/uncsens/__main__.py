import sys

from uncsens.cli import main

sys.exit(main())
