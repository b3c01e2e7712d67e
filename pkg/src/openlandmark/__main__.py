import sys

from openlandmark.cli import main

sys.exit(main())
