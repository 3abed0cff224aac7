import sys

from robox.evalcli.cli import main

sys.exit(main())
