import sys

from vl_instruct.cli import main

sys.exit(main())
