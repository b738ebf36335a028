import sys

from hsiproto.cli import main

sys.exit(main())
