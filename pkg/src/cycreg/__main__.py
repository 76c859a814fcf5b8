import sys

from cycreg.cli import main

sys.exit(main())
