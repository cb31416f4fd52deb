import sys

from domainshift.cli import main

sys.exit(main())
