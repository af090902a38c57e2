from stacca.cli import main
import sys

sys.exit(main())
