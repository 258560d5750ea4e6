# vim:fileencoding=UTF-8:ts=4:sw=4:sta:et:sts=4:ai

__license__ = "GPL v3"
__copyright__ = "2024, congested_crowd developers"
__docformat__ = "markdown en"

import sys

from congested_crowd.cli import main

if __name__ == "__main__":
    sys.exit(main())
