from __future__ import annotations

import sys

from ccs_audit.cli import main


if __name__ == "__main__":
    raise SystemExit(main(argv=sys.argv[1:]))
