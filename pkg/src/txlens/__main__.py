from txlens.cli import main

raise SystemExit(main())
