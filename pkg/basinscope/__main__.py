from basinscope.cli import main

main()
