from gradforge.cli import main

main()
