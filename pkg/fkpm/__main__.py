from fkpm.api.cli import main

main()
