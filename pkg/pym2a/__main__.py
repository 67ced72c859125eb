from pym2a.s11_cli import main

main()
