from .bidyn import main

main()
