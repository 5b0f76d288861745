from flowshape.main import main

main()
