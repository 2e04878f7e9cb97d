from biasguard.main import main

main()
