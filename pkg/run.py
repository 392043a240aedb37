from apcsim.cli import main


if __name__ == "__main__":
    # Same as the installed `apcsim` script
    main()
