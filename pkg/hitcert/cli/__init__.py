# Command-Line Module
