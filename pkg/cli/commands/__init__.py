"""
dynreach subcommands, one module per command.
"""
