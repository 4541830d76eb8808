"""Banner and coloured status lines for the command line."""

import pyfiglet
from colorama import Fore, Style, init

init(autoreset=True)

ACCENT = "\033[38;5;208m"


def print_banner(subtitle: str) -> None:
    banner = pyfiglet.figlet_format("ARoFace", font="slant")
    print(f"\n{ACCENT}{Style.BRIGHT}{banner}{Style.RESET_ALL}")
    print(f"{ACCENT}{'=' * 80}{Style.RESET_ALL}")
    print(f"{ACCENT}{Style.BRIGHT}{subtitle}{Style.RESET_ALL}")
    print(f"{ACCENT}{'=' * 80}{Style.RESET_ALL}\n")


def success(message: str) -> None:
    print(f"{Fore.GREEN}{Style.BRIGHT}✓ {message}{Style.RESET_ALL}")


def failure(message: str) -> None:
    print(f"{Fore.RED}{Style.BRIGHT}✗ {message}{Style.RESET_ALL}")


def info(message: str) -> None:
    print(f"{Fore.CYAN}{message}{Style.RESET_ALL}")


def section(title: str) -> None:
    print(f"\n{Fore.YELLOW}{Style.BRIGHT}{title}{Style.RESET_ALL}")
    print(f"{Fore.YELLOW}{'-' * len(title)}{Style.RESET_ALL}")
