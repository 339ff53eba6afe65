import sys
from .cli import main

main()
