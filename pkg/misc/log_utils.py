import sys

_verbose = True


def set_verbose(enabled: bool) -> None:
    global _verbose
    _verbose = enabled


def log_step(step_name: str, **collections) -> None:
    '''
    Prints a banner for a pipeline step followed by the size of every collection passed in.\n

    Parameters:
        `step_name (str)` - Name of the step that has just finished.\n
        `**collections` - Named collections (lists, dicts, arrays, DataFrames) or plain integers to report.\n

    Return:
        `None`
    '''

    if not _verbose:
        return

    print(f"\n=== {step_name} ===", file=sys.stderr)
    for name, value in collections.items():
        if value is None:
            print(f"{name}: 0", file=sys.stderr)
        elif isinstance(value, (int, float, str)):
            print(f"{name}: {value}", file=sys.stderr)
        else:
            try:
                print(f"{name}: {len(value)}", file=sys.stderr)
            except Exception:
                print(f"{name}: {type(value)} (no len available)", file=sys.stderr)


def log_info(message: str) -> None:
    if _verbose:
        print(message, file=sys.stderr)


def log_warning(message: str) -> None:
    # Warnings are never silenced
    print(f"Warning: {message}", file=sys.stderr)
