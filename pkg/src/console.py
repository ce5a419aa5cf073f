import logging
import sys


class Term:
    HEADER = '\033[95m'
    BLUE = '\033[94m'
    CYAN = '\033[96m'
    GREEN = '\033[92m'
    WARNING = '\033[93m'
    FAIL = '\033[91m'
    ENDC = '\033[0m'
    BOLD = '\033[1m'

    @staticmethod
    def header(msg):
        print(f"\n{Term.HEADER}{Term.BOLD}=== {msg} ==={Term.ENDC}")

    @staticmethod
    def section(msg):
        print(f"\n{Term.CYAN}➜ {msg}{Term.ENDC}")

    @staticmethod
    def info(msg):
        print(f"{Term.BLUE}ℹ {msg}{Term.ENDC}")

    @staticmethod
    def success(msg):
        print(f"{Term.GREEN}✓ {msg}{Term.ENDC}")

    @staticmethod
    def error(msg):
        print(f"{Term.FAIL}✗ {msg}{Term.ENDC}", file=sys.stderr)

    @staticmethod
    def warning(msg):
        print(f"{Term.WARNING}⚠ {msg}{Term.ENDC}")

    @staticmethod
    def print_table(rows, columns, title=None):
        """Boxed, left-aligned table of dict rows; missing values print as '-'."""
        cells = [[_cell(row.get(c)) for c in columns] for row in rows]
        widths = [max([len(c)] + [len(r[i]) for r in cells]) for i, c in enumerate(columns)]
        rule = "─" * (sum(widths) + 3 * len(widths) - 1)
        if title:
            print(f"{Term.BOLD}{title}{Term.ENDC}")
        print(f"{Term.WARNING}┌{rule}┐{Term.ENDC}")
        print("│ " + " │ ".join(c.ljust(w) for c, w in zip(columns, widths)) + " │")
        print(f"{Term.WARNING}├{rule}┤{Term.ENDC}")
        for r in cells:
            print("│ " + " │ ".join(v.ljust(w) for v, w in zip(r, widths)) + " │")
        print(f"{Term.WARNING}└{rule}┘{Term.ENDC}")


def _cell(value):
    if value is None or value == "":
        return "-"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


class TermHandler(logging.Handler):
    """Routes log records to the Term reporter by level."""

    def emit(self, record):
        try:
            msg = self.format(record)
        except Exception:
            self.handleError(record)
            return
        if record.levelno >= logging.ERROR:
            Term.error(msg)
        elif record.levelno >= logging.WARNING:
            Term.warning(msg)
        else:
            Term.info(msg)


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    root = logging.getLogger("src")
    for handler in list(root.handlers):
        if isinstance(handler, TermHandler):
            root.removeHandler(handler)
    handler = TermHandler()
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    root.propagate = False
    return root
