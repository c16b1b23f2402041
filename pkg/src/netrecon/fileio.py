"""Line-oriented text file helpers shared by the model/dataset/result writers.

All writers emit floats with 17 significant digits so that every file
round-trips float64 values bit-exactly, and they never emit timestamps or
other run-dependent content: identical inputs produce identical bytes.
"""

import numpy as np

__all__ = ["FileFormatError", "fmt", "fmt_row", "LineReader"]


class FileFormatError(ValueError):
    """A structured text file could not be parsed; names file, line and field."""

    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        self.message = message
        super().__init__(f"{self.path}:{lineno}: {message}")


def fmt(x):
    """Format one float with enough digits to round-trip exactly."""
    return f"{float(x):.17g}"


def fmt_row(values, sep=" "):
    return sep.join(fmt(v) for v in np.asarray(values, dtype=float).ravel())


class LineReader:
    """Sequential reader over the lines of a structured text file.

    Skips blank lines; lines starting with '#' are collected as comments
    unless the caller asks for them.  Every parse failure raises
    FileFormatError carrying the offending line number.
    """

    def __init__(self, path, text=None):
        self.path = str(path)
        if text is None:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        self._lines = text.splitlines()
        self._pos = 0
        self.comments = []

    def error(self, message, lineno=None):
        raise FileFormatError(self.path, self._pos if lineno is None else lineno, message)

    def at_end(self):
        pos = self._pos
        while pos < len(self._lines):
            line = self._lines[pos].strip()
            if line and not line.startswith("#"):
                return False
            pos += 1
        return True

    def next_line(self):
        """Return the next non-blank, non-comment line (stripped)."""
        while self._pos < len(self._lines):
            line = self._lines[self._pos].strip()
            self._pos += 1
            if not line:
                continue
            if line.startswith("#"):
                self.comments.append(line[1:].strip())
                continue
            return line
        self.error("unexpected end of file")

    def expect_key(self, key):
        """Read a 'key value...' line and return the value part."""
        line = self.next_line()
        parts = line.split(None, 1)
        if parts[0] != key:
            self.error(f"expected field '{key}', found '{parts[0]}'")
        if len(parts) < 2:
            self.error(f"field '{key}' has no value")
        return parts[1].strip()

    def expect_int(self, key):
        raw = self.expect_key(key)
        try:
            return int(raw)
        except ValueError:
            self.error(f"field '{key}' is not an integer: {raw!r}")

    def expect_float(self, key):
        raw = self.expect_key(key)
        try:
            return float(raw)
        except ValueError:
            self.error(f"field '{key}' is not a number: {raw!r}")

    def expect_literal(self, literal):
        line = self.next_line()
        if line != literal:
            self.error(f"expected '{literal}', found '{line}'")

    def read_floats(self, count, what="row"):
        line = self.next_line()
        parts = line.split()
        if len(parts) != count:
            self.error(f"{what}: expected {count} values, found {len(parts)}")
        try:
            return np.array([float(v) for v in parts])
        except ValueError:
            self.error(f"{what}: non-numeric value in '{line}'")

    def read_matrix(self, name, rows, cols):
        self.expect_literal(name)
        out = np.empty((rows, cols))
        for r in range(rows):
            out[r] = self.read_floats(cols, what=f"matrix {name} row {r + 1}")
        return out
