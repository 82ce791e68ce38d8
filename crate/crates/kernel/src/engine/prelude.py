"""Support routines for the embedded interpreter.

Everything here runs on the engine thread. Nothing in this module lets an
exception escape: failures are reported back as formatted text.
"""

import ast
import builtins
import codeop
import io
import sys
import traceback

MAX_OUTPUT = 1 << 20
TRUNCATED = "\n[output truncated]\n"

_compiler = codeop.CommandCompiler()


class BoundedOutput(io.TextIOBase):
    """Text sink that keeps at most MAX_OUTPUT bytes of UTF-8."""

    def __init__(self, limit=MAX_OUTPUT):
        super().__init__()
        self._parts = []
        self._size = 0
        self._limit = limit
        self.truncated = False

    def writable(self):
        return True

    def write(self, s):
        if not isinstance(s, str):
            raise TypeError("write() argument must be str, not %s" % type(s).__name__)
        if self.truncated:
            return len(s)
        data = s.encode("utf-8", "replace")
        room = self._limit - self._size
        if len(data) > room:
            self._parts.append(data[:room].decode("utf-8", "ignore"))
            self._size = self._limit
            self.truncated = True
        else:
            self._parts.append(s)
            self._size += len(data)
        return len(s)

    def getvalue(self):
        text = "".join(self._parts)
        return text + TRUNCATED if self.truncated else text


def _safe_str(exc):
    try:
        return str(exc)
    except BaseException:
        return "<unprintable %s>" % type(exc).__name__


def _format(exc, tb):
    try:
        return "".join(traceback.format_exception(type(exc), exc, tb))
    except BaseException:
        return "%s: %s\n" % (type(exc).__name__, _safe_str(exc))


def _compile(source):
    return _compiler(source, "<shell>", "single")


def classify(source):
    try:
        code = _compile(source)
    except (SyntaxError, OverflowError, ValueError, MemoryError, RecursionError):
        return "invalid"
    return "incomplete" if code is None else "complete"


def _single_expression(source):
    try:
        body = ast.parse(source).body
    except BaseException:
        return False
    return len(body) == 1 and isinstance(body[0], ast.Expr)


def evaluate(source, namespace):
    """Returns (status, output, value_repr, kind, message, traceback)."""
    try:
        code = _compile(source)
    except (SyntaxError, OverflowError, ValueError, MemoryError, RecursionError) as exc:
        try:
            text = "".join(traceback.format_exception_only(type(exc), exc))
        except BaseException:
            text = "%s: %s\n" % (type(exc).__name__, _safe_str(exc))
        return ("error", "", None, type(exc).__name__, _safe_str(exc), text)
    if code is None:
        return ("incomplete", "", None, None, None, None)

    out = BoundedOutput()
    shown = [None]
    expression = _single_expression(source)

    def display(value):
        if value is None:
            return
        builtins._ = value
        text = repr(value)
        if expression:
            shown[0] = text
        else:
            out.write(text + "\n")

    saved = (sys.stdout, sys.stderr, sys.displayhook)
    sys.stdout, sys.stderr, sys.displayhook = out, out, display
    try:
        exec(code, namespace)
    except BaseException as exc:
        sys.stdout, sys.stderr, sys.displayhook = saved
        tb = exc.__traceback__.tb_next if exc.__traceback__ is not None else None
        return ("error", out.getvalue(), shown[0], type(exc).__name__, _safe_str(exc), _format(exc, tb))
    finally:
        sys.stdout, sys.stderr, sys.displayhook = saved
    return ("complete", out.getvalue(), shown[0], None, None, None)


def invoke(fn, args):
    """Calls fn(*args); returns None or the formatted traceback."""
    try:
        fn(*args)
    except BaseException as exc:
        tb = exc.__traceback__.tb_next if exc.__traceback__ is not None else None
        return _format(exc, tb)
    return None


def run_file(path, namespace):
    """Executes a script file in the namespace; returns None or the traceback."""
    try:
        with open(path, "rb") as f:
            source = f.read()
        code = compile(source, path, "exec")
        exec(code, namespace)
    except BaseException as exc:
        tb = exc.__traceback__.tb_next if exc.__traceback__ is not None else None
        return _format(exc, tb)
    return None
