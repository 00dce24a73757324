"""
roff manual page generated from the argparse parser.

FUNCTION INDEX:
===============

PUBLIC FUNCTIONS (External API):
--------------------------------
- render_manpage(parser, version): Full man(7) page as a string

PRIVATE FUNCTIONS (Internal Implementation):
-------------------------------------------
- _escape(text): Escape roff control characters
- _options(parser): .TP entries for every option of a parser
"""

import argparse
from datetime import date
from typing import List

ENVIRONMENT = [
    ("TSDPLAB_LOG_LEVEL", "Console log level (DEBUG, INFO, WARNING, ERROR)."),
    ("TSDPLAB_HOME", "Directory for logs and bug reports (default ~/.tsdplab)."),
    ("TSDPLAB_CACHE_DIR", "Cell cache directory used by sweep and run."),
]

EXIT_STATUS = [
    ("0", "Success; for run, every requested cell produced a report."),
    ("1", "Unexpected error or at least one failed cell."),
    ("2", "File error."),
    ("3", "Data error (including non-finite training loss)."),
    ("4", "Configuration error (schema violation)."),
    ("5", "Validation error (bad arguments, shapes or plans)."),
    ("6", "Integrity error (failed Freivalds check or pad reuse)."),
    ("130", "Interrupted."),
]


def _escape(text: str) -> str:
    text = text.replace("\\", "\\\\").replace("-", "\\-")
    return "\n".join("\\&" + ln if ln.startswith((".", "'")) else ln for ln in text.split("\n"))


def _options(parser: argparse.ArgumentParser) -> List[str]:
    lines: List[str] = []
    for action in parser._actions:
        if isinstance(action, (argparse._HelpAction, argparse._SubParsersAction)):
            continue
        if action.option_strings:
            flags = ", ".join(f"\\fB{_escape(s)}\\fR" for s in action.option_strings)
            if action.nargs != 0:
                flags += f" \\fI{_escape(action.metavar or action.dest.upper())}\\fR"
        else:
            flags = f"\\fI{_escape(str(action.metavar or action.dest))}\\fR"
        lines.append(".TP")
        lines.append(flags)
        lines.append(_escape(action.help or ""))
    return lines


def render_manpage(parser: argparse.ArgumentParser, version: str) -> str:
    prog = parser.prog
    lines = [
        f'.TH {prog.upper()} 1 "{date.today().isoformat()}" "{prog} {version}" "User Commands"',
        ".SH NAME",
        f"{prog} \\- {_escape(parser.description or '')}",
        ".SH SYNOPSIS",
        f"\\fB{prog}\\fR [\\fIglobal options\\fR] \\fIcommand\\fR [\\fIoptions\\fR]",
        ".SH GLOBAL OPTIONS",
        *_options(parser),
        ".SH COMMANDS",
    ]
    for action in parser._actions:
        if not isinstance(action, argparse._SubParsersAction):
            continue
        helps = {a.dest: a.help for a in action._choices_actions}
        for name, sub in action.choices.items():
            lines.append(".SS " + _escape(name))
            lines.append(_escape(helps.get(name) or ""))
            lines.extend(_options(sub))
    lines.append(".SH ENVIRONMENT")
    for var, text in ENVIRONMENT:
        lines.extend([".TP", f"\\fB{var}\\fR", _escape(text)])
    lines.append(".SH EXIT STATUS")
    for code, text in EXIT_STATUS:
        lines.extend([".TP", code, _escape(text)])
    return "\n".join(lines) + "\n"
