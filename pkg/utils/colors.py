"""
Rendering of ``<<color>>`` tags into ANSI escape codes.

Log messages across the project may embed tags such as ``<<green>>`` or
``<<lightblue>>``; ``<<default>>`` closes the current color and ``<<previous>>``
restores the one before it.
"""

import functools
import re

_TAG = re.compile(r"<<(\w+)>>")


@functools.lru_cache(maxsize=1)
def get_color_table() -> dict:
    codes = {
        "red": 91,
        "green": 92,
        "yellow": 93,
        "blue": 94,
        "purple": 95,
        "cyan": 96,
        "white": 97,
        "gray": 100,
        "bold": 1,
        "underline": 4,
    }
    table = {name: f"\033[{code}m%s\033[00m" for name, code in codes.items()}

    for name in ["purple", "yellow", "blue", "red", "green", "cyan", "gray"]:
        table[f"light{name}"] = table[name]

    table["aqua"] = table["cyan"]
    table["grey"] = table["gray"]
    return table


def make_str(message):
    """
    Replace color tags in ``message`` with ANSI codes.

    Non-string messages are returned unchanged, as are strings with no tags.

    Args:
        message: Text possibly containing ``<<color>>`` tags

    Returns:
        The rendered text
    """
    if not isinstance(message, str) or "<<" not in message:
        return message

    table = get_color_table()
    parts = _TAG.split(message)
    stack = ["default"]
    rendered = ""

    # parts alternates text, tag, text, tag, ...
    for index, chunk in enumerate(parts):
        if index % 2 == 1:
            if chunk == "previous":
                if len(stack) > 1:
                    stack.pop()
            else:
                stack.append(chunk)
            continue
        if not chunk:
            continue
        fmt = table.get(stack[-1])
        rendered += fmt % chunk if fmt else chunk

    return rendered


def strip_tags(message: str) -> str:
    """Drop color tags, for writing messages to files."""
    return _TAG.sub("", message)
