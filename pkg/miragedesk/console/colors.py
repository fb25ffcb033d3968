try:
    from supports_color import supportsColor

    supports_truecolor: bool = getattr(supportsColor.stdout, "has16m", False)
except TypeError:
    supports_truecolor: bool = False

reset: str = "\x1b[0m"
bold: str = "\x1b[1m"
dim: str = "\x1b[2m"

red: str = "\x1b[31m"
green: str = "\x1b[32m"
yellow: str = "\x1b[33m"
blue: str = "\x1b[34m"
cyan: str = "\x1b[36m"

colors_dict: dict[str, str] = {
    "reset": reset,
    "bold": bold,
    "dim": dim,
    "red": red,
    "green": green,
    "yellow": yellow,
    "blue": blue,
    "cyan": cyan,
}

_ansi_rgb: dict[str, tuple[int, int, int]] = {
    "red": (170, 0, 0),
    "green": (0, 170, 0),
    "yellow": (170, 170, 0),
    "blue": (0, 0, 170),
    "cyan": (0, 170, 170),
}

# table and progress accents
palette: dict[str, str] = {
    "best": "#3CB371",
    "worst": "#CD5C5C",
    "stage": "#4682B4",
}


def nearest_ansi(rgb: tuple[int, int, int]) -> str:
    return colors_dict[min(_ansi_rgb, key=lambda n: sum(abs(a - b) for a, b in zip(_ansi_rgb[n], rgb)))]


def role_color(role: str, *, truecolor: bool = supports_truecolor) -> str:
    color_hex: str = palette[role].removeprefix("#")
    rgb: tuple[int, int, int] = int(color_hex[0:2], base=16), int(color_hex[2:4], base=16), int(color_hex[4:6], base=16)
    return "\x1b[38;2;{};{};{}m".format(*rgb) if truecolor else nearest_ansi(rgb)
