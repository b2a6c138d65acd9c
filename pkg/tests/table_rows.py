"""Per-layer architecture rows typed out as literal strings.

Independent of ``ffnet.network.PRESET_TABLE``: the oracles below parse these
strings themselves so a typo in either copy shows up as a mismatch.
Columns: volume shape, number of volumes, volume output, output shape.
"""

ROWS = {
    "ffn16": [
        "4x4x3 4x4x1 64 4x4x64",
        "1x1x64 4x4x1 64 4x4x64",
        "2x2x64 2x2x1 256 2x2x256",
        "1x1x256 2x2x1 256 2x2x256",
        "2x2x64 1x1x4 256 1x1x1024",
        "1x1x1024 1x1x1 1024 1x1x1024",
    ],
    "ffn32": [
        "4x4x3 8x8x1 64 8x8x64",
        "1x1x64 8x8x1 64 8x8x64",
        "2x2x64 4x4x1 256 4x4x256",
        "1x1x256 4x4x1 256 4x4x256",
        "2x2x64 2x2x4 256 2x2x1024",
        "1x1x1024 2x2x1 1024 2x2x1024",
        "2x2x64 1x1x16 128 1x1x2048",
        "1x1x2048 1x1x1 2048 1x1x2048",
    ],
    "ffn96": [
        "6x6x3 16x16x1 64 16x16x64",
        "1x1x64 16x16x1 64 16x16x64",
        "2x2x64 8x8x1 256 8x8x256",
        "1x1x256 8x8x1 256 8x8x256",
        "2x2x64 4x4x4 256 4x4x1024",
        "1x1x1024 4x4x1 1024 4x4x1024",
        "2x2x64 2x2x16 128 2x2x2048",
        "1x1x2048 2x2x1 2048 2x2x2048",
        "2x2x64 1x1x32 128 1x1x4096",
        "1x1x4096 1x1x1 4096 1x1x4096",
    ],
}


def parse(row: str):
    vol, num, out, shape = row.split()
    dims = lambda s: tuple(int(t) for t in s.split("x"))  # noqa: E731
    return dims(vol), dims(num), int(out), dims(shape)


def brute_force_counts(name: str) -> tuple[int, int]:
    """(parameters, MACs) by explicit summation over every volume's weights."""
    params = macs = 0
    for row in ROWS[name]:
        (vh, vw, vc), (nh, nw, nc), out, _ = parse(row)
        for _volume in range(nh * nw * nc):
            for _o in range(out):
                weights = vh * vw * vc
                params += weights + 1  # weights plus one bias
                macs += weights
    return params, macs
