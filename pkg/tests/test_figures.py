"""Figure rendering: files appear, survive odd inputs, and repeat
byte-identically."""

from aeropipe.figures import availability_figure, parity_figure
from aeropipe.metrics import ParityRow, RateStat

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _stats():
    return [
        RateStat("network:airqo-like", "2025-04", 720, 1000),
        RateStat("network:airqo-like", "2025-05", 700, 1000),
        RateStat("network:iqair-like", "2025-04", 645, 1000),
        RateStat("network:iqair-like", "2025-05", 0, 0),  # N/A month plots as a hole
        RateStat("all", "2025-04", 1365, 2000),
        RateStat("device:airqo-like-001", "2025-04", 70, 100),
    ]


def test_availability_figure_renders_png(tmp_path):
    p = tmp_path / "sub" / "availability.png"
    availability_figure(_stats(), p)
    data = p.read_bytes()
    assert data.startswith(PNG_MAGIC)
    assert len(data) > 1000


def test_availability_figure_is_byte_stable(tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    availability_figure(_stats(), a)
    availability_figure(_stats(), b)
    assert a.read_bytes() == b.read_bytes()


def test_parity_figure_renders_png(tmp_path):
    p = tmp_path / "parity.png"
    parity_figure(
        [ParityRow("2025-05", 153000, 152000), ParityRow("2025-04", 159000, 158000)], p
    )
    assert p.read_bytes().startswith(PNG_MAGIC)


def test_figures_accept_empty_inputs(tmp_path):
    availability_figure([], tmp_path / "empty-a.png")
    parity_figure([], tmp_path / "empty-p.png")
    assert (tmp_path / "empty-a.png").exists()
    assert (tmp_path / "empty-p.png").exists()
