import io

from typing import Sequence

from PIL import Image

from svglib.svglib import svg2rlg  # type: ignore
from reportlab.graphics import renderPM  # type: ignore

COLUMNS = 2


def convert_svg_to_png(svg_bytes: bytes) -> Image.Image:
    svg_buffer = io.BytesIO(svg_bytes)
    drawing = svg2rlg(svg_buffer)
    if drawing is None:
        raise RuntimeError('Error reading SVG drawing')

    png_buffer = io.BytesIO()
    try:
        renderPM.drawToFile(drawing, png_buffer, fmt="PNG")
    except Exception as e:
        raise RuntimeError(f"Error converting drawing to PNG: {e}")

    png_buffer.seek(0)
    img = Image.open(png_buffer)
    img.load()
    return img.convert('RGB')


def composite_png(svg_paths: Sequence[str]) -> Image.Image:
    """Lay the charts out on a two-column sheet, row by row."""
    if not svg_paths:
        raise ValueError('composite_png: no charts')
    images = []
    for path in svg_paths:
        with open(path, 'rb') as handle:
            images.append(convert_svg_to_png(handle.read()))

    width = max(img.size[0] for img in images)
    height = max(img.size[1] for img in images)
    rows = (len(images) + COLUMNS - 1) // COLUMNS
    columns = min(COLUMNS, len(images))

    composite_image = Image.new('RGB', (width * columns, height * rows), 'white')
    for index, img in enumerate(images):
        row, column = divmod(index, COLUMNS)
        composite_image.paste(img, (column * width, row * height))

    return composite_image
