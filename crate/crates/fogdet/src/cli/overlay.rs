//! Box-overlay rendering: per-class colors, rectangle outlines, and a
//! small built-in bitmap font for class labels and confidences.

use crate::detection::Detection;
use crate::error::Result;
use crate::raster::ImageTensor;
use image::RgbImage;

/// Distinct per-class colors, reused modulo the palette size.
pub const CLASS_COLORS: [[u8; 3]; 8] = [
    [230, 57, 70],
    [42, 157, 143],
    [69, 123, 157],
    [244, 162, 97],
    [131, 56, 236],
    [6, 141, 157],
    [188, 108, 37],
    [58, 90, 64],
];

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 row bitmaps, most significant bit leftmost.
fn glyph(c: char) -> [u8; GLYPH_H] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '%' => [0x19, 0x1A, 0x02, 0x04, 0x08, 0x0B, 0x13],
        _ => [0x00; GLYPH_H],
    }
}

fn put_pixel(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

/// Draws `text` with its top-left corner at `(x, y)`, one pixel between
/// glyphs. Pixels outside the image are dropped.
pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let rows = glyph(c);
        for (dy, row) in rows.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row >> (GLYPH_W - 1 - dx) & 1 == 1 {
                    put_pixel(img, cx + dx as i64, y + dy as i64, color);
                }
            }
        }
        cx += (GLYPH_W + 1) as i64;
    }
}

/// Pixel width of `text` as drawn by [`draw_text`].
pub fn text_width(text: &str) -> usize {
    let n = text.chars().count();
    if n == 0 {
        0
    } else {
        n * (GLYPH_W + 1) - 1
    }
}

/// Rectangle outline of the given thickness, clipped to the image.
pub fn draw_rect(
    img: &mut RgbImage,
    x_min: i64,
    y_min: i64,
    x_max: i64,
    y_max: i64,
    thickness: i64,
    color: [u8; 3],
) {
    for t in 0..thickness {
        for x in (x_min - t)..=(x_max + t) {
            put_pixel(img, x, y_min - t, color);
            put_pixel(img, x, y_max + t, color);
        }
        for y in (y_min - t)..=(y_max + t) {
            put_pixel(img, x_min - t, y, color);
            put_pixel(img, x_max + t, y, color);
        }
    }
}

fn fill_rect(img: &mut RgbImage, x_min: i64, y_min: i64, x_max: i64, y_max: i64, color: [u8; 3]) {
    for y in y_min..=y_max {
        for x in x_min..=x_max {
            put_pixel(img, x, y, color);
        }
    }
}

/// Renders detections onto a copy of `image`: colored box outline plus a
/// filled tag carrying the class name and confidence.
pub fn overlay_detections(
    image: &ImageTensor,
    dets: &[Detection],
    class_names: &[String],
) -> Result<RgbImage> {
    let mut img = image.to_rgb8()?;
    for det in dets {
        let color = CLASS_COLORS[det.class_id % CLASS_COLORS.len()];
        let b = det.bbox;
        let (x0, y0) = (b.x_min.round() as i64, b.y_min.round() as i64);
        let (x1, y1) = (b.x_max.round() as i64 - 1, b.y_max.round() as i64 - 1);
        draw_rect(&mut img, x0, y0, x1, y1, 2, color);
        let name = class_names
            .get(det.class_id)
            .map(String::as_str)
            .unwrap_or("?");
        let label = format!("{} {:.2}", name, det.score);
        let tag_h = GLYPH_H as i64 + 2;
        let tag_y = if y0 - tag_h >= 0 { y0 - tag_h } else { y0 };
        let tag_w = text_width(&label) as i64 + 2;
        fill_rect(&mut img, x0, tag_y, x0 + tag_w, tag_y + tag_h - 1, color);
        draw_text(&mut img, x0 + 1, tag_y + 1, &label, [255, 255, 255]);
    }
    Ok(img)
}
