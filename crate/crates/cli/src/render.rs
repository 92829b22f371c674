//! Detection overlays written as PNG: base classes in blues, novel classes in reds.

use std::io::BufWriter;
use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};
use itfa_core::inference::Detection;
use itfa_core::synthdata::{AnnotatedImage, ClassVocabulary};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Integer upscaling of the source raster (nearest neighbour).
    pub scale: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { scale: 4 }
    }
}

/// Colour of a foreground class; `None` for background or unknown indices.
pub fn class_color(vocab: &ClassVocabulary, class_index: usize) -> Option<[u8; 3]> {
    if vocab.is_base(class_index) {
        let slot = class_index as u32;
        Some([(20 + 35 * (slot % 5)) as u8, (80 + 30 * (slot % 6)) as u8, 255])
    } else {
        let slot = vocab.novel_slot(class_index)? as u32;
        Some([255, (40 + 35 * (slot % 6)) as u8, (30 + 20 * (slot % 5)) as u8])
    }
}

/// Nearest-neighbour upscaled copy of the image pixels.
pub fn rasterize(image: &AnnotatedImage, scale: u32) -> RgbImage {
    let (h, w) = (image.height() as u32, image.width() as u32);
    RgbImage::from_fn(w * scale, h * scale, |x, y| {
        let (r, c) = ((y / scale) as usize, (x / scale) as usize);
        let px = |ch: usize| (image.pixels[[r, c, ch]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

pub fn render_detections(image: &AnnotatedImage, detections: &[Detection], vocab: &ClassVocabulary, path: &Path) -> Result<()> {
    render_detections_with(image, detections, vocab, path, RenderOptions::default())
}

/// Draws each detection's box and a `name score` label, then writes a PNG.
pub fn render_detections_with(
    image: &AnnotatedImage,
    detections: &[Detection],
    vocab: &ClassVocabulary,
    path: &Path,
    options: RenderOptions,
) -> Result<()> {
    let scale = options.scale.max(1);
    let mut canvas = rasterize(image, scale);
    for d in detections {
        let color = class_color(vocab, d.class_index).ok_or_else(|| {
            itfa_core::Error::Argument(format!("detection class index {} is not a foreground class", d.class_index))
        })?;
        let s = scale as f64;
        let (x1, y1) = ((d.bbox.x1 * s).round() as i64, (d.bbox.y1 * s).round() as i64);
        let (x2, y2) = ((d.bbox.x2 * s).round() as i64 - 1, (d.bbox.y2 * s).round() as i64 - 1);
        let thick = (scale as i64 / 2).max(1);
        for t in 0..thick {
            draw_rect(&mut canvas, x1 + t, y1 + t, x2 - t, y2 - t, Rgb(color));
        }
        let label = format!("{} {:.2}", vocab.name_of(d.class_index).unwrap_or("?"), d.score);
        let glyph = (scale / 2).max(1) as i64;
        let text_h = 5 * glyph + 2;
        let ty = if y1 >= text_h { y1 - text_h } else { y1 + thick };
        let text_w = label.chars().count() as i64 * 4 * glyph + 1;
        fill_rect(&mut canvas, x1, ty, x1 + text_w - 1, ty + text_h - 1, Rgb(color));
        draw_text(&mut canvas, x1 + 1, ty + 1, &label, glyph, Rgb([255, 255, 255]));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    canvas.write_to(&mut BufWriter::new(file), ImageFormat::Png)?;
    Ok(())
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_rect(img: &mut RgbImage, x1: i64, y1: i64, x2: i64, y2: i64, c: Rgb<u8>) {
    if x2 < x1 || y2 < y1 {
        return;
    }
    for x in x1..=x2 {
        put(img, x, y1, c);
        put(img, x, y2, c);
    }
    for y in y1..=y2 {
        put(img, x1, y, c);
        put(img, x2, y, c);
    }
}

fn fill_rect(img: &mut RgbImage, x1: i64, y1: i64, x2: i64, y2: i64, c: Rgb<u8>) {
    for y in y1..=y2 {
        for x in x1..=x2 {
            put(img, x, y, c);
        }
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, px: i64, c: Rgb<u8>) {
    for (i, ch) in text.chars().enumerate() {
        let rows = glyph(ch);
        let ox = x + i as i64 * 4 * px;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..3 {
                if bits & (0b100 >> col) != 0 {
                    fill_rect(img, ox + col * px, y + r as i64 * px, ox + (col + 1) * px - 1, y + (r as i64 + 1) * px - 1, c);
                }
            }
        }
    }
}

/// 3×5 glyphs, one 3-bit row per entry, most significant bit on the left.
fn glyph(ch: char) -> [u8; 5] {
    match ch.to_ascii_lowercase() {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        'a' => [2, 5, 7, 5, 5],
        'b' => [6, 5, 6, 5, 6],
        'c' => [3, 4, 4, 4, 3],
        'd' => [6, 5, 5, 5, 6],
        'e' => [7, 4, 6, 4, 7],
        'f' => [7, 4, 6, 4, 4],
        'g' => [3, 4, 5, 5, 3],
        'h' => [5, 5, 7, 5, 5],
        'i' => [7, 2, 2, 2, 7],
        'j' => [1, 1, 1, 5, 2],
        'k' => [5, 5, 6, 5, 5],
        'l' => [4, 4, 4, 4, 7],
        'm' => [5, 7, 7, 5, 5],
        'n' => [6, 5, 5, 5, 5],
        'o' => [2, 5, 5, 5, 2],
        'p' => [6, 5, 6, 4, 4],
        'q' => [2, 5, 5, 6, 3],
        'r' => [6, 5, 6, 5, 5],
        's' => [3, 4, 2, 1, 6],
        't' => [7, 2, 2, 2, 2],
        'u' => [5, 5, 5, 5, 7],
        'v' => [5, 5, 5, 5, 2],
        'w' => [5, 5, 7, 7, 5],
        'x' => [5, 5, 2, 5, 5],
        'y' => [5, 5, 2, 2, 2],
        'z' => [7, 1, 2, 4, 7],
        '.' => [0, 0, 0, 0, 2],
        '-' => [0, 0, 7, 0, 0],
        '_' => [0, 0, 0, 0, 7],
        ':' => [0, 2, 0, 2, 0],
        ' ' => [0; 5],
        _ => [7, 1, 2, 0, 2],
    }
}
