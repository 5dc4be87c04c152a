//! Visual check of a transcription: pre, post and mask panels side by side
//! with the 3×3 location grid, per-class centroid markers and the rendered
//! description as a caption.

use std::path::Path;

use font8x8::UnicodeFonts;
use image::{imageops, Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ChangeMask, Direction};

const GRID: Rgb<u8> = Rgb([255, 255, 255]);
const CAPTION_BG: Rgb<u8> = Rgb([20, 20, 20]);
const CAPTION_FG: Rgb<u8> = Rgb([235, 235, 235]);
const MISSING_PANEL: Rgb<u8> = Rgb([64, 64, 64]);
const GLYPH: u32 = 8;
const PAD: u32 = 4;

/// Marker colours, cycled per class.
const MARKER_COLOURS: [[u8; 3]; 8] = [
    [255, 221, 0],
    [0, 229, 255],
    [255, 64, 200],
    [120, 255, 64],
    [255, 128, 0],
    [160, 96, 255],
    [255, 255, 255],
    [0, 128, 255],
];

/// Where a class centroid was drawn, in overlay coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Marker {
    pub class_index: u16,
    pub location: Direction,
    /// Centroid in mask coordinates.
    pub centroid: (f64, f64),
    /// Pixel position inside the mask panel of the composite.
    pub panel_position: (u32, u32),
    pub colour: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct Overlay {
    pub image: RgbImage,
    pub markers: Vec<Marker>,
    /// Left edge of the mask panel.
    pub mask_panel_x: u32,
}

/// Inputs for one composite.
pub struct OverlayInput<'a> {
    pub mask: &'a ChangeMask,
    pub pre: Option<&'a Path>,
    pub post: Option<&'a Path>,
    /// Colour per class index used in the mask panel.
    pub class_colours: &'a [(u16, [u8; 3])],
    /// `(class_index, location, centroid)` per transcribed class.
    pub centroids: &'a [(u16, Direction, (f64, f64))],
    pub caption: &'a str,
}

fn load_panel(path: Option<&Path>, width: u32, height: u32) -> Result<RgbImage> {
    let Some(path) = path else {
        return Ok(RgbImage::from_pixel(width, height, MISSING_PANEL));
    };
    let img = image::open(path)
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .to_rgb8();
    if img.dimensions() == (width, height) {
        Ok(img)
    } else {
        Ok(imageops::resize(
            &img,
            width,
            height,
            imageops::FilterType::Nearest,
        ))
    }
}

fn mask_panel(mask: &ChangeMask, colours: &[(u16, [u8; 3])]) -> RgbImage {
    let (w, h) = (mask.width() as u32, mask.height() as u32);
    let mut img = RgbImage::new(w, h);
    for (i, &label) in mask.labels().iter().enumerate() {
        if label == 0 {
            continue;
        }
        let c = colours
            .iter()
            .find(|(idx, _)| *idx == label)
            .map(|(_, c)| *c)
            .unwrap_or(MARKER_COLOURS[label as usize % MARKER_COLOURS.len()]);
        img.put_pixel(i as u32 % w, i as u32 / w, Rgb(c));
    }
    img
}

/// Lines at the band boundaries, i.e. the first column/row of the middle and
/// last thirds.
fn draw_grid(img: &mut RgbImage, x0: u32, w: u32, h: u32) {
    let cols = [w.div_ceil(3), (2 * w).div_ceil(3)];
    let rows = [h.div_ceil(3), (2 * h).div_ceil(3)];
    for &c in &cols {
        if c < w {
            for y in 0..h {
                img.put_pixel(x0 + c, y, GRID);
            }
        }
    }
    for &r in &rows {
        if r < h {
            for x in 0..w {
                img.put_pixel(x0 + x, r, GRID);
            }
        }
    }
}

fn draw_marker(img: &mut RgbImage, cx: u32, cy: u32, colour: Rgb<u8>, limit_x: (u32, u32), h: u32) {
    let arm = 4i64;
    for d in -arm..=arm {
        for (x, y) in [(cx as i64 + d, cy as i64), (cx as i64, cy as i64 + d)] {
            if x >= limit_x.0 as i64 && x < limit_x.1 as i64 && y >= 0 && y < h as i64 {
                img.put_pixel(x as u32, y as u32, colour);
            }
        }
    }
}

fn wrap(text: &str, max_chars: usize) -> Vec<String> {
    let mut lines = Vec::new();
    let mut line = String::new();
    for word in text.split_whitespace() {
        if !line.is_empty() && line.len() + 1 + word.len() > max_chars {
            lines.push(std::mem::take(&mut line));
        }
        if !line.is_empty() {
            line.push(' ');
        }
        line.push_str(word);
    }
    if !line.is_empty() {
        lines.push(line);
    }
    lines
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str) {
    for (i, ch) in text.chars().enumerate() {
        let glyph = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) != 0 {
                    let x = x0 + i as u32 * GLYPH + col;
                    let y = y0 + row as u32;
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, CAPTION_FG);
                    }
                }
            }
        }
    }
}

/// Composes pre | post | mask with grid, markers and caption.
pub fn render_overlay(input: &OverlayInput) -> Result<Overlay> {
    let (w, h) = (input.mask.width() as u32, input.mask.height() as u32);
    let pre = load_panel(input.pre, w, h)?;
    let post = load_panel(input.post, w, h)?;
    let mask = mask_panel(input.mask, input.class_colours);

    let total_w = 3 * w;
    let max_chars = ((total_w.saturating_sub(2 * PAD)) / GLYPH).max(1) as usize;
    let lines = wrap(input.caption, max_chars);
    let caption_h = lines.len().max(1) as u32 * (GLYPH + 2) + 2 * PAD;

    let mut img = RgbImage::from_pixel(total_w, h + caption_h, CAPTION_BG);
    for (i, panel) in [&pre, &post, &mask].into_iter().enumerate() {
        imageops::replace(&mut img, panel, i as i64 * w as i64, 0);
        draw_grid(&mut img, i as u32 * w, w, h);
    }

    let mask_x = 2 * w;
    let mut markers = Vec::with_capacity(input.centroids.len());
    for (k, &(class_index, location, (cx, cy))) in input.centroids.iter().enumerate() {
        let colour = MARKER_COLOURS[k % MARKER_COLOURS.len()];
        let px = (cx.round() as u32).min(w - 1);
        let py = (cy.round() as u32).min(h - 1);
        for x0 in [0, w, mask_x] {
            draw_marker(&mut img, x0 + px, py, Rgb(colour), (x0, x0 + w), h);
        }
        markers.push(Marker {
            class_index,
            location,
            centroid: (cx, cy),
            panel_position: (mask_x + px, py),
            colour,
        });
    }

    for (i, line) in lines.iter().enumerate() {
        draw_text(&mut img, PAD, h + PAD + i as u32 * (GLYPH + 2), line);
    }
    Ok(Overlay {
        image: img,
        markers,
        mask_panel_x: mask_x,
    })
}

pub fn save_overlay(overlay: &Overlay, path: &Path) -> Result<()> {
    overlay.image.save(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}
