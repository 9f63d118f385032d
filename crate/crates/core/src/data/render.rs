//! Rendering text lines with a 5×7 dot font onto grayscale grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GrayImage;
use crate::error::{Error, Result};

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
/// Horizontal advance per character at scale 1.
pub const ADVANCE: usize = 6;
pub const INK: u8 = 255;

#[rustfmt::skip]
const FONT: [[&str; 7]; 26] = [
    [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
    ["#### ", "#   #", "#   #", "#### ", "#   #", "#   #", "#### "],
    [" ### ", "#   #", "#    ", "#    ", "#    ", "#   #", " ### "],
    ["#### ", "#   #", "#   #", "#   #", "#   #", "#   #", "#### "],
    ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"],
    ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#    "],
    [" ### ", "#   #", "#    ", "# ###", "#   #", "#   #", " ####"],
    ["#   #", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"],
    [" ### ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    ["  ###", "   # ", "   # ", "   # ", "   # ", "#  # ", " ##  "],
    ["#   #", "#  # ", "# #  ", "##   ", "# #  ", "#  # ", "#   #"],
    ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"],
    ["#   #", "## ##", "# # #", "# # #", "#   #", "#   #", "#   #"],
    ["#   #", "#   #", "##  #", "# # #", "#  ##", "#   #", "#   #"],
    [" ### ", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
    ["#### ", "#   #", "#   #", "#### ", "#    ", "#    ", "#    "],
    [" ### ", "#   #", "#   #", "#   #", "# # #", "#  # ", " ## #"],
    ["#### ", "#   #", "#   #", "#### ", "# #  ", "#  # ", "#   #"],
    [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "],
    ["#####", "  #  ", "  #  ", "  #  ", "  #  ", "  #  ", "  #  "],
    ["#   #", "#   #", "#   #", "#   #", "#   #", "#   #", " ### "],
    ["#   #", "#   #", "#   #", "#   #", "#   #", " # # ", "  #  "],
    ["#   #", "#   #", "#   #", "# # #", "# # #", "# # #", " # # "],
    ["#   #", "#   #", " # # ", "  #  ", " # # ", "#   #", "#   #"],
    ["#   #", "#   #", " # # ", "  #  ", "  #  ", "  #  ", "  #  "],
    ["#####", "    #", "   # ", "  #  ", " #   ", "#    ", "#####"],
];

#[rustfmt::skip]
const BOX: [&str; 7] = ["#####", "#   #", "#   #", "#   #", "#   #", "#   #", "#####"];

/// 35-bit dot pattern of `c`. A capital is its lowercase shape with the
/// left column inverted; space is blank and anything else renders as a box.
pub fn glyph(c: char) -> [[bool; GLYPH_W]; GLYPH_H] {
    let (rows, capital): ([&str; 7], bool) = match c {
        ' ' => return [[false; GLYPH_W]; GLYPH_H],
        'a'..='z' => (FONT[c as usize - 'a' as usize], false),
        'A'..='Z' => (FONT[c as usize - 'A' as usize], true),
        _ => (BOX, false),
    };
    let mut g = [[false; GLYPH_W]; GLYPH_H];
    for (y, row) in rows.iter().enumerate() {
        for (x, ch) in row.chars().enumerate() {
            g[y][x] = ch == '#';
        }
        if capital {
            g[y][0] = !g[y][0];
        }
    }
    g
}

/// Number of differing dots between two glyphs.
pub fn glyph_distance(a: char, b: char) -> usize {
    let (ga, gb) = (glyph(a), glyph(b));
    ga.iter()
        .zip(&gb)
        .map(|(ra, rb)| ra.iter().zip(rb).filter(|(x, y)| x != y).count())
        .sum()
}

/// Layout and noise of rendered lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    pub width: usize,
    pub height: usize,
    pub min_scale: usize,
    pub max_scale: usize,
    /// Largest random left offset in pixels.
    pub max_dx: usize,
    /// Largest random top offset in pixels.
    pub max_dy: usize,
    /// Per-pixel salt-and-pepper probability.
    pub noise: f64,
}

impl Default for RenderSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 64,
            min_scale: 1,
            max_scale: 2,
            max_dx: 8,
            max_dy: 8,
            noise: 0.01,
        }
    }
}

impl RenderSpec {
    /// One 8-pixel text row; each character occupies one 6-pixel column,
    /// so a 8×6 patch grid lines up with the characters.
    pub fn strip(chars: usize) -> Self {
        Self {
            width: chars * ADVANCE,
            height: 8,
            min_scale: 1,
            max_scale: 1,
            max_dx: 1,
            max_dy: 1,
            noise: 0.01,
        }
    }

    /// Characters that fit at scale 1 with no offset.
    pub fn capacity(&self) -> usize {
        (self.width + 1) / ADVANCE
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_scale == 0 || self.min_scale > self.max_scale {
            return Err(Error::invalid("render", "scales must satisfy 1 ≤ min ≤ max"));
        }
        if self.height < GLYPH_H * self.min_scale || self.width < GLYPH_W * self.min_scale {
            return Err(Error::invalid("render", "image smaller than one glyph"));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::invalid("render", "noise outside [0, 1]"));
        }
        Ok(())
    }
}

fn text_width(chars: usize, scale: usize) -> usize {
    if chars == 0 {
        0
    } else {
        (chars * ADVANCE - 1) * scale
    }
}

/// Deterministic rendering of `text` from `(spec, seed)`. A drawn scale
/// that does not fit falls back to the largest one that does.
pub fn render_text_image(text: &str, spec: &RenderSpec, seed: u64) -> Result<GrayImage> {
    spec.validate()?;
    let chars: Vec<char> = text.chars().collect();
    if text_width(chars.len(), spec.min_scale) > spec.width {
        return Err(Error::invalid(
            "render",
            format!("text of {} characters exceeds the {}-pixel width", chars.len(), spec.width),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = rng.random_range(spec.min_scale..=spec.max_scale);
    while scale > spec.min_scale && (text_width(chars.len(), scale) > spec.width || GLYPH_H * scale > spec.height) {
        scale -= 1;
    }
    let room_x = spec.width - text_width(chars.len(), scale);
    let room_y = spec.height - GLYPH_H * scale;
    let dx = rng.random_range(0..=spec.max_dx.min(room_x));
    let dy = rng.random_range(0..=spec.max_dy.min(room_y));

    let mut img = GrayImage::filled(spec.width, spec.height, 0);
    for (i, &c) in chars.iter().enumerate() {
        let g = glyph(c);
        let x0 = dx + i * ADVANCE * scale;
        for (gy, row) in g.iter().enumerate() {
            for (gx, &on) in row.iter().enumerate() {
                if !on {
                    continue;
                }
                for sy in 0..scale {
                    for sx in 0..scale {
                        img.set(x0 + gx * scale + sx, dy + gy * scale + sy, INK);
                    }
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for y in 0..spec.height {
            for x in 0..spec.width {
                if rng.random::<f64>() < spec.noise {
                    img.set(x, y, if rng.random::<bool>() { INK } else { 0 });
                }
            }
        }
    }
    Ok(img)
}
