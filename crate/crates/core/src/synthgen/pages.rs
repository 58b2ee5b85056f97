//! Programmatic text-like pages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imagecore::RasterImage;

pub const TEST_PAGE_COUNT: usize = 5;

const INK: [f32; 3] = [0.08, 0.08, 0.1];

struct Canvas {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(width: usize, height: usize, paper: [f32; 3]) -> Self {
        let data = paper.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f32; 3]) {
        let xa = x0.round().max(0.0) as usize;
        let ya = y0.round().max(0.0) as usize;
        let xb = (x1.round().max(0.0) as usize).min(self.width);
        let yb = (y1.round().max(0.0) as usize).min(self.height);
        for y in ya..yb {
            for x in xa..xb {
                let i = (y * self.width + x) * 3;
                self.data[i..i + 3].copy_from_slice(&color);
            }
        }
    }
}

struct Layout {
    /// Baseline-to-baseline distance at 1200 px page width.
    line_pitch: f64,
    glyph_height: f64,
    columns: usize,
    title: bool,
    figure: bool,
    table: bool,
}

fn layout(index: usize) -> Layout {
    let base = Layout { line_pitch: 30.0, glyph_height: 14.0, columns: 1, title: false, figure: false, table: false };
    match index {
        0 => base,
        1 => Layout { line_pitch: 44.0, glyph_height: 20.0, title: true, ..base },
        2 => Layout { line_pitch: 26.0, glyph_height: 12.0, columns: 2, ..base },
        3 => Layout { figure: true, title: true, ..base },
        _ => Layout { table: true, ..base },
    }
}

/// Draws one word of glyph-like strokes; returns its right edge.
fn word(canvas: &mut Canvas, rng: &mut ChaCha8Rng, x: f64, baseline: f64, glyph_h: f64, s: f64, limit: f64) -> f64 {
    let stroke = (2.0 * s).max(1.0);
    let letters = rng.random_range(2..9);
    let mut cx = x;
    for _ in 0..letters {
        let gw = rng.random_range(6.0..11.0) * s;
        if cx + gw > limit {
            break;
        }
        let top = match rng.random_range(0..6) {
            0 => baseline - 1.5 * glyph_h,
            _ => baseline - glyph_h,
        };
        let bottom = if rng.random_range(0..8) == 0 { baseline + 0.5 * glyph_h } else { baseline };
        canvas.rect(cx, top, cx + stroke, bottom, INK);
        if rng.random_bool(0.6) {
            canvas.rect(cx + gw - stroke - 2.0 * s, baseline - glyph_h, cx + gw - 2.0 * s, baseline, INK);
        }
        let bar = match rng.random_range(0..3) {
            0 => baseline - glyph_h,
            1 => baseline - glyph_h / 2.0,
            _ => baseline - stroke,
        };
        canvas.rect(cx, bar, cx + gw - 2.0 * s, bar + stroke, INK);
        cx += gw;
    }
    cx
}

fn text_block(canvas: &mut Canvas, rng: &mut ChaCha8Rng, l: &Layout, s: f64, x0: f64, x1: f64, y0: f64, y1: f64) {
    let pitch = l.line_pitch * s;
    let glyph_h = l.glyph_height * s;
    let mut baseline = y0 + glyph_h * 1.5;
    while baseline < y1 {
        // ragged paragraph ends
        let end = if rng.random_range(0..7) == 0 { x0 + (x1 - x0) * rng.random_range(0.3..0.8) } else { x1 };
        let mut x = x0;
        while x < end - 20.0 * s {
            x = word(canvas, rng, x, baseline, glyph_h, s, end) + rng.random_range(8.0..14.0) * s;
        }
        baseline += pitch;
    }
}

/// Test page `index` (0-based, below [`TEST_PAGE_COUNT`]) rendered at the given size.
pub fn test_page(index: usize, width: usize, height: usize) -> Result<RasterImage> {
    if index >= TEST_PAGE_COUNT {
        return Err(Error::Config(format!("test page index {index} out of range 0..{TEST_PAGE_COUNT}")));
    }
    if width < 64 || height < 64 {
        return Err(Error::Size(format!("test page must be at least 64x64, got {width}x{height}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e57_0000 + index as u64);
    let s = width as f64 / 1200.0;
    let tone = rng.random_range(0.93..0.99) as f32;
    let mut canvas = Canvas::new(width, height, [tone, tone, tone * 0.98]);
    let l = layout(index);
    let (wf, hf) = (width as f64, height as f64);
    let (mx, my) = (0.08 * wf, 0.06 * hf);
    let mut top = my;
    if l.title {
        let title = Layout { line_pitch: 60.0, glyph_height: 30.0, ..layout(0) };
        text_block(&mut canvas, &mut rng, &title, s, wf * 0.25, wf * 0.75, top, top + 60.0 * s);
        top += 90.0 * s;
    }
    if l.figure {
        let (fx0, fy0, fx1, fy1) = (wf * 0.2, hf * 0.35, wf * 0.8, hf * 0.6);
        let (fw, fh) = (fx1 - fx0, fy1 - fy0);
        for y in fy0 as usize..fy1 as usize {
            for x in fx0 as usize..fx1 as usize {
                let (tx, ty) = ((x as f64 - fx0) / fw, (y as f64 - fy0) / fh);
                let color = [0.85 - 0.6 * tx as f32, 0.3 + 0.5 * ty as f32, 0.6 + 0.3 * (tx * ty) as f32];
                canvas.rect(x as f64, y as f64, x as f64 + 1.0, y as f64 + 1.0, color);
            }
        }
        text_block(&mut canvas, &mut rng, &l, s, mx, wf - mx, top, fy0 - 30.0 * s);
        text_block(&mut canvas, &mut rng, &l, s, mx, wf - mx, fy1 + 20.0 * s, hf - my);
    } else if l.table {
        text_block(&mut canvas, &mut rng, &l, s, mx, wf - mx, top, hf * 0.3);
        let (tx0, ty0, tx1, ty1) = (mx, hf * 0.35, wf - mx, hf * 0.75);
        let (cols, rows) = (4, 8);
        let line = (2.0 * s).max(1.0);
        for r in 0..=rows {
            let y = ty0 + (ty1 - ty0) * r as f64 / rows as f64;
            canvas.rect(tx0, y, tx1, y + line, INK);
        }
        for c in 0..=cols {
            let x = tx0 + (tx1 - tx0) * c as f64 / cols as f64;
            canvas.rect(x, ty0, x + line, ty1 + line, INK);
        }
        let (cw, ch) = ((tx1 - tx0) / cols as f64, (ty1 - ty0) / rows as f64);
        for r in 0..rows {
            for c in 0..cols {
                let x = tx0 + cw * c as f64 + 10.0 * s;
                let baseline = ty0 + ch * r as f64 + ch * 0.7;
                word(&mut canvas, &mut rng, x, baseline, l.glyph_height * s, s, x + cw - 20.0 * s);
            }
        }
        text_block(&mut canvas, &mut rng, &l, s, mx, wf - mx, hf * 0.78, hf - my);
    } else {
        let gap = 40.0 * s;
        let col_w = (wf - 2.0 * mx - gap * (l.columns - 1) as f64) / l.columns as f64;
        for c in 0..l.columns {
            let x0 = mx + c as f64 * (col_w + gap);
            text_block(&mut canvas, &mut rng, &l, s, x0, x0 + col_w, top, hf - my);
        }
    }
    let page = RasterImage::from_data(width, height, 3, canvas.data)?;
    page.blur((1.2 * s).max(1.0) as f32)
}
