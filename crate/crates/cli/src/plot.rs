//! Minimal deterministic PNG line charts: axes, ticks, grid, legend, and a
//! built-in 5x7 bitmap font. No system font or GUI dependencies, so report
//! output is byte-stable across machines.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 800;
const HEIGHT: u32 = 520;
const MARGIN_L: u32 = 78;
const MARGIN_R: u32 = 24;
const MARGIN_T: u32 = 46;
const MARGIN_B: u32 = 56;

pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [23, 190, 207],
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Glyph bitmaps: 7 rows of 5 bits, bit 4 leftmost.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110],
        '1' => [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        '2' => [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111],
        '3' => [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110],
        '4' => [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010],
        '5' => [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110],
        '6' => [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110],
        '7' => [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000],
        '8' => [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110],
        '9' => [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100],
        'a' => [0b00000, 0b00000, 0b01110, 0b00001, 0b01111, 0b10001, 0b01111],
        'b' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b11110],
        'c' => [0b00000, 0b00000, 0b01110, 0b10000, 0b10000, 0b10001, 0b01110],
        'd' => [0b00001, 0b00001, 0b01101, 0b10011, 0b10001, 0b10001, 0b01111],
        'e' => [0b00000, 0b00000, 0b01110, 0b10001, 0b11111, 0b10000, 0b01110],
        'f' => [0b00110, 0b01001, 0b01000, 0b11100, 0b01000, 0b01000, 0b01000],
        'g' => [0b00000, 0b01111, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'h' => [0b10000, 0b10000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'i' => [0b00100, 0b00000, 0b01100, 0b00100, 0b00100, 0b00100, 0b01110],
        'j' => [0b00010, 0b00000, 0b00110, 0b00010, 0b00010, 0b10010, 0b01100],
        'k' => [0b10000, 0b10000, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010],
        'l' => [0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110],
        'm' => [0b00000, 0b00000, 0b11010, 0b10101, 0b10101, 0b10101, 0b10101],
        'n' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10001, 0b10001, 0b10001],
        'o' => [0b00000, 0b00000, 0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
        'p' => [0b00000, 0b00000, 0b11110, 0b10001, 0b11110, 0b10000, 0b10000],
        'q' => [0b00000, 0b00000, 0b01101, 0b10011, 0b01111, 0b00001, 0b00001],
        'r' => [0b00000, 0b00000, 0b10110, 0b11001, 0b10000, 0b10000, 0b10000],
        's' => [0b00000, 0b00000, 0b01111, 0b10000, 0b01110, 0b00001, 0b11110],
        't' => [0b01000, 0b01000, 0b11100, 0b01000, 0b01000, 0b01001, 0b00110],
        'u' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b10011, 0b01101],
        'v' => [0b00000, 0b00000, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100],
        'w' => [0b00000, 0b00000, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010],
        'x' => [0b00000, 0b00000, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001],
        'y' => [0b00000, 0b00000, 0b10001, 0b10001, 0b01111, 0b00001, 0b01110],
        'z' => [0b00000, 0b00000, 0b11111, 0b00010, 0b00100, 0b01000, 0b11111],
        '.' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b01100, 0b01100],
        ',' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00110, 0b00100, 0b01000],
        ':' => [0b00000, 0b01100, 0b01100, 0b00000, 0b01100, 0b01100, 0b00000],
        '=' => [0b00000, 0b00000, 0b11111, 0b00000, 0b11111, 0b00000, 0b00000],
        '%' => [0b11001, 0b11010, 0b00010, 0b00100, 0b01000, 0b01011, 0b10011],
        '-' => [0b00000, 0b00000, 0b00000, 0b11111, 0b00000, 0b00000, 0b00000],
        '_' => [0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b00000, 0b11111],
        '/' => [0b00001, 0b00010, 0b00010, 0b00100, 0b01000, 0b01000, 0b10000],
        _ => [0; 7], // space and anything unmapped
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(color));
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: i64, color: [u8; 3]) {
    let text = text.to_ascii_lowercase();
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for bx in 0..5 {
                if row & (1 << (4 - bx)) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            put(
                                img,
                                cx + bx as i64 * scale + sx,
                                y + ry as i64 * scale + sy,
                                color,
                            );
                        }
                    }
                }
            }
        }
        cx += 6 * scale;
    }
}

fn text_width(text: &str, scale: i64) -> i64 {
    text.chars().count() as i64 * 6 * scale
}

fn draw_line(img: &mut RgbImage, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as i64).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        put(img, x.round() as i64, y.round() as i64, color);
        // thicken vertically for visibility
        put(img, x.round() as i64, y.round() as i64 + 1, color);
    }
}

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect()
}

fn format_tick(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

/// Render a line chart to a PNG file.
pub fn render_chart(
    path: &std::path::Path,
    title: &str,
    x_label: &str,
    y_label: &str,
    y_range: Option<(f64, f64)>,
    series: &[Series],
) -> Result<(), String> {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (px0, px1) = (MARGIN_L as f64, (WIDTH - MARGIN_R) as f64);
    let (py0, py1) = ((HEIGHT - MARGIN_B) as f64, MARGIN_T as f64);

    let xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    let ys: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .collect();
    if xs.is_empty() {
        return Err("nothing to plot".into());
    }
    let x_lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut x_hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    let (y_lo, y_hi) = match y_range {
        Some(r) => r,
        None => {
            let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let pad = ((hi - lo).abs() * 0.08).max(1e-9);
            ((lo - pad).min(0.0), hi + pad)
        }
    };

    let to_px = |x: f64| px0 + (x - x_lo) / (x_hi - x_lo) * (px1 - px0);
    let to_py = |y: f64| py0 + (y - y_lo) / (y_hi - y_lo) * (py1 - py0);

    // grid + ticks
    let grid = [225, 225, 225];
    let axis = [40, 40, 40];
    for &ty in nice_ticks(y_lo, y_hi, 5).iter() {
        let y = to_py(ty);
        draw_line(&mut img, px0, y, px1, y, grid);
        let label = format_tick(ty);
        draw_text(
            &mut img,
            px0 as i64 - text_width(&label, 1) - 6,
            y as i64 - 3,
            &label,
            1,
            axis,
        );
    }
    for &tx in nice_ticks(x_lo, x_hi, 6).iter() {
        let x = to_px(tx);
        draw_line(&mut img, x, py0, x, py1, grid);
        let label = format_tick(tx);
        draw_text(
            &mut img,
            x as i64 - text_width(&label, 1) / 2,
            py0 as i64 + 8,
            &label,
            1,
            axis,
        );
    }
    // axes
    draw_line(&mut img, px0, py0, px1, py0, axis);
    draw_line(&mut img, px0, py0, px0, py1, axis);

    // series
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for pair in pts.windows(2) {
            draw_line(
                &mut img,
                to_px(pair[0].0),
                to_py(pair[0].1),
                to_px(pair[1].0),
                to_py(pair[1].1),
                color,
            );
        }
        for &(x, y) in &pts {
            let (cx, cy) = (to_px(x).round() as i64, to_py(y).round() as i64);
            for dy in -1..=1 {
                for dx in -1..=1i64 {
                    put(&mut img, cx + dx, cy + dy, color);
                }
            }
        }
    }

    // legend, top-right inside the plot area
    let mut ly = MARGIN_T as i64 + 6;
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let lx = px1 as i64 - text_width(&s.label, 1) - 26;
        for dy in 0..7 {
            for dx in 0..14 {
                put(&mut img, lx + dx, ly + dy, color);
            }
        }
        draw_text(&mut img, lx + 18, ly, &s.label, 1, axis);
        ly += 12;
    }

    draw_text(
        &mut img,
        (WIDTH as i64 - text_width(title, 2)) / 2,
        12,
        title,
        2,
        axis,
    );
    draw_text(
        &mut img,
        (px0 as i64 + px1 as i64 - text_width(x_label, 1)) / 2,
        HEIGHT as i64 - 22,
        x_label,
        1,
        axis,
    );
    draw_text(&mut img, 8, MARGIN_T as i64 - 20, y_label, 1, axis);

    img.save(path).map_err(|e| format!("write {}: {e}", path.display()))
}
