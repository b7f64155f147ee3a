//! Minimal raster scatter plot of accuracy against bootstrap count. There is
//! no text; axis ticks mark whole bootstraps and tenths of accuracy.

use image::{ImageFormat, Rgb, RgbImage};
use polyboot::{Error, Result};

const W: u32 = 640;
const H: u32 = 420;
const MARGIN: f64 = 40.0;
const GREY: Rgb<u8> = Rgb([150, 150, 150]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const RED: Rgb<u8> = Rgb([200, 30, 30]);

struct Frame {
    x_max: f64,
    y_min: f64,
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let u = MARGIN + x / self.x_max * (W as f64 - 2.0 * MARGIN);
        let v = H as f64 - MARGIN - (y - self.y_min) / (1.0 - self.y_min) * (H as f64 - 2.0 * MARGIN);
        (u, v)
    }
}

fn put(img: &mut RgbImage, u: f64, v: f64, c: Rgb<u8>) {
    if u >= 0.0 && v >= 0.0 && (u as u32) < W && (v as u32) < H {
        img.put_pixel(u as u32, v as u32, c);
    }
}

fn square(img: &mut RgbImage, u: f64, v: f64, r: i32, c: Rgb<u8>) {
    for du in -r..=r {
        for dv in -r..=r {
            put(img, u + du as f64, v + dv as f64, c);
        }
    }
}

fn line(img: &mut RgbImage, a: (f64, f64), b: (f64, f64), c: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), c);
    }
}

/// PNG with `points` in grey and the `front` (sorted by bootstraps) in red,
/// joined by a staircase.
pub fn pareto_png(points: &[(f64, f64)], front: &[(f64, f64)]) -> Result<Vec<u8>> {
    let all = points.iter().chain(front);
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max) + 1.0;
    let y_min = (all.map(|p| p.1).fold(1.0, f64::min) * 10.0).floor() / 10.0;
    let f = Frame { x_max, y_min: y_min.min(0.9) };
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

    let origin = f.px(0.0, f.y_min);
    line(&mut img, origin, f.px(f.x_max, f.y_min), BLACK);
    line(&mut img, origin, f.px(0.0, 1.0), BLACK);
    let x_step = (f.x_max / 20.0).ceil().max(1.0);
    let mut x = 0.0;
    while x <= f.x_max {
        let (u, v) = f.px(x, f.y_min);
        line(&mut img, (u, v), (u, v + 4.0), BLACK);
        x += x_step;
    }
    let mut y = f.y_min;
    while y <= 1.0 + 1e-9 {
        let (u, v) = f.px(0.0, y);
        line(&mut img, (u - 4.0, v), (u, v), BLACK);
        y += 0.1;
    }

    for &(x, y) in points {
        let (u, v) = f.px(x, y);
        square(&mut img, u, v, 2, GREY);
    }
    for pair in front.windows(2) {
        let (a, b) = (f.px(pair[0].0, pair[0].1), f.px(pair[1].0, pair[1].1));
        line(&mut img, a, (b.0, a.1), RED);
        line(&mut img, (b.0, a.1), b, RED);
    }
    for &(x, y) in front {
        let (u, v) = f.px(x, y);
        square(&mut img, u, v, 3, RED);
    }

    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).map_err(|e| Error::Io(e.to_string()))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_a_decodable_png() {
        let bytes = pareto_png(&[(3.0, 0.8), (5.0, 0.9)], &[(0.0, 0.7), (3.0, 0.85), (7.0, 0.95)]).unwrap();
        let img = image::load_from_memory(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (W, H));
        assert!(!pareto_png(&[], &[]).unwrap().is_empty());
    }
}
