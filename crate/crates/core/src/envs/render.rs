//! Low-resolution schematic rasters of the true state. Background is 0,
//! drawn objects are in (0, 1].

use super::EnvKind;

struct Canvas {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        Canvas {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    fn put(&mut self, x: i64, y: i64, value: f64) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let p = &mut self.pixels[y as usize * self.width + x as usize];
            *p = p.max(value);
        }
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, value: f64) {
        for y in y0.round() as i64..y1.round() as i64 {
            for x in x0.round() as i64..x1.round() as i64 {
                self.put(x, y, value);
            }
        }
    }

    /// Pixels whose centre lies within `radius` of the segment.
    fn segment(&mut self, a: (f64, f64), b: (f64, f64), radius: f64, value: f64) {
        let (minx, maxx) = (a.0.min(b.0) - radius, a.0.max(b.0) + radius);
        let (miny, maxy) = (a.1.min(b.1) - radius, a.1.max(b.1) + radius);
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = dx * dx + dy * dy;
        for y in miny.floor() as i64..=maxy.ceil() as i64 {
            for x in minx.floor() as i64..=maxx.ceil() as i64 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
                if cx * cx + cy * cy <= radius * radius {
                    self.put(x, y, value);
                }
            }
        }
    }

    fn disk(&mut self, c: (f64, f64), radius: f64, value: f64) {
        self.segment(c, c, radius, value);
    }
}

/// Cart body rows for a given raster height, `[top, bottom)`.
pub fn cart_rows(height: usize) -> (usize, usize) {
    let bottom = (height as f64 * 0.8).round() as usize;
    let top = bottom.saturating_sub((height as f64 * 0.08).round().max(2.0) as usize);
    (top, bottom)
}

/// Renders `state` (the environment's semantic state vector) as a
/// `height x width` row-major grayscale image.
pub fn render_raster(kind: EnvKind, state: &[f64], width: usize, height: usize) -> Vec<f64> {
    let mut c = Canvas::new(width, height);
    let (w, h) = (width as f64, height as f64);
    match kind {
        EnvKind::CartPole | EnvKind::CartPoleCont => {
            let (x, theta) = (state[0], state[2]);
            let span = 2.4 * 1.2;
            let cx = (x + span) / (2.0 * span) * w;
            let (top, bottom) = cart_rows(height);
            let half = (w * 0.08).max(1.5);
            c.rect(cx - half, top as f64, cx + half, bottom as f64, 1.0);
            let pole = h * 0.35;
            let base = (cx, top as f64);
            let tip = (cx + pole * theta.sin(), top as f64 - pole * theta.cos());
            c.segment(base, (tip.0, tip.1), 0.75, 0.7);
        }
        EnvKind::MountainCar => {
            let to_px = |p: f64| {
                let u = (p + 1.2) / 1.8;
                let v = (3.0 * p).sin() * 0.45 + 0.55;
                (u * (w - 1.0) + 0.5, (1.0 - v) * (h * 0.8) + h * 0.1)
            };
            let samples = 4 * width;
            for i in 0..samples {
                let p = -1.2 + 1.8 * i as f64 / (samples - 1) as f64;
                let q = to_px(p);
                c.put(q.0.floor() as i64, q.1.floor() as i64, 0.4);
            }
            let car = to_px(state[0]);
            c.disk(car, (w * 0.05).max(1.5), 1.0);
        }
        EnvKind::Pendulum => {
            let theta = state[1].atan2(state[0]);
            let centre = (w / 2.0, h / 2.0);
            let len = w.min(h) * 0.4;
            let tip = (centre.0 + len * theta.sin(), centre.1 - len * theta.cos());
            c.segment(centre, tip, 1.2, 1.0);
        }
        EnvKind::Acrobot => {
            let t1 = state[1].atan2(state[0]);
            let t2 = state[3].atan2(state[2]);
            let centre = (w / 2.0, h / 2.0);
            let len = w.min(h) * 0.22;
            let p1 = (centre.0 + len * t1.sin(), centre.1 + len * t1.cos());
            let p2 = (p1.0 + len * (t1 + t2).sin(), p1.1 + len * (t1 + t2).cos());
            c.segment(centre, p1, 1.0, 1.0);
            c.segment(p1, p2, 1.0, 0.7);
        }
        EnvKind::Tabular => {
            // grid embedding coordinates, one lit pixel per state
            let x = state.first().copied().unwrap_or(0.0);
            let y = state.get(1).copied().unwrap_or(0.0);
            c.put(x.round() as i64, y.round() as i64, 1.0);
        }
    }
    c.pixels
}
