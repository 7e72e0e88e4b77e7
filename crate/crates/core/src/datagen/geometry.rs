//! Polygons in x20 base coordinates and their rasterization.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Polygon {
    pub vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Self {
        Self { vertices }
    }

    /// Star-shaped polygon: `n` vertices at increasing angles around
    /// `center`, radius `r * (1 + irregularity * wobble)` with `|wobble| <= 1`.
    /// Monotone angles make it simple for any irregularity below 1.
    pub fn star(center: [f64; 2], r: f64, irregularity: f64, n: usize, rng: &mut impl Rng) -> Self {
        let harmonics: Vec<(f64, f64, f64)> =
            (2..6).map(|k| (k as f64, rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.3..1.0))).collect();
        let norm: f64 = harmonics.iter().map(|h| h.2).sum();
        let phase0 = rng.random_range(0.0..std::f64::consts::TAU);
        let vertices = (0..n)
            .map(|i| {
                let a = phase0 + std::f64::consts::TAU * i as f64 / n as f64;
                let wobble: f64 = harmonics.iter().map(|&(k, p, w)| w * (k * a + p).sin()).sum::<f64>() / norm;
                let ri = r * (1.0 + irregularity * wobble);
                [center[0] + ri * a.cos(), center[1] + ri * a.sin()]
            })
            .collect();
        Self { vertices }
    }

    /// Shoelace area.
    pub fn area(&self) -> f64 {
        let v = &self.vertices;
        let mut s = 0.0;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            s += a[0] * b[1] - b[0] * a[1];
        }
        s.abs() / 2.0
    }

    pub fn scaled_about(&self, center: [f64; 2], k: f64) -> Self {
        Self {
            vertices: self.vertices.iter().map(|p| [center[0] + (p[0] - center[0]) * k, center[1] + (p[1] - center[1]) * k]).collect(),
        }
    }

    /// `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold((f64::MAX, f64::MAX, f64::MIN, f64::MIN), |b, p| {
            (b.0.min(p[0]), b.1.min(p[1]), b.2.max(p[0]), b.3.max(p[1]))
        })
    }

    fn crossing(a: [f64; 2], b: [f64; 2], py: f64) -> Option<f64> {
        ((a[1] <= py) != (b[1] <= py)).then(|| a[0] + (py - a[1]) * (b[0] - a[0]) / (b[1] - a[1]))
    }

    /// Even-odd membership of a point.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        for i in 0..v.len() {
            if let Some(x) = Self::crossing(v[i], v[(i + 1) % v.len()], py) {
                if x > px {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Calls `fill(y, x0, x1)` for every run of pixels `x0..x1` on row `y`
    /// whose centers lie inside, clipped to `width x height`. Agrees with
    /// [`Polygon::contains`] at every pixel center.
    pub fn scanlines(&self, width: usize, height: usize, mut fill: impl FnMut(usize, usize, usize)) {
        let (_, y0, _, y1) = self.bbox();
        let ys = (y0 - 1.0).floor().max(0.0) as usize;
        let ye = ((y1 + 1.0).ceil().max(0.0) as usize).min(height);
        let v = &self.vertices;
        let mut xs = Vec::new();
        for y in ys..ye {
            let py = y as f64 + 0.5;
            xs.clear();
            for i in 0..v.len() {
                if let Some(x) = Self::crossing(v[i], v[(i + 1) % v.len()], py) {
                    xs.push(x);
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                let a = first_center_at_or_after(pair[0]);
                let b = first_center_at_or_after(pair[1]);
                let (a, b) = (a.clamp(0, width as i64) as usize, b.clamp(0, width as i64) as usize);
                if a < b {
                    fill(y, a, b);
                }
            }
        }
    }
}

/// Smallest integer `x` with `x + 0.5 >= a`.
fn first_center_at_or_after(a: f64) -> i64 {
    let mut x = (a - 0.5).ceil() as i64;
    while (x as f64) + 0.5 < a {
        x += 1;
    }
    while ((x - 1) as f64) + 0.5 >= a {
        x -= 1;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Winding-number membership, written independently of the crossing rule.
    fn winding_contains(poly: &Polygon, px: f64, py: f64) -> bool {
        let v = &poly.vertices;
        let mut wn = 0i32;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[(i + 1) % v.len()]);
            let side = (b[0] - a[0]) * (py - a[1]) - (px - a[0]) * (b[1] - a[1]);
            if a[1] <= py && b[1] > py && side > 0.0 {
                wn += 1;
            } else if a[1] > py && b[1] <= py && side < 0.0 {
                wn -= 1;
            }
        }
        wn != 0
    }

    #[test]
    fn scanlines_match_independent_membership() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let c = [rng.random_range(20.0..80.0), rng.random_range(20.0..80.0)];
            let poly = Polygon::star(c, rng.random_range(5.0..40.0), 0.3, 24, &mut rng);
            let (w, h) = (100, 100);
            let mut grid = vec![false; w * h];
            poly.scanlines(w, h, |y, a, b| grid[y * w + a..y * w + b].iter_mut().for_each(|g| *g = true));
            for y in 0..h {
                for x in 0..w {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    assert_eq!(grid[y * w + x], winding_contains(&poly, px, py), "pixel {x},{y}");
                    assert_eq!(grid[y * w + x], poly.contains(px, py));
                }
            }
        }
    }

    #[test]
    fn area_matches_pixel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let poly = Polygon::star([500.0, 500.0], 300.0, 0.2, 32, &mut rng);
        let mut count = 0;
        poly.scanlines(1000, 1000, |_, a, b| count += b - a);
        let rel = (count as f64 - poly.area()).abs() / poly.area();
        assert!(rel < 0.01, "{rel}");
        let square = Polygon::new(vec![[0.0, 0.0], [4.0, 0.0], [4.0, 3.0], [0.0, 3.0]]);
        assert_eq!(square.area(), 12.0);
    }

    #[test]
    fn star_radius_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let poly = Polygon::star([0.0, 0.0], 10.0, 0.25, 40, &mut rng);
        for p in &poly.vertices {
            let r = p[0].hypot(p[1]);
            assert!((7.5 - 1e-9..=12.5 + 1e-9).contains(&r));
        }
    }
}
