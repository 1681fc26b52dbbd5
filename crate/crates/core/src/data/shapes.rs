//! Synthetic "shapes" dataset: colored circles, squares and triangles over
//! smooth noise backgrounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DenseImage, ImageLevelLabels, InMemoryDataset, LabelMask, Sample, SegDataset};
use crate::error::{Error, Result};

const MIN_CANVAS: usize = 64;
const MAX_SHAPES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    fn from_class(class: u8) -> Self {
        match class {
            1 => ShapeKind::Circle,
            2 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        }
    }
}

#[derive(Debug, Clone)]
struct Placed {
    kind: ShapeKind,
    cy: f64,
    cx: f64,
    radius: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        match self.kind {
            ShapeKind::Circle => dy * dy + dx * dx <= self.radius * self.radius,
            ShapeKind::Square => {
                let (s, c) = self.angle.sin_cos();
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                let half = self.radius * 0.8;
                u.abs() <= half && v.abs() <= half
            }
            ShapeKind::Triangle => {
                // Equilateral triangle with circumradius `radius`: inside all
                // three half-planes at distance radius/2 from the center.
                (0..3).all(|k| {
                    let a = self.angle + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                    dx * a.cos() + dy * a.sin() <= self.radius * 0.5
                })
            }
        }
    }
}

/// Smooth lattice value noise in [0, 1] with `octaves` layers.
struct ValueNoise {
    cells: usize,
    lattice: Vec<Vec<f64>>,
}

impl ValueNoise {
    fn new(rng: &mut impl Rng, cells: usize, octaves: usize) -> Self {
        let lattice = (0..octaves)
            .map(|o| {
                let n = cells << o;
                (0..(n + 1) * (n + 1)).map(|_| rng.gen::<f64>()).collect()
            })
            .collect();
        Self { cells, lattice }
    }

    fn sample(&self, u: f64, v: f64) -> f64 {
        let mut total = 0.0;
        let mut amp = 1.0;
        let mut norm = 0.0;
        for (o, lat) in self.lattice.iter().enumerate() {
            let n = self.cells << o;
            let (fu, fv) = (u * n as f64, v * n as f64);
            let (iu, iv) = ((fu.floor() as usize).min(n - 1), (fv.floor() as usize).min(n - 1));
            let (tu, tv) = (smooth(fu - iu as f64), smooth(fv - iv as f64));
            let at = |a: usize, b: usize| lat[a * (n + 1) + b];
            let top = at(iv, iu) * (1.0 - tu) + at(iv, iu + 1) * tu;
            let bot = at(iv + 1, iu) * (1.0 - tu) + at(iv + 1, iu + 1) * tu;
            total += amp * (top * (1.0 - tv) + bot * tv);
            norm += amp;
            amp *= 0.5;
        }
        total / norm
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

/// Saturated, bright object color.
fn object_color(rng: &mut impl Rng) -> [f64; 3] {
    hsv(rng.gen(), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0))
}

/// Muted background color.
fn background_color(rng: &mut impl Rng) -> [f64; 3] {
    hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.15..0.75))
}

fn quantize(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32
}

/// Draws one synthetic sample. Classes 1, 2, 3 are circle, square, triangle;
/// `num_classes` restricts which of them may appear. Pixel values are
/// multiples of 1/255 so the sample survives an 8-bit PNG round trip.
pub fn generate_shapes_sample(
    rng: &mut impl Rng,
    canvas: (usize, usize),
    num_classes: usize,
) -> Result<(DenseImage, LabelMask, ImageLevelLabels)> {
    let (h, w) = canvas;
    if h < MIN_CANVAS || w < MIN_CANVAS {
        return Err(Error::config("canvas", format!("must be at least {MIN_CANVAS}x{MIN_CANVAS}, got {h}x{w}")));
    }
    if !(2..=4).contains(&num_classes) {
        return Err(Error::config("num_classes", format!("shapes supports 2, 3 or 4 classes, got {num_classes}")));
    }
    let side = h.min(w) as f64;

    let tone = ValueNoise::new(rng, 3, 3);
    let grain = ValueNoise::new(rng, 12, 1);
    let bg_a = background_color(rng);
    let bg_b = background_color(rng);

    let count = rng.gen_range(1..=MAX_SHAPES);
    let mut placed: Vec<Placed> = Vec::new();
    let mut colors = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(1..num_classes) as u8;
        let radius = side * rng.gen_range(0.14..0.26);
        let mut ok = None;
        for _ in 0..50 {
            let cy = rng.gen_range(radius..h as f64 - radius);
            let cx = rng.gen_range(radius..w as f64 - radius);
            let clear = placed.iter().all(|p| {
                let d = ((p.cy - cy).powi(2) + (p.cx - cx).powi(2)).sqrt();
                d > p.radius + radius + 2.0
            });
            if clear {
                ok = Some((cy, cx));
                break;
            }
        }
        if let Some((cy, cx)) = ok {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            placed.push(Placed { kind: ShapeKind::from_class(class), cy, cx, radius, angle });
            colors.push((class, object_color(rng)));
        }
    }

    let mut pixels = Vec::with_capacity(h * w * 3);
    let mut classes = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let hit = placed.iter().zip(&colors).find(|(p, _)| p.contains(py, px));
            let g = grain.sample(u, v) - 0.5;
            let (class, rgb) = match hit {
                Some((_, (class, color))) => {
                    let shade = 0.9 + 0.2 * tone.sample(v, u);
                    (*class, color.map(|c| c * shade + 0.06 * g))
                }
                None => {
                    let t = tone.sample(u, v);
                    let mut rgb = [0.0; 3];
                    for c in 0..3 {
                        rgb[c] = bg_a[c] * (1.0 - t) + bg_b[c] * t + 0.12 * g;
                    }
                    (0, rgb)
                }
            };
            classes.push(class);
            pixels.extend(rgb.iter().map(|&c| quantize(c)));
        }
    }
    let mask = LabelMask::new(h, w, classes);
    let labels = mask.image_level_labels(num_classes);
    Ok((DenseImage::from_raw(h, w, pixels), mask, labels))
}

/// A generated, in-memory shapes dataset. Sample `i` depends only on
/// `(seed, i)`, so datasets of different sizes share their common prefix.
#[derive(Debug, Clone)]
pub struct ShapesDataset {
    inner: InMemoryDataset,
}

impl ShapesDataset {
    pub fn generate(count: usize, seed: u64, canvas: (usize, usize), num_classes: usize, prefix: &str) -> Result<Self> {
        let samples = (0..count)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let (image, mask, _) = generate_shapes_sample(&mut rng, canvas, num_classes)?;
                Ok(Sample { id: format!("{prefix}{i:05}"), image, mask })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { inner: InMemoryDataset::new(samples, num_classes) })
    }

    pub fn into_inner(self) -> InMemoryDataset {
        self.inner
    }

    pub fn samples(&self) -> &[Sample] {
        &self.inner.samples
    }
}

impl SegDataset for ShapesDataset {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn id(&self, index: usize) -> &str {
        self.inner.id(index)
    }

    fn get(&self, index: usize) -> Result<Sample> {
        self.inner.get(index)
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }
}
