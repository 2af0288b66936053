//! Procedural generator of labeled scenes that stress the two failure modes
//! the model targets: regions whose textures overlap heavily (a convex
//! polygon vs a rotated bar whose base colors differ by far less than the
//! shared noise), and fine tubular structure (a 1–2 px curved thread).
//!
//! Classes: 0 background, 1 polygon, 2 bar, 3 thread. The thread is drawn
//! last and wins overlaps; the bar overwrites the polygon.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TafeError};
use crate::io::{self, GrayImage, RgbImage};
use crate::tensor::Tensor;

pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_POLYGON: u8 = 1;
pub const CLASS_BAR: u8 = 2;
pub const CLASS_THREAD: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Per-class base RGB. Classes 1 and 2 are deliberately close (max channel
/// gap 0.04) so the pair is near-unsolvable by color alone under the noise.
pub const BASE_COLOR: [[f64; 3]; NUM_CLASSES] = [
    [0.35, 0.33, 0.36],
    [0.52, 0.48, 0.50],
    [0.48, 0.50, 0.52],
    [0.85, 0.82, 0.80],
];

/// Shared per-pixel Gaussian noise applied to every class alike.
pub const NOISE_SIGMA: f64 = 0.15;

/// Retry budget for degenerate random geometry before giving up.
const GEOMETRY_RETRIES: usize = 10;

/// Parameters of one generated scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub seed: u64,
}

/// One labeled scene: RGB image in `[0,1]` and a class-id mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, h, w)`, values in `[0,1]`.
    pub image: Tensor,
    /// `(1, 1, h, w)`, values in `{0..3}` stored exactly.
    pub mask: Tensor,
}

impl Sample {
    /// Mask as row-major class ids.
    pub fn labels(&self) -> Vec<u8> {
        self.mask.data().iter().map(|&v| v as u8).collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Pt {
    x: f64,
    y: f64,
}

fn cross(o: Pt, a: Pt, b: Pt) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Andrew's monotone chain: lower then upper chain over x-sorted points,
/// strict turns only, shared endpoints dropped.
fn convex_hull(mut pts: Vec<Pt>) -> Vec<Pt> {
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).unwrap());
    let mut hull: Vec<Pt> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let chain: Vec<Pt> = if pass == 0 {
            pts.clone()
        } else {
            pts.iter().rev().copied().collect()
        };
        for p in chain {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop(); // chain endpoint is the other chain's start
    }
    hull
}

fn shoelace_area(poly: &[Pt]) -> f64 {
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a.x * b.y - a.y * b.x;
    }
    acc.abs() / 2.0
}

/// Winding-agnostic convex containment: the point sits on one side of every
/// edge.
fn inside_convex(poly: &[Pt], p: Pt) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..poly.len() {
        let c = cross(poly[i], poly[(i + 1) % poly.len()], p);
        if c > 0.0 {
            pos = true;
        } else if c < 0.0 {
            neg = true;
        }
    }
    !(pos && neg)
}

/// Convex polygon with 5–9 vertices: hull of 12 points in a random disk,
/// retried while the hull is outside the vertex range or too small.
fn gen_polygon(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Vec<Pt>> {
    let dim = h.min(w) as f64;
    let min_area = 0.10 * (h * w) as f64;
    for _ in 0..GEOMETRY_RETRIES {
        let r = (0.26 + 0.08 * rng.random::<f64>()) * dim;
        let margin = 2.0;
        let cx = margin + r + rng.random::<f64>() * (w as f64 - 2.0 * (margin + r));
        let cy = margin + r + rng.random::<f64>() * (h as f64 - 2.0 * (margin + r));
        let pts: Vec<Pt> = (0..12)
            .map(|_| {
                let ang = rng.random::<f64>() * TAU;
                let rad = r * rng.random::<f64>().sqrt();
                Pt {
                    x: cx + rad * ang.cos(),
                    y: cy + rad * ang.sin(),
                }
            })
            .collect();
        let hull = convex_hull(pts);
        if (5..=9).contains(&hull.len()) && shoelace_area(&hull) >= min_area {
            return Ok(hull);
        }
    }
    Err(TafeError::Data(format!(
        "no usable polygon after {GEOMETRY_RETRIES} attempts at {h}x{w}"
    )))
}

struct Bar {
    cx: f64,
    cy: f64,
    /// unit direction along the bar
    ux: f64,
    uy: f64,
    half_len: f64,
    half_width: f64,
}

impl Bar {
    fn contains(&self, p: Pt) -> bool {
        let dx = p.x - self.cx;
        let dy = p.y - self.cy;
        let along = dx * self.ux + dy * self.uy;
        let across = -dx * self.uy + dy * self.ux;
        along.abs() <= self.half_len && across.abs() <= self.half_width
    }
}

fn gen_bar(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<Bar> {
    let dim = h.min(w) as f64;
    for _ in 0..GEOMETRY_RETRIES {
        let len = (0.45 + 0.30 * rng.random::<f64>()) * dim;
        let width = 3.5 + 2.5 * rng.random::<f64>();
        let ang = rng.random::<f64>() * TAU;
        // bounding radius keeps the whole rectangle inside the frame
        let radius = ((len / 2.0).powi(2) + (width / 2.0).powi(2)).sqrt() + 1.0;
        if 2.0 * radius >= w as f64 || 2.0 * radius >= h as f64 {
            continue;
        }
        let cx = radius + rng.random::<f64>() * (w as f64 - 2.0 * radius);
        let cy = radius + rng.random::<f64>() * (h as f64 - 2.0 * radius);
        return Ok(Bar {
            cx,
            cy,
            ux: ang.cos(),
            uy: ang.sin(),
            half_len: len / 2.0,
            half_width: width / 2.0,
        });
    }
    Err(TafeError::Data(format!(
        "no usable bar after {GEOMETRY_RETRIES} attempts at {h}x{w}"
    )))
}

/// Catmull-Rom interpolation between p1 and p2 with neighbors p0, p3.
fn catmull_rom(p0: Pt, p1: Pt, p2: Pt, p3: Pt, t: f64) -> Pt {
    let basis = |a: f64, b: f64, c: f64, d: f64| {
        0.5 * (2.0 * b
            + (c - a) * t
            + (2.0 * a - 5.0 * b + 4.0 * c - d) * t * t
            + (3.0 * b - a - 3.0 * c + d) * t * t * t)
    };
    Pt {
        x: basis(p0.x, p1.x, p2.x, p3.x),
        y: basis(p0.y, p1.y, p2.y, p3.y),
    }
}

/// Thread control points: a fixed-step random walk kept inside the frame by
/// resampling the direction, so segment lengths never collapse.
fn gen_thread_points(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Pt> {
    let scale = h.min(w) as f64 / 64.0;
    // margin covers the spline's worst-case bulge past its control points
    // (≤ 4/27 of the summed tangent lengths ≈ 6 px) plus the stamp radius
    let margin = 7.0 * scale;
    let (lo, hi) = (12.0 * scale, 20.0 * scale);
    let inside = |p: Pt| {
        p.x >= margin && p.x <= w as f64 - margin && p.y >= margin && p.y <= h as f64 - margin
    };
    let mut pts = vec![Pt {
        x: margin + rng.random::<f64>() * (w as f64 - 2.0 * margin),
        y: margin + rng.random::<f64>() * (h as f64 - 2.0 * margin),
    }];
    for _ in 0..3 {
        let prev = *pts.last().unwrap();
        let mut next = None;
        for _ in 0..32 {
            let ang = rng.random::<f64>() * TAU;
            let len = lo + rng.random::<f64>() * (hi - lo);
            let cand = Pt {
                x: prev.x + len * ang.cos(),
                y: prev.y + len * ang.sin(),
            };
            if inside(cand) {
                next = Some(cand);
                break;
            }
        }
        let next = next.unwrap_or_else(|| {
            // step toward the frame center, clamped to the margin box
            let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
            let (dx, dy) = (cx - prev.x, cy - prev.y);
            let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
            Pt {
                x: (prev.x + lo * dx / norm).clamp(margin, w as f64 - margin),
                y: (prev.y + lo * dy / norm).clamp(margin, h as f64 - margin),
            }
        });
        pts.push(next);
    }
    pts
}

/// Stamps a disk of `radius` around `p` into `mask` with class `id`.
fn stamp(mask: &mut [u8], h: usize, w: usize, p: Pt, radius: f64, id: u8) {
    let x0 = ((p.x - radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((p.x + radius + 1.0).ceil().min(w as f64 - 1.0)) as usize;
    let y0 = ((p.y - radius - 1.0).floor().max(0.0)) as usize;
    let y1 = ((p.y + radius + 1.0).ceil().min(h as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 + 0.5 - p.x;
            let dy = y as f64 + 0.5 - p.y;
            if dx * dx + dy * dy <= radius * radius {
                mask[y * w + x] = id;
            }
        }
    }
}

/// Generates one labeled scene, fully determined by the spec.
pub fn gen_scene(spec: &SceneSpec) -> Result<Sample> {
    let (h, w) = (spec.h, spec.w);
    if h.min(w) < 32 {
        return Err(TafeError::Config(format!(
            "scene needs at least 32 px per side, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let polygon = gen_polygon(&mut rng, h, w)?;
    let bar = gen_bar(&mut rng, h, w)?;
    let thread_pts = gen_thread_points(&mut rng, h, w);
    let thread_radius = 0.5 + 0.5 * rng.random::<f64>();

    let mut mask = vec![CLASS_BACKGROUND; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = Pt {
                x: x as f64 + 0.5,
                y: y as f64 + 0.5,
            };
            if inside_convex(&polygon, p) {
                mask[y * w + x] = CLASS_POLYGON;
            }
            if bar.contains(p) {
                mask[y * w + x] = CLASS_BAR;
            }
        }
    }
    // thread on top: padded control points give 3 spline segments
    let mut padded = vec![thread_pts[0]];
    padded.extend_from_slice(&thread_pts);
    padded.push(*thread_pts.last().unwrap());
    for seg in 0..thread_pts.len() - 1 {
        for step in 0..=120 {
            let t = step as f64 / 120.0;
            let p = catmull_rom(padded[seg], padded[seg + 1], padded[seg + 2], padded[seg + 3], t);
            stamp(&mut mask, h, w, p, thread_radius, CLASS_THREAD);
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = BASE_COLOR[mask[y * w + x] as usize];
            for (c, &b) in base.iter().enumerate() {
                image[c * h * w + y * w + x] = (b + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }

    Ok(Sample {
        image: Tensor::new(1, 3, h, w, image)?,
        mask: Tensor::new(1, 1, h, w, mask.iter().map(|&v| v as f64).collect())?,
    })
}

/// One image/mask pair in a dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub seed: u64,
}

/// Manifest written next to the generated files.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub samples: Vec<ManifestEntry>,
    pub spec: ManifestSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSpec {
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub base_seed: u64,
    pub count: usize,
}

/// Generates `n` scenes with seeds `base_seed..base_seed+n`, writing 8-bit
/// PPM images, PGM class-id masks, and `manifest.json`.
pub fn gen_dataset(n: usize, base_seed: u64, h: usize, w: usize, out_dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let seed = base_seed + i as u64;
        let sample = gen_scene(&SceneSpec { h, w, seed })?;
        let image_name = format!("img_{i:04}.ppm");
        let mask_name = format!("mask_{i:04}.pgm");
        io::write_ppm(&out_dir.join(&image_name), &RgbImage::from_tensor(&sample.image)?)?;
        io::write_pgm(
            &out_dir.join(&mask_name),
            &GrayImage::new(w, h, sample.labels())?,
        )?;
        samples.push(ManifestEntry {
            image: image_name,
            mask: mask_name,
            seed,
        });
    }
    let manifest = DatasetManifest {
        samples,
        spec: ManifestSpec {
            h,
            w,
            classes: NUM_CLASSES,
            base_seed,
            count: n,
        },
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| TafeError::Format(e.to_string()))?;
    io::write_atomic(&out_dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

/// A dataset sample loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    /// `(1, 3, h, w)` in `[0,1]` (8-bit quantized).
    pub image: Tensor,
    /// row-major class ids
    pub labels: Vec<u8>,
    pub path: PathBuf,
}

/// Reads a manifest and every image/mask pair it lists.
pub fn load_dataset(dir: &Path) -> Result<(ManifestSpec, Vec<LoadedSample>)> {
    let manifest_path = dir.join("manifest.json");
    let bytes = std::fs::read(&manifest_path)
        .map_err(|e| TafeError::Data(format!("reading {}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| TafeError::Format(format!("manifest.json: {e}")))?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let image_path = dir.join(&entry.image);
        let image = io::read_ppm(&image_path)?.to_tensor();
        let mask = io::read_pgm(&dir.join(&entry.mask))?;
        if mask.width != manifest.spec.w || mask.height != manifest.spec.h {
            return Err(TafeError::Shape(format!(
                "mask {} is {}x{}, manifest says {}x{}",
                entry.mask, mask.width, mask.height, manifest.spec.w, manifest.spec.h
            )));
        }
        if let Some(&bad) = mask.pixels.iter().find(|&&v| v as usize >= manifest.spec.classes) {
            return Err(TafeError::Data(format!(
                "mask {} holds label {bad} outside 0..{}",
                entry.mask, manifest.spec.classes
            )));
        }
        out.push(LoadedSample {
            image,
            labels: mask.pixels,
            path: image_path,
        });
    }
    Ok((manifest.spec, out))
}
