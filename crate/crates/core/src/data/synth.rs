//! Synthetic multi-client segmentation corpus.
//!
//! Each client renders disks, ellipses, rings or harmonic blobs with its own
//! intensity window, background, texture noise, colour tint and class
//! frequencies. RGB clients go through 8-bit quantisation and
//! [`rgb_normalize`]; volumetric clients render raw intensities with hot
//! outliers, are normalised per volume with [`percentile_normalize`] and
//! then cut into slices with [`slice_volume`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::preprocess::{downsample_nearest, percentile_normalize, rgb_normalize, slice_volume};
use crate::data::{ClientDataset, SegSample};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

const MASK_STRIDE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Disk,
    Ellipse,
    Ring,
    Blob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Modality {
    Rgb,
    Volume { depth: usize },
}

/// Generative parameters of one client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub name: String,
    pub modality: Modality,
    pub families: Vec<ShapeFamily>,
    /// Output value window for RGB clients, raw intensity window for volumes.
    pub intensity: [f32; 2],
    /// Range of the background level, as a fraction of the window.
    pub background: [f32; 2],
    /// Standard deviation of per-pixel noise, as a fraction of the window.
    pub noise: f32,
    /// Probability that each class appears in a scene.
    pub class_freq: Vec<f32>,
    pub tint: [f32; 3],
}

impl ClientProfile {
    fn key(&self) -> Vec<u32> {
        let mut k: Vec<u32> = self.intensity.iter().chain(&self.background).map(|v| v.to_bits()).collect();
        k.push(self.noise.to_bits());
        k.extend(self.class_freq.iter().chain(&self.tint).map(|v| v.to_bits()));
        k.extend(self.families.iter().map(|f| *f as u32));
        k.push(match self.modality {
            Modality::Rgb => 0,
            Modality::Volume { depth } => 1 + depth as u32,
        });
        k
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("client {:?}: {m}", self.name)));
        if self.families.is_empty() {
            return bad("no shape families".into());
        }
        if self.class_freq.len() != num_classes {
            return bad(format!("{} class frequencies for {num_classes} classes", self.class_freq.len()));
        }
        if self.class_freq.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("class frequency outside [0, 1]".into());
        }
        if !(self.intensity[0] < self.intensity[1]) || !(self.background[0] <= self.background[1]) {
            return bad("empty intensity or background range".into());
        }
        if let Modality::Rgb = self.modality {
            if self.intensity[0] < 0.0 || self.intensity[1] > 1.0 {
                return bad("RGB intensity window must lie in [0, 1]".into());
            }
        }
        if let Modality::Volume { depth: 0 } = self.modality {
            return bad("volume depth must be positive".into());
        }
        if self.noise < 0.0 {
            return bad("negative noise".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationSpec {
    pub clients: Vec<ClientProfile>,
    pub input_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

fn default_profiles(num_classes: usize) -> [ClientProfile; 4] {
    let freq = |a: f32, b: f32| -> Vec<f32> { (0..num_classes).map(|k| if k % 2 == 0 { a } else { b }).collect() };
    [
        ClientProfile {
            name: "rgb-warm".into(),
            modality: Modality::Rgb,
            families: vec![ShapeFamily::Disk, ShapeFamily::Ellipse],
            intensity: [0.0, 0.7],
            background: [0.15, 0.3],
            noise: 0.03,
            class_freq: freq(0.9, 0.45),
            tint: [1.0, 0.8, 0.65],
        },
        ClientProfile {
            name: "rgb-cool".into(),
            modality: Modality::Rgb,
            families: vec![ShapeFamily::Ellipse, ShapeFamily::Blob],
            intensity: [0.25, 1.0],
            background: [0.3, 0.45],
            noise: 0.06,
            class_freq: freq(0.75, 0.7),
            tint: [0.7, 0.85, 1.0],
        },
        ClientProfile {
            name: "vol-mr".into(),
            modality: Modality::Volume { depth: 6 },
            families: vec![ShapeFamily::Blob, ShapeFamily::Ring],
            intensity: [40.0, 1800.0],
            background: [0.05, 0.15],
            noise: 0.05,
            class_freq: freq(0.85, 0.5),
            tint: [1.0, 1.0, 1.0],
        },
        ClientProfile {
            name: "vol-ct".into(),
            modality: Modality::Volume { depth: 6 },
            families: vec![ShapeFamily::Ring, ShapeFamily::Disk],
            intensity: [-200.0, 900.0],
            background: [0.35, 0.45],
            noise: 0.08,
            class_freq: freq(0.65, 0.85),
            tint: [1.0, 1.0, 1.0],
        },
    ]
}

impl FederationSpec {
    /// `k` clients cycling through four base profiles (two RGB, two
    /// volumetric); repeats get shifted noise and background so every
    /// profile stays distinct.
    pub fn synthetic(k: usize, input_size: usize, num_classes: usize, seed: u64) -> Self {
        let base = default_profiles(num_classes);
        let clients = (0..k)
            .map(|i| {
                let mut p = base[i % 4].clone();
                let lap = (i / 4) as f32;
                if lap > 0.0 {
                    p.name = format!("{}-{}", p.name, i / 4);
                    p.noise += 0.01 * lap;
                    p.background = [p.background[0] + 0.02 * lap, p.background[1] + 0.02 * lap];
                }
                p
            })
            .collect();
        Self {
            clients,
            input_size,
            num_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients.is_empty() {
            return Err(Error::Config("federation needs at least one client".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % MASK_STRIDE != 0 {
            return Err(Error::Config(format!("input_size {} not divisible by 4", self.input_size)));
        }
        for (i, a) in self.clients.iter().enumerate() {
            a.validate(self.num_classes)?;
            if self.clients[..i].iter().any(|b| b.key() == a.key()) {
                return Err(Error::Config(format!("client {:?} duplicates another profile", a.name)));
            }
        }
        Ok(())
    }

    pub fn mask_size(&self) -> usize {
        self.input_size / MASK_STRIDE
    }
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self::synthetic(4, 64, 2, 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Geometry {
    Disk { r: f32 },
    Ellipse { rx: f32, ry: f32, theta: f32 },
    Ring { outer: f32, inner: f32 },
    /// Radius `r * (1 + Σ amp_k sin(k θ + phase_k))` for k = 2, 3, 5.
    Blob { r: f32, harmonics: [[f32; 2]; 3] },
}

/// A generating shape in input-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub class: usize,
    pub cx: f32,
    pub cy: f32,
    pub geometry: Geometry,
}

impl Shape {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.geometry {
            Geometry::Disk { r } => dx * dx + dy * dy <= r * r,
            Geometry::Ellipse { rx, ry, theta } => {
                let (s, c) = theta.sin_cos();
                let u = (dx * c + dy * s) / rx;
                let v = (-dx * s + dy * c) / ry;
                u * u + v * v <= 1.0
            }
            Geometry::Ring { outer, inner } => {
                let d2 = dx * dx + dy * dy;
                d2 <= outer * outer && d2 >= inner * inner
            }
            Geometry::Blob { r, harmonics } => {
                let angle = dy.atan2(dx);
                let wobble: f32 = [2.0f32, 3.0, 5.0]
                    .iter()
                    .zip(&harmonics)
                    .map(|(k, [amp, phase])| amp * (k * angle + phase).sin())
                    .sum();
                (dx * dx + dy * dy).sqrt() <= r * (1.0 + wobble)
            }
        }
    }

    fn scaled(&self, s: f32) -> Self {
        let geometry = match self.geometry {
            Geometry::Disk { r } => Geometry::Disk { r: r * s },
            Geometry::Ellipse { rx, ry, theta } => Geometry::Ellipse {
                rx: rx * s,
                ry: ry * s,
                theta,
            },
            Geometry::Ring { outer, inner } => Geometry::Ring {
                outer: outer * s,
                inner: inner * s,
            },
            Geometry::Blob { r, harmonics } => Geometry::Blob { r: r * s, harmonics },
        };
        Self { geometry, ..*self }
    }
}

/// Input-resolution class labels `[size × size × classes]`; pixel `(x, y)`
/// is tested at its centre `(x + 0.5, y + 0.5)`.
fn rasterize_labels(shapes: &[Shape], size: usize, num_classes: usize) -> Vec<f32> {
    let mut labels = vec![0.0f32; size * size * num_classes];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            for s in shapes {
                if s.contains(px, py) {
                    labels[(y * size + x) * num_classes + s.class] = 1.0;
                }
            }
        }
    }
    labels
}

/// Mask-resolution rasterisation of `shapes`, identical to what the
/// generator stores with each sample.
pub fn rasterize_mask(shapes: &[Shape], input_size: usize, num_classes: usize) -> Result<Tensor<f32>> {
    let labels = Tensor::new(
        vec![input_size, input_size, num_classes],
        rasterize_labels(shapes, input_size, num_classes),
    )?;
    downsample_nearest(&labels, MASK_STRIDE)
}

/// A sample together with the shapes that generated it.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSample {
    pub sample: SegSample,
    pub shapes: Vec<Shape>,
}

fn class_level(class: usize, num_classes: usize) -> f32 {
    if num_classes == 1 {
        0.8
    } else {
        0.55 + 0.4 * class as f32 / (num_classes - 1) as f32
    }
}

fn draw_shape(rng: &mut ChaCha8Rng, family: ShapeFamily, class: usize, size: f32, anchor: Option<(f32, f32)>) -> Shape {
    // larger structures for class 0, smaller lesion-like ones above it
    let (lo, hi) = if class == 0 { (0.12, 0.24) } else { (0.06, 0.12) };
    let r = rng.gen_range(lo..hi) * size;
    let (cx, cy) = match anchor {
        Some((ax, ay)) => (
            ax + rng.gen_range(-0.5..0.5) * r,
            ay + rng.gen_range(-0.5..0.5) * r,
        ),
        None => (
            rng.gen_range(0.2..0.8) * size,
            rng.gen_range(0.2..0.8) * size,
        ),
    };
    let geometry = match family {
        ShapeFamily::Disk => Geometry::Disk { r },
        ShapeFamily::Ellipse => Geometry::Ellipse {
            rx: r * rng.gen_range(1.0..1.5),
            ry: r * rng.gen_range(0.55..1.0),
            theta: rng.gen_range(0.0..std::f32::consts::PI),
        },
        ShapeFamily::Ring => Geometry::Ring {
            outer: r * 1.2,
            inner: r * rng.gen_range(0.45..0.65),
        },
        ShapeFamily::Blob => Geometry::Blob {
            r,
            harmonics: [0, 1, 2].map(|_| [rng.gen_range(0.0..0.15), rng.gen_range(0.0..std::f32::consts::TAU)]),
        },
    };
    Shape { class, cx, cy, geometry }
}

fn draw_scene(rng: &mut ChaCha8Rng, profile: &ClientProfile, size: usize, num_classes: usize) -> Vec<Shape> {
    let size_f = size as f32;
    let mut shapes: Vec<Shape> = Vec::new();
    for class in 0..num_classes {
        if !rng.gen_bool(profile.class_freq[class] as f64) {
            continue;
        }
        let family = profile.families[rng.gen_range(0..profile.families.len())];
        // higher classes often sit inside a class-0 structure, as a cup inside a disc
        let anchor = match shapes.first() {
            Some(s) if class > 0 && rng.gen_bool(0.5) => Some((s.cx, s.cy)),
            _ => None,
        };
        shapes.push(draw_shape(rng, family, class, size_f, anchor));
    }
    shapes
}

/// Scene brightness in `[0, 1]` before the client's window is applied.
fn render_levels(
    rng: &mut ChaCha8Rng,
    profile: &ClientProfile,
    labels: &[f32],
    size: usize,
    num_classes: usize,
) -> Vec<f32> {
    let bg = rng.gen_range(profile.background[0]..=profile.background[1]);
    let levels: Vec<f32> = (0..num_classes)
        .map(|k| class_level(k, num_classes) + rng.gen_range(-0.04..0.04))
        .collect();
    let (fx, fy, phase) = (
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.0..std::f32::consts::TAU),
    );
    let noise = Normal::new(0.0f32, profile.noise.max(0.0)).expect("non-negative std");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let mut u = bg
                + 0.04
                    * (std::f32::consts::TAU * (fx * x as f32 + fy * y as f32) / size as f32 + phase).sin();
            let lab = &labels[(y * size + x) * num_classes..(y * size + x + 1) * num_classes];
            for (k, &on) in lab.iter().enumerate() {
                if on > 0.0 {
                    u = levels[k];
                }
            }
            if profile.noise > 0.0 {
                u += noise.sample(rng);
            }
            out.push(u.clamp(0.0, 1.0));
        }
    }
    out
}

fn rgb_sample(
    rng: &mut ChaCha8Rng,
    profile: &ClientProfile,
    size: usize,
    num_classes: usize,
    id: String,
    client_id: u32,
) -> Result<GeneratedSample> {
    let shapes = draw_scene(rng, profile, size, num_classes);
    let labels = rasterize_labels(&shapes, size, num_classes);
    let levels = render_levels(rng, profile, &labels, size, num_classes);
    let [lo, hi] = profile.intensity;
    let bytes: Vec<f32> = levels
        .iter()
        .flat_map(|&u| profile.tint.map(|t| (255.0 * (lo + (hi - lo) * (u * t).clamp(0.0, 1.0))).round()))
        .collect();
    let image = rgb_normalize(&Tensor::new(vec![size, size, 3], bytes)?)?;
    let labels = Tensor::new(vec![size, size, num_classes], labels)?;
    Ok(GeneratedSample {
        sample: SegSample {
            id,
            image,
            mask: downsample_nearest(&labels, MASK_STRIDE)?,
            volume_id: None,
            client_id,
        },
        shapes,
    })
}

fn volume_samples(
    rng: &mut ChaCha8Rng,
    profile: &ClientProfile,
    depth: usize,
    size: usize,
    num_classes: usize,
    volume_id: String,
    client_id: u32,
) -> Result<Vec<GeneratedSample>> {
    let shapes = draw_scene(rng, profile, size, num_classes);
    let [lo, hi] = profile.intensity;
    let mut raw = vec![0.0f32; size * size * depth];
    let mut labels = vec![0.0f32; size * size * depth * num_classes];
    let mut per_slice = Vec::with_capacity(depth);
    let half = depth as f32 / 2.0 + 0.5;
    for z in 0..depth {
        // ellipsoid-like cross sections: structures shrink towards both ends
        let t = (z as f32 + 0.5 - depth as f32 / 2.0) / half;
        let scale = (1.0 - t * t).max(0.0).sqrt();
        let slice_shapes: Vec<Shape> = shapes.iter().map(|s| s.scaled(scale)).collect();
        let lab = rasterize_labels(&slice_shapes, size, num_classes);
        let levels = render_levels(rng, profile, &lab, size, num_classes);
        for p in 0..size * size {
            let mut v = lo + (hi - lo) * levels[p];
            if rng.gen_bool(0.003) {
                v = hi * rng.gen_range(3.0..8.0);
            }
            raw[p * depth + z] = v;
            for k in 0..num_classes {
                labels[(p * depth + z) * num_classes + k] = lab[p * num_classes + k];
            }
        }
        per_slice.push(slice_shapes);
    }
    let normalized = percentile_normalize(&raw)?;
    let volume = Tensor::new(vec![size, size, depth], normalized)?;
    let masks = Tensor::new(vec![size, size, depth, num_classes], labels)?;
    let slices = slice_volume(&volume, &masks, &volume_id, client_id)?;
    Ok(slices
        .into_iter()
        .zip(per_slice)
        .map(|(sample, shapes)| GeneratedSample { sample, shapes })
        .collect())
}

fn generate_client(
    profile: &ClientProfile,
    client_id: u32,
    n: usize,
    size: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<GeneratedSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + client_id as u64));
    let mut out = Vec::with_capacity(n);
    match profile.modality {
        Modality::Rgb => {
            for i in 0..n {
                out.push(rgb_sample(&mut rng, profile, size, num_classes, format!("c{client_id}/{i:04}"), client_id)?);
            }
        }
        Modality::Volume { depth } => {
            let mut v = 0;
            while out.len() < n {
                let vid = format!("c{client_id}/vol{v:03}");
                let slices = volume_samples(&mut rng, profile, depth, size, num_classes, vid, client_id)?;
                out.extend(slices.into_iter().take(n - out.len()));
                v += 1;
            }
        }
    }
    Ok(out)
}

/// Generates every client's samples together with their generating shapes.
pub fn generate_federation_with_shapes(
    spec: &FederationSpec,
    n_per_client: usize,
) -> Result<Vec<(ClientDataset, Vec<Vec<Shape>>)>> {
    spec.validate()?;
    if n_per_client < 10 {
        return Err(Error::Config(format!("n_per_client must be at least 10, got {n_per_client}")));
    }
    spec.clients
        .par_iter()
        .enumerate()
        .map(|(k, profile)| {
            let gen = generate_client(profile, k as u32, n_per_client, spec.input_size, spec.num_classes, spec.seed)?;
            let (samples, shapes): (Vec<_>, Vec<_>) = gen.into_iter().map(|g| (g.sample, g.shapes)).unzip();
            Ok((ClientDataset::new(k as u32, profile.name.clone(), samples)?, shapes))
        })
        .collect()
}

/// One dataset per client, deterministic in `spec.seed`.
pub fn generate_federation(spec: &FederationSpec, n_per_client: usize) -> Result<Vec<ClientDataset>> {
    Ok(generate_federation_with_shapes(spec, n_per_client)?
        .into_iter()
        .map(|(d, _)| d)
        .collect())
}

fn random_profile(rng: &mut ChaCha8Rng, num_classes: usize) -> ClientProfile {
    let all = [ShapeFamily::Disk, ShapeFamily::Ellipse, ShapeFamily::Ring, ShapeFamily::Blob];
    let families: Vec<ShapeFamily> = all.iter().copied().filter(|_| rng.gen_bool(0.6)).collect();
    let families = if families.is_empty() { vec![all[rng.gen_range(0..4)]] } else { families };
    let volume = rng.gen_bool(0.4);
    let intensity = if volume {
        let lo: f32 = rng.gen_range(-300.0..200.0);
        [lo, lo + rng.gen_range(600.0..2000.0)]
    } else {
        let lo: f32 = rng.gen_range(0.0..0.3);
        [lo, rng.gen_range((lo + 0.45).min(1.0)..=1.0)]
    };
    let bg = rng.gen_range(0.03..0.42);
    let tint = if volume {
        [1.0; 3]
    } else {
        [0, 1, 2].map(|_| rng.gen_range(0.6..1.0))
    };
    ClientProfile {
        name: "pretrain".into(),
        modality: if volume { Modality::Volume { depth: 8 } } else { Modality::Rgb },
        families,
        intensity,
        background: [bg, bg + 0.08],
        noise: rng.gen_range(0.0..0.09),
        class_freq: (0..num_classes).map(|_| rng.gen_range(0.5..0.95)).collect(),
        tint,
    }
}

/// Generic pooled corpus for pseudo-pretraining: every group of eight
/// samples comes from a freshly drawn random profile.
pub fn pretraining_corpus(input_size: usize, num_classes: usize, n: usize, seed: u64) -> Result<ClientDataset> {
    if n == 0 {
        return Err(Error::Data("empty pretraining corpus requested".into()));
    }
    if num_classes == 0 || input_size == 0 || input_size % MASK_STRIDE != 0 {
        return Err(Error::Config("invalid pretraining corpus geometry".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xBEEF));
    let mut samples = Vec::with_capacity(n);
    let mut group = 0;
    while samples.len() < n {
        let profile = random_profile(&mut rng, num_classes);
        let id = format!("pt/g{group:04}");
        match profile.modality {
            Modality::Volume { depth } => {
                let gen = volume_samples(&mut rng, &profile, depth, input_size, num_classes, id, u32::MAX)?;
                samples.extend(gen.into_iter().map(|g| g.sample).take(n - samples.len()));
            }
            Modality::Rgb => {
                for i in 0..8.min(n - samples.len()) {
                    let g = rgb_sample(&mut rng, &profile, input_size, num_classes, format!("{id}/{i}"), u32::MAX)?;
                    samples.push(g.sample);
                }
            }
        }
        group += 1;
    }
    ClientDataset::new(u32::MAX, "pretrain", samples)
}
