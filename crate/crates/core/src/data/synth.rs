//! Deterministic synthetic texture generator.
//!
//! Bonafide samples are concentric radial textures with smooth
//! pseudo-random angular modulation (an iris-like ring between a dark pupil
//! and a bright sclera). Attack samples overlay the same base with a
//! periodic dot lattice inside the central disc, the kind of regular
//! printing artifact a textured lens exhibits. Three profiles emulate
//! distinct sensors/environments via brightness offset, blur radius, noise
//! level, and lattice pitch.
//!
//! Generation is a pure function of (generator version, profile, seed,
//! index): every image draws from its own derived stream, so the same
//! invocation always produces byte-identical files.

use std::path::Path;

use crate::data::manifest::{Environment, Manifest, Sample};
use crate::data::{encode_pgm, Label};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    A,
    B,
    C,
}

impl Profile {
    pub fn parse(s: &str) -> Option<Profile> {
        match s {
            "A" | "a" => Some(Profile::A),
            "B" | "b" => Some(Profile::B),
            "C" | "c" => Some(Profile::C),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::A => "A",
            Profile::B => "B",
            Profile::C => "C",
        }
    }

    fn id(self) -> u64 {
        match self {
            Profile::A => 1,
            Profile::B => 2,
            Profile::C => 3,
        }
    }

    fn sensor(self) -> &'static str {
        match self {
            Profile::A => "synthcam-a",
            Profile::B => "synthcam-b",
            Profile::C => "synthcam-c",
        }
    }

    fn environment(self) -> Environment {
        match self {
            Profile::A => Environment::Controlled,
            Profile::B => Environment::Uncontrolled,
            Profile::C => Environment::Uncontrolled,
        }
    }

    /// (brightness offset, box blur radius, noise sigma, lattice pitch base)
    fn params(self) -> (f64, usize, f64, f64) {
        match self {
            Profile::A => (0.00, 0, 0.015, 7.0),
            Profile::B => (0.06, 1, 0.030, 8.0),
            Profile::C => (-0.05, 1, 0.045, 9.0),
        }
    }
}

impl std::fmt::Display for Profile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub profile: Profile,
    pub seed: u64,
    /// Image side in pixels.
    pub size: usize,
}

impl SynthConfig {
    pub fn new(n_per_class: usize, profile: Profile, seed: u64, size: usize) -> Result<Self> {
        if n_per_class == 0 {
            return Err(Error::contract("synth", "n_per_class must be at least 1"));
        }
        if size < 16 {
            return Err(Error::contract("synth", "size must be at least 16"));
        }
        Ok(SynthConfig { n_per_class, profile, seed, size })
    }
}

/// Renders `2 * n_per_class` PGMs plus `manifest.csv` into `out_dir`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io(out_dir.to_path_buf(), e))?;
    let mut manifest = Manifest {
        samples: Vec::with_capacity(2 * cfg.n_per_class),
        comments: vec![format!(
            "synth-generator v{GENERATOR_VERSION} profile={} seed={} n={} size={}",
            cfg.profile, cfg.seed, cfg.n_per_class, cfg.size
        )],
    };
    for label in [Label::Bonafide, Label::Attack] {
        for idx in 0..cfg.n_per_class {
            let name = format!("{}_{}_{idx:05}.pgm", cfg.profile, label);
            let pixels = render(cfg, label, idx);
            let path = out_dir.join(&name);
            encode_pgm(&path, cfg.size, cfg.size, &pixels)?;
            manifest.samples.push(Sample {
                source: name,
                path,
                label,
                database: cfg.profile.name().to_string(),
                sensor: cfg.profile.sensor().to_string(),
                environment: cfg.profile.environment(),
            });
        }
    }
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Per-image stream: mixes version, profile, class, and index so images are
/// independent of generation order.
fn image_rng(cfg: &SynthConfig, label: Label, idx: usize) -> Rng {
    let stream = (GENERATOR_VERSION as u64) << 56
        | cfg.profile.id() << 48
        | (label.index() as u64) << 40
        | idx as u64;
    Rng::derive(cfg.seed, stream)
}

/// Renders one image to 8-bit pixels.
pub fn render(cfg: &SynthConfig, label: Label, idx: usize) -> Vec<u8> {
    let mut rng = image_rng(cfg, label, idx);
    let n = cfg.size;
    let nf = n as f64;
    let (offset, blur, sigma, pitch_base) = cfg.profile.params();

    let cx = nf / 2.0 + rng.uniform::<f64>(-2.0, 2.0);
    let cy = nf / 2.0 + rng.uniform::<f64>(-2.0, 2.0);
    let r_pupil = nf * rng.uniform::<f64>(0.10, 0.14);
    let r_iris = nf * rng.uniform::<f64>(0.38, 0.46);
    let ring_wavelength = rng.uniform::<f64>(3.5, 6.5);
    let wobble = rng.uniform::<f64>(0.5, 1.1);
    let n_theta = (4 + rng.below(6)) as f64; // 4..=9 angular lobes
    let fiber_freq = (18 + rng.below(19)) as f64; // 18..=36 fine fibers
    let fiber_amp = rng.uniform::<f64>(0.03, 0.07);
    let phase1 = rng.uniform::<f64>(0.0, std::f64::consts::TAU);
    let phase2 = rng.uniform::<f64>(0.0, std::f64::consts::TAU);
    let phase3 = rng.uniform::<f64>(0.0, std::f64::consts::TAU);

    let mut img = vec![0.0f64; n * n];
    for row in 0..n {
        for col in 0..n {
            let dy = row as f64 + 0.5 - cy;
            let dx = col as f64 + 0.5 - cx;
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let v = if r < r_pupil {
                0.08
            } else if r < r_iris {
                let ring = (std::f64::consts::TAU * (r - r_pupil) / ring_wavelength
                    + phase1
                    + wobble * (n_theta * theta + phase2).sin())
                .sin();
                let fiber = (fiber_freq * theta + phase3).sin();
                0.45 + 0.16 * ring + fiber_amp * fiber
            } else {
                0.78 - 0.10 * (r / (0.75 * nf)).min(1.0)
            };
            img[row * n + col] = v;
        }
    }

    if label == Label::Attack {
        stamp_dot_lattice(&mut img, n, cx, cy, r_iris, pitch_base, &mut rng);
    }

    for v in img.iter_mut() {
        *v += offset;
    }
    if blur > 0 {
        box_blur(&mut img, n, blur);
    }
    for v in img.iter_mut() {
        *v += sigma * rng.next_gaussian();
    }

    img.into_iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Dark Gaussian dots on a square lattice inside the central disc.
fn stamp_dot_lattice(
    img: &mut [f64],
    n: usize,
    cx: f64,
    cy: f64,
    r_iris: f64,
    pitch_base: f64,
    rng: &mut Rng,
) {
    let pitch = pitch_base + rng.uniform::<f64>(-1.0, 1.0);
    let ox = rng.uniform::<f64>(0.0, pitch);
    let oy = rng.uniform::<f64>(0.0, pitch);
    let depth = rng.uniform::<f64>(0.30, 0.42);
    let dot_sigma = 1.3;
    let r_max = 0.92 * r_iris;
    let cells = (n as f64 / pitch).ceil() as i64 + 1;
    for gy in -1..cells {
        for gx in -1..cells {
            let px = gx as f64 * pitch + ox;
            let py = gy as f64 * pitch + oy;
            let ddx = px - cx;
            let ddy = py - cy;
            if (ddx * ddx + ddy * ddy).sqrt() >= r_max {
                continue;
            }
            let lo_r = (py - 4.0).floor().max(0.0) as usize;
            let hi_r = ((py + 4.0).ceil() as usize).min(n - 1);
            let lo_c = (px - 4.0).floor().max(0.0) as usize;
            let hi_c = ((px + 4.0).ceil() as usize).min(n - 1);
            for row in lo_r..=hi_r {
                for col in lo_c..=hi_c {
                    let dy = row as f64 + 0.5 - py;
                    let dx = col as f64 + 0.5 - px;
                    let d2 = dx * dx + dy * dy;
                    img[row * n + col] -= depth * (-d2 / (2.0 * dot_sigma * dot_sigma)).exp();
                }
            }
        }
    }
}

/// One separable box-blur pass of the given radius.
fn box_blur(img: &mut Vec<f64>, n: usize, radius: usize) {
    let r = radius as isize;
    let norm = 1.0 / (2 * radius + 1) as f64;
    let mut tmp = vec![0.0f64; n * n];
    for row in 0..n as isize {
        for col in 0..n as isize {
            let mut acc = 0.0;
            for d in -r..=r {
                let c = (col + d).clamp(0, n as isize - 1);
                acc += img[(row * n as isize + c) as usize];
            }
            tmp[(row * n as isize + col) as usize] = acc * norm;
        }
    }
    for col in 0..n as isize {
        for row in 0..n as isize {
            let mut acc = 0.0;
            for d in -r..=r {
                let rr = (row + d).clamp(0, n as isize - 1);
                acc += tmp[(rr * n as isize + col) as usize];
            }
            img[(row * n as isize + col) as usize] = acc * norm;
        }
    }
}
