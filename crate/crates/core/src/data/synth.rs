//! Deterministic glyph benchmark with a controllable domain shift.
//!
//! Each class is a glyph: a shape family drawn with a stroke pattern. The
//! source domain renders glyphs in one colour on a plain dark background
//! with mild jitter; the target domain applies [`ShiftSpec`]. None of the
//! shifted attributes (pose, colour, background, scale) is used to define
//! a class, so every shift preserves labels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, DomainDataset, Manifest, DATASET_FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
const FAMILIES: usize = 8;
const STROKES: usize = 3;
/// Largest class count the glyph vocabulary supports.
pub const MAX_CLASSES: usize = FAMILIES * STROKES;

/// Target-domain transformation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Mean hue rotation of the foreground, as a fraction of the colour wheel.
    pub hue_shift: f64,
    /// Amplitude of the periodic background texture (0 keeps it plain).
    pub texture: f64,
    /// Relative glyph scale jitter, e.g. 0.25 draws scales from [0.75, 1.25].
    pub scale_jitter: f64,
    /// Pairs of classes differing only in one small detail.
    pub fine_grained: bool,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self::default_shift()
    }
}

impl ShiftSpec {
    /// Target drawn from the source distribution.
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            hue_shift: 0.0,
            texture: 0.0,
            scale_jitter: 0.0,
            fine_grained: false,
        }
    }

    pub fn default_shift() -> Self {
        Self {
            rotation_deg: 40.0,
            hue_shift: 0.1,
            texture: 0.25,
            scale_jitter: 0.25,
            fine_grained: false,
        }
    }

    pub fn fine_grained() -> Self {
        Self {
            fine_grained: true,
            ..Self::default_shift()
        }
    }

    /// `none`, `default`, `fine-grained`, or an inline JSON object.
    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "none" => Ok(Self::none()),
            "default" => Ok(Self::default_shift()),
            "fine-grained" | "fine_grained" => Ok(Self::fine_grained()),
            json if json.starts_with('{') => {
                let spec: Self = serde_json::from_str(json)
                    .map_err(|e| Error::Config(format!("invalid shift spec: {e}")))?;
                spec.validate()?;
                Ok(spec)
            }
            other => Err(Error::Config(format!("unknown shift preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=180.0).contains(&self.rotation_deg)
            && (0.0..=1.0).contains(&self.hue_shift)
            && (0.0..=0.5).contains(&self.texture)
            && (0.0..0.5).contains(&self.scale_jitter);
        if !ok {
            return Err(Error::Config(format!("shift spec out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stroke {
    Solid,
    Bold,
    Double,
}

impl Stroke {
    fn coverage(self, dist: f64, pixel: f64) -> f64 {
        let band = |d: f64, half: f64| ((half - d) / pixel + 0.5).clamp(0.0, 1.0);
        match self {
            Stroke::Solid => band(dist, 0.07),
            Stroke::Bold => band(dist, 0.15),
            Stroke::Double => band((dist - 0.11).abs(), 0.045),
        }
    }
}

/// A class identity: family, stroke and an optional marker dot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Glyph {
    pub family: usize,
    pub stroke: Stroke,
    pub marked: bool,
}

type Pt = (f64, f64);

fn segment_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let (apx, apy) = (p.0 - a.0, p.1 - a.1);
    let t = ((apx * abx + apy * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (dx, dy) = (apx - t * abx, apy - t * aby);
    (dx * dx + dy * dy).sqrt()
}

fn polyline_dist(p: Pt, segs: &[(Pt, Pt)]) -> f64 {
    segs.iter()
        .map(|&(a, b)| segment_dist(p, a, b))
        .fold(f64::INFINITY, f64::min)
}

impl Glyph {
    /// Distance from `p` (glyph frame, y down) to the glyph's centre line.
    fn stroke_dist(&self, p: Pt) -> f64 {
        match self.family {
            0 => ((p.0 * p.0 + p.1 * p.1).sqrt() - 0.6).abs(),
            1 => {
                let s = 0.55;
                polyline_dist(p, &[((-s, -s), (s, -s)), ((s, -s), (s, s)), ((s, s), (-s, s)), ((-s, s), (-s, -s))])
            }
            2 => polyline_dist(
                p,
                &[((0.0, -0.65), (0.6, 0.5)), ((0.6, 0.5), (-0.6, 0.5)), ((-0.6, 0.5), (0.0, -0.65))],
            ),
            3 => polyline_dist(p, &[((-0.65, 0.0), (0.65, 0.0)), ((0.0, -0.65), (0.0, 0.65))]),
            4 => polyline_dist(p, &[((-0.6, -0.3), (0.6, -0.3)), ((-0.6, 0.3), (0.6, 0.3))]),
            5 => polyline_dist(p, &[((-0.6, -0.55), (0.6, -0.55)), ((0.0, -0.55), (0.0, 0.65))]),
            6 => polyline_dist(p, &[((-0.45, -0.65), (-0.45, 0.6)), ((-0.45, 0.6), (0.55, 0.6))]),
            _ => polyline_dist(p, &[((-0.6, -0.5), (0.0, 0.55)), ((0.0, 0.55), (0.6, -0.5))]),
        }
    }

    /// Centre of the marker dot, placed in an empty region of each family.
    fn marker_centre(&self) -> Pt {
        match self.family {
            0 | 1 => (0.0, 0.0),
            2 => (0.0, 0.18),
            3 => (0.3, 0.3),
            4 => (0.0, 0.0),
            5 => (0.32, 0.1),
            6 => (0.12, 0.1),
            _ => (0.0, -0.15),
        }
    }

    /// Foreground coverage in `[0, 1]` at glyph-frame point `p`.
    fn coverage(&self, p: Pt, pixel: f64) -> f64 {
        let mut c = self.stroke.coverage(self.stroke_dist(p), pixel);
        if self.marked {
            let m = self.marker_centre();
            let d = ((p.0 - m.0).powi(2) + (p.1 - m.1).powi(2)).sqrt();
            c = c.max(((0.13 - d) / pixel + 0.5).clamp(0.0, 1.0));
        }
        c
    }
}

/// Class-to-glyph assignment for `classes` labels.
pub fn glyph_table(classes: usize, fine_grained: bool) -> Result<Vec<Glyph>> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let strokes = [Stroke::Solid, Stroke::Double, Stroke::Bold];
    if fine_grained {
        let bases = classes.div_ceil(2);
        if bases > FAMILIES * STROKES {
            return Err(Error::Config(format!("fine-grained mode supports at most {} classes", 2 * MAX_CLASSES)));
        }
        return Ok((0..classes)
            .map(|c| {
                let b = c / 2;
                Glyph {
                    family: b % FAMILIES,
                    stroke: strokes[b / FAMILIES],
                    marked: c % 2 == 1,
                }
            })
            .collect());
    }
    if classes > MAX_CLASSES {
        return Err(Error::Config(format!("at most {MAX_CLASSES} classes supported, got {classes}")));
    }
    let n_strokes = classes.div_ceil(FAMILIES);
    let n_families = classes.div_ceil(n_strokes);
    Ok((0..classes)
        .map(|c| Glyph {
            family: c % n_families,
            stroke: strokes[c / n_families],
            marked: false,
        })
        .collect())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-sample rendering parameters.
struct Pose {
    angle: f64,
    scale: f64,
    shift: Pt,
    fg: [f64; 3],
    bg: [f64; 3],
    texture: Option<(f64, f64, f64, f64)>,
    noise: f64,
}

const SOURCE_HUE: f64 = 0.02;
const SOURCE_ROTATION_DEG: f64 = 6.0;
const SOURCE_SCALE_JITTER: f64 = 0.08;
const NOISE: f64 = 0.03;

fn draw_pose(rng: &mut ChaCha8Rng, shift: &ShiftSpec, domain: Domain) -> Pose {
    let mut jitter = |r: f64| if r > 0.0 { rng.random_range(-r..=r) } else { 0.0 };
    let (rot, scale_j, hue, texture) = match domain {
        Domain::Source => (SOURCE_ROTATION_DEG, SOURCE_SCALE_JITTER, SOURCE_HUE, 0.0),
        Domain::Target => (
            SOURCE_ROTATION_DEG.max(shift.rotation_deg),
            SOURCE_SCALE_JITTER.max(shift.scale_jitter),
            SOURCE_HUE + shift.hue_shift,
            shift.texture,
        ),
    };
    let angle = jitter(rot) * PI / 180.0;
    let scale = 1.0 + jitter(scale_j);
    let shift_xy = (jitter(0.1), jitter(0.1));
    let fg = hsv_to_rgb(hue + jitter(0.03), 0.75 + jitter(0.1), 0.9 + jitter(0.08));
    let base = 0.12 + jitter(0.04);
    let bg = match domain {
        Domain::Source => [base; 3],
        // A shifted background brightness and tint accompany the texture.
        Domain::Target if texture > 0.0 => {
            let tint = hsv_to_rgb(hue + 0.5 + jitter(0.1), 0.4, 0.3 + jitter(0.05));
            [tint[0], tint[1], tint[2]]
        }
        Domain::Target => [base; 3],
    };
    let texture = (texture > 0.0).then(|| {
        let theta = jitter(PI);
        let freq = 0.35 + jitter(0.15);
        let phase = jitter(PI);
        (theta, freq, phase, texture)
    });
    Pose {
        angle,
        scale,
        shift: shift_xy,
        fg,
        bg,
        texture,
        noise: NOISE,
    }
}

fn render(glyph: &Glyph, pose: &Pose, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let s = IMAGE_SIZE;
    let pixel = 2.0 / (s as f64 * pose.scale);
    let (sin, cos) = pose.angle.sin_cos();
    for py in 0..s {
        for px in 0..s {
            let x = (px as f64 + 0.5) / s as f64 * 2.0 - 1.0 - pose.shift.0;
            let y = (py as f64 + 0.5) / s as f64 * 2.0 - 1.0 - pose.shift.1;
            // Rotate by -angle, then undo the scale.
            let gx = (cos * x + sin * y) / pose.scale;
            let gy = (-sin * x + cos * y) / pose.scale;
            let cov = glyph.coverage((gx, gy), pixel);
            let tex = pose.texture.map_or(0.0, |(theta, freq, phase, amp)| {
                let u = px as f64 * theta.cos() + py as f64 * theta.sin();
                let v = -(px as f64) * theta.sin() + py as f64 * theta.cos();
                amp * ((freq * u + phase).sin() * (0.5 * freq * v).cos())
            });
            for ch in 0..3 {
                let bg = pose.bg[ch] + tex;
                let n = if pose.noise > 0.0 {
                    rng.random_range(-pose.noise..=pose.noise)
                } else {
                    0.0
                };
                let v = (bg * (1.0 - cov) + pose.fg[ch] * cov + n).clamp(0.0, 1.0);
                // Values are stored as f32 on disk; round now so loads are exact.
                out[(ch * s + py) * s + px] = v as f32 as f64;
            }
        }
    }
}

fn render_domain(
    glyphs: &[Glyph],
    per_class: usize,
    shift: &ShiftSpec,
    domain: Domain,
    seed: u64,
    generator: &serde_json::Value,
) -> Result<DomainDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match domain {
        Domain::Source => 0,
        Domain::Target => 1,
    });
    let k = glyphs.len();
    let n = k * per_class;
    let plane = 3 * IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; n * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let pose = draw_pose(&mut rng, shift, domain);
        render(&glyphs[label], &pose, &mut rng, &mut data[i * plane..(i + 1) * plane]);
        labels.push(label);
    }
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        shape: [n, 3, IMAGE_SIZE, IMAGE_SIZE],
        dtype: "f32le".into(),
        label_count: k,
        domain_tag: domain,
        generator: generator.clone(),
        extra: Default::default(),
    };
    let images = Tensor::new(&[n, 3, IMAGE_SIZE, IMAGE_SIZE], data)?;
    DomainDataset::new(images, labels, manifest)
}

/// Renders a class-balanced source/target pair; a pure function of its
/// arguments.
pub fn generate(
    classes: usize,
    per_class: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    shift.validate()?;
    if per_class < 2 {
        return Err(Error::Config(format!("per_class must be >= 2, got {per_class}")));
    }
    let glyphs = glyph_table(classes, shift.fine_grained)?;
    let generator = serde_json::json!({
        "classes": classes,
        "per_class": per_class,
        "shift": shift,
        "seed": seed,
        "image_size": IMAGE_SIZE,
    });
    let source = render_domain(&glyphs, per_class, shift, Domain::Source, seed, &generator)?;
    let target = render_domain(&glyphs, per_class, shift, Domain::Target, seed, &generator)?;
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_are_balanced() {
        let (s, t) = generate(10, 12, &ShiftSpec::default_shift(), 1).unwrap();
        assert_eq!(s.len(), 120);
        assert_eq!(t.len(), 120);
        assert!(s.class_counts().iter().all(|&c| c == 12));
        assert!(t.class_counts().iter().all(|&c| c == 12));
        assert_eq!(s.images().shape(), &[120, 3, 32, 32]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate(4, 5, &ShiftSpec::fine_grained(), 9).unwrap();
        let b = generate(4, 5, &ShiftSpec::fine_grained(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate(4, 5, &ShiftSpec::fine_grained(), 10).unwrap();
        assert_ne!(a.0.images(), c.0.images());
    }

    #[test]
    fn pixels_in_unit_range() {
        let (s, t) = generate(6, 4, &ShiftSpec::default_shift(), 2).unwrap();
        for ds in [s, t] {
            assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn glyph_table_is_injective() {
        for k in 2..=MAX_CLASSES {
            let g = glyph_table(k, false).unwrap();
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(g[i], g[j], "k={k}");
                }
            }
        }
        let g = glyph_table(10, true).unwrap();
        assert_eq!(g[0].family, g[1].family);
        assert!(!g[0].marked && g[1].marked);
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        assert!(matches!(generate(1, 4, &ShiftSpec::none(), 0), Err(Error::Config(_))));
        assert!(matches!(generate(MAX_CLASSES + 1, 4, &ShiftSpec::none(), 0), Err(Error::Config(_))));
        let bad = ShiftSpec { hue_shift: 2.0, ..ShiftSpec::none() };
        assert!(matches!(generate(3, 4, &bad, 0), Err(Error::Config(_))));
        assert!(matches!(ShiftSpec::parse("sideways"), Err(Error::Config(_))));
    }

    #[test]
    fn presets_parse() {
        assert_eq!(ShiftSpec::parse("none").unwrap(), ShiftSpec::none());
        assert_eq!(ShiftSpec::parse("default").unwrap(), ShiftSpec::default_shift());
        let j = ShiftSpec::parse(r#"{"rotation_deg": 10, "texture": 0.1}"#).unwrap();
        assert_eq!(j.rotation_deg, 10.0);
        assert_eq!(j.hue_shift, ShiftSpec::default_shift().hue_shift);
    }

    #[test]
    fn null_shift_uses_source_style() {
        // Same per-pixel statistics up to sampling noise: mean brightness of
        // both domains agrees closely.
        let (s, t) = generate(4, 40, &ShiftSpec::none(), 3).unwrap();
        let mean = |d: &DomainDataset| d.images().data().iter().sum::<f64>() / d.images().numel() as f64;
        assert!((mean(&s) - mean(&t)).abs() < 0.01);
    }
}
