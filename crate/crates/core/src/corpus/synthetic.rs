//! Deterministic synthetic corpus pairs.
//!
//! Source utterances of class `c` are frame sequences
//! `x_t = μ + s_c·u + a·sin(2π f_c t / T + φ)·v + σ ε_t` with `s_c = ±separation`
//! along a fixed class axis `u`, a class-specific modulation frequency `f_c`
//! along `v`, and a random phase `φ`. Target utterances are drawn from the
//! same generator and then moved by a corpus shift: a rotation of every
//! coordinate pair `(2k, 2k+1)` by `rotation`, a translation, and additive
//! Gaussian noise.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Axis, CorpusDataset, Role, Utterance};
use crate::error::{Error, Result};

/// Emotions used as class names on the arousal axis (class 0, class 1).
const CLASS_EMOTIONS: [&str; 2] = ["sadness", "anger"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    pub n_classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub frames: usize,
    pub dim: usize,
    /// Half distance between class centres along the class axis.
    pub separation: f64,
    /// Modulation amplitude along the temporal axis.
    pub modulation: f64,
    /// Cycles per utterance of the modulation, per class.
    pub frequencies: Vec<f64>,
    /// Frame noise standard deviation of the generator.
    pub frame_noise: f64,
    /// Rotation angle of the target shift, radians.
    pub rotation: f64,
    /// Target translation; empty means zero.
    pub translation: Vec<f64>,
    /// Extra noise standard deviation added to target frames.
    pub noise_scale: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            n_classes: 2,
            n_source: 200,
            n_target: 200,
            frames: 32,
            dim: 40,
            separation: 0.6,
            modulation: 1.0,
            frequencies: vec![2.0, 3.0],
            frame_noise: 1.0,
            rotation: std::f64::consts::FRAC_PI_3,
            translation: Vec::new(),
            noise_scale: 0.3,
        }
    }
}

impl ShiftSpec {
    /// Translation of the given magnitude along the class axis.
    pub fn class_translation(dim: usize, magnitude: f64) -> Vec<f64> {
        class_axis(dim).mapv(|v| v * magnitude).to_vec()
    }

    /// The generator with no corpus shift.
    pub fn identity(mut self) -> Self {
        self.rotation = 0.0;
        self.translation.clear();
        self.noise_scale = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synthetic spec: {m}")));
        if self.n_classes == 0 || self.n_source == 0 || self.n_target == 0 {
            return bad("needs at least one class and one sample per corpus");
        }
        if self.n_classes != CLASS_EMOTIONS.len() {
            return bad("only binary class structure is supported");
        }
        if self.frames == 0 || self.dim < 2 {
            return bad("frames must be positive and dim at least 2");
        }
        if self.frequencies.len() != self.n_classes {
            return bad("one modulation frequency per class is required");
        }
        if !self.translation.is_empty() && self.translation.len() != self.dim {
            return bad("translation length must equal dim");
        }
        if self.frame_noise < 0.0 || self.noise_scale < 0.0 {
            return bad("noise scales must be non-negative");
        }
        Ok(())
    }
}

/// Unit vector with equal weight on even coordinates.
fn class_axis(dim: usize) -> Array1<f64> {
    let mut u: Array1<f64> = Array1::from_shape_fn(dim, |d| if d % 2 == 0 { 1.0 } else { 0.0 });
    let n = u.dot(&u).sqrt();
    u /= n;
    u
}

/// Unit vector alternating sign over all coordinates.
fn modulation_axis(dim: usize) -> Array1<f64> {
    let v: Array1<f64> = Array1::from_shape_fn(dim, |d| if (d / 2) % 2 == 0 { 1.0 } else { -1.0 });
    let n = v.dot(&v).sqrt();
    v / n
}

struct Generator {
    mean: Array1<f64>,
    axis: Array1<f64>,
    modulation: Array1<f64>,
}

impl Generator {
    fn new(spec: &ShiftSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let mean = Array1::from_shape_fn(spec.dim, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            0.5 * z
        });
        Self { mean, axis: class_axis(spec.dim), modulation: modulation_axis(spec.dim) }
    }

    fn draw(&self, spec: &ShiftSpec, class: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let sign = if class == 1 { 1.0 } else { -1.0 };
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = spec.frequencies[class];
        let mut x = Array2::<f64>::zeros((spec.frames, spec.dim));
        for t in 0..spec.frames {
            let wave = spec.modulation
                * (std::f64::consts::TAU * freq * t as f64 / spec.frames as f64 + phase).sin();
            for d in 0..spec.dim {
                let z: f64 = StandardNormal.sample(rng);
                x[[t, d]] = self.mean[d]
                    + sign * spec.separation * self.axis[d]
                    + wave * self.modulation[d]
                    + spec.frame_noise * z;
            }
        }
        x
    }
}

fn apply_shift(spec: &ShiftSpec, x: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let (c, s) = (spec.rotation.cos(), spec.rotation.sin());
    for mut row in x.rows_mut() {
        if spec.rotation != 0.0 {
            for k in 0..spec.dim / 2 {
                let (a, b) = (row[2 * k], row[2 * k + 1]);
                row[2 * k] = c * a - s * b;
                row[2 * k + 1] = s * a + c * b;
            }
        }
        if !spec.translation.is_empty() {
            for (v, t) in row.iter_mut().zip(&spec.translation) {
                *v += t;
            }
        }
        if spec.noise_scale > 0.0 {
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += spec.noise_scale * z;
            }
        }
    }
}

fn corpus(
    spec: &ShiftSpec,
    gen: &Generator,
    seed: u64,
    stream: u64,
    n: usize,
    role: Role,
    shift: bool,
) -> Result<CorpusDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let (name, prefix) = match role {
        Role::Source => ("synthetic-source", "src"),
        Role::Target => ("synthetic-target", "tgt"),
    };
    let mut utts = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % spec.n_classes;
        let mut x = gen.draw(spec, class, &mut rng);
        if shift {
            apply_shift(spec, &mut x, &mut rng);
        }
        utts.push(Utterance {
            sample_id: format!("{prefix}-{i:05}"),
            corpus_id: name.into(),
            features: x.mapv(|v| v as f32),
            label: Some(CLASS_EMOTIONS[class].into()),
            class: Some(super::map_emotion(CLASS_EMOTIONS[class], Axis::Arousal)?),
        });
    }
    CorpusDataset::new(name, role, Axis::Arousal, utts)
}

/// Source and (shifted) target corpora; a pure function of `(seed, spec)`.
/// The target keeps its labels for scoring only.
pub fn make_synthetic_pair(seed: u64, spec: &ShiftSpec) -> Result<(CorpusDataset, CorpusDataset)> {
    spec.validate()?;
    let gen = Generator::new(spec, seed);
    let source = corpus(spec, &gen, seed, 1, spec.n_source, Role::Source, false)?;
    let target = corpus(spec, &gen, seed, 2, spec.n_target, Role::Target, true)?;
    Ok((source, target))
}
