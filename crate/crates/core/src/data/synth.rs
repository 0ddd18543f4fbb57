//! Procedural multi-view studies with known generating factors.
//!
//! Each study is a bright elliptical cavity inside a fixed, dimmer ring. The
//! cavity area beats sinusoidally between its full size and `1 - amplitude`
//! of it; every view sees the same heart under its own rotation, shift, and
//! brightness gain, with optional multiplicative speckle.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{GeneratorConfig, LabelSet};
use crate::data::study::{Frame, Split, Study};
use crate::error::{LamaeError, Result};
use crate::rng::{RngStreams, Stream};

/// Subsamples per pixel side when rasterizing coverage.
const SUPERSAMPLE: usize = 4;
/// Ring outer boundary relative to the full-size cavity.
const RING_SCALE: f64 = 1.3;
const RING_LEVEL: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewFactors {
    pub rotation: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub gain: f64,
}

/// Everything needed to re-render a study and re-derive its labels.
/// Lengths are fractions of half the frame side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFactors {
    pub axis: f64,
    pub ratio: f64,
    /// Fraction of the full cavity area lost at peak contraction.
    pub amplitude: f64,
    pub phase: f64,
    pub cycle_frames: f64,
    pub noise: f64,
    pub views: Vec<ViewFactors>,
}

impl SyntheticFactors {
    pub fn sample<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> Self {
        let axis = rng.random_range(0.4..0.6);
        let ratio = rng.random_range(1.0..1.5);
        let amplitude = rng.random_range(0.2..0.7);
        let phase = rng.random_range(0.0..2.0 * PI);
        let views = (0..cfg.views)
            .map(|_| ViewFactors {
                rotation: rng.random_range(0.0..PI),
                shift_x: rng.random_range(-0.1..0.1),
                shift_y: rng.random_range(-0.1..0.1),
                gain: rng.random_range(0.5..1.0),
            })
            .collect();
        Self {
            axis,
            ratio,
            amplitude,
            phase,
            cycle_frames: cfg.cycle_frames as f64,
            noise: cfg.noise,
            views,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let minor = self.axis / self.ratio;
        if !(self.axis > 0.0 && minor > 0.0 && minor.is_finite()) {
            return Err(LamaeError::Data(format!(
                "degenerate ellipse: axes {} and {minor}",
                self.axis
            )));
        }
        if !(0.0..1.0).contains(&self.amplitude) || self.cycle_frames <= 0.0 {
            return Err(LamaeError::Data(
                "amplitude must lie in [0, 1) and the cycle be positive".into(),
            ));
        }
        Ok(())
    }

    /// Cavity area at frame `t` relative to its full size.
    pub fn area_scale(&self, t: usize) -> f64 {
        let theta = 2.0 * PI * t as f64 / self.cycle_frames + self.phase;
        1.0 - self.amplitude * (0.5 - 0.5 * theta.cos())
    }

    /// `(max area - min area) / max area` over a beat.
    pub fn area_fraction(&self) -> f64 {
        self.amplitude
    }
}

/// Per-pixel coverage of the cavity and of the ring's outer ellipse.
pub struct Coverage {
    pub cavity: Vec<f64>,
    pub outer: Vec<f64>,
}

pub fn rasterize(f: &SyntheticFactors, view: usize, t: usize, size: usize) -> Result<Coverage> {
    f.validate()?;
    let v = f
        .views
        .get(view)
        .ok_or_else(|| LamaeError::Data(format!("no factors for view {view}")))?;
    let half = size as f64 / 2.0;
    let (a, b) = (f.axis, f.axis / f.ratio);
    let scale = f.area_scale(t);
    let (sin, cos) = v.rotation.sin_cos();
    let mut cavity = vec![0.0; size * size];
    let mut outer = vec![0.0; size * size];
    let step = 1.0 / SUPERSAMPLE as f64;
    let weight = step * step;
    for py in 0..size {
        for px in 0..size {
            let (mut c, mut o) = (0.0, 0.0);
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let ux = (px as f64 + (sx as f64 + 0.5) * step) / half - 1.0 - v.shift_x;
                    let uy = (py as f64 + (sy as f64 + 0.5) * step) / half - 1.0 - v.shift_y;
                    let qx = cos * ux + sin * uy;
                    let qy = -sin * ux + cos * uy;
                    let r = (qx / a).powi(2) + (qy / b).powi(2);
                    if r <= scale {
                        c += weight;
                    }
                    if r <= RING_SCALE * RING_SCALE {
                        o += weight;
                    }
                }
            }
            cavity[py * size + px] = c;
            outer[py * size + px] = o;
        }
    }
    Ok(Coverage { cavity, outer })
}

/// Noise-free intensities in `[0, 1]`.
pub fn render_clean(f: &SyntheticFactors, view: usize, t: usize, size: usize) -> Result<Vec<f64>> {
    let cov = rasterize(f, view, t, size)?;
    let gain = f.views[view].gain;
    Ok(cov
        .cavity
        .iter()
        .zip(&cov.outer)
        .map(|(&c, &o)| gain * (c + RING_LEVEL * (o - c)))
        .collect())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Renders `frames` frames of every view.
pub fn render_study<R: Rng + ?Sized>(
    f: &SyntheticFactors,
    frames: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<Frame>>> {
    let mut views = Vec::with_capacity(f.views.len());
    for j in 0..f.views.len() {
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let clean = render_clean(f, j, t, size)?;
            let pixels = clean
                .into_iter()
                .map(|v| {
                    if f.noise > 0.0 {
                        let z: f64 = StandardNormal.sample(rng);
                        quantize(v * (1.0 + f.noise * z).max(0.0))
                    } else {
                        quantize(v)
                    }
                })
                .collect();
            out.push(Frame::new(size, size, pixels)?);
        }
        views.push(out);
    }
    Ok(views)
}

/// A label and the rule that sets it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelPredicate {
    pub name: &'static str,
    pub rule: &'static str,
}

pub fn predicates(set: LabelSet) -> &'static [LabelPredicate] {
    match set {
        LabelSet::Separable => &[
            LabelPredicate {
                name: "dilated",
                rule: "axis > 0.5",
            },
            LabelPredicate {
                name: "reduced_function",
                rule: "amplitude < 0.45",
            },
            LabelPredicate {
                name: "eccentric",
                rule: "ratio > 1.25",
            },
            LabelPredicate {
                name: "bright",
                rule: "mean view gain > 0.75",
            },
        ],
        LabelSet::CrossView => &[LabelPredicate {
            name: "first_view_brighter",
            rule: "gain of view 0 > gain of view 1",
        }],
    }
}

pub fn derive_labels(set: LabelSet, f: &SyntheticFactors) -> Vec<f64> {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    match set {
        LabelSet::Separable => {
            let mean_gain = f.views.iter().map(|v| v.gain).sum::<f64>() / f.views.len() as f64;
            vec![
                b(f.axis > 0.5),
                b(f.amplitude < 0.45),
                b(f.ratio > 1.25),
                b(mean_gain > 0.75),
            ]
        }
        LabelSet::CrossView => vec![b(f.views[0].gain > f.views[1].gain)],
    }
}

/// Regression target: area fraction in percent.
pub fn derive_target(f: &SyntheticFactors) -> f64 {
    100.0 * f.area_fraction()
}

fn split_of(cfg: &GeneratorConfig, index: usize) -> Split {
    let n = cfg.studies;
    let n_test = (cfg.test_fraction * n as f64).round() as usize;
    let n_val = (cfg.val_fraction * n as f64).round() as usize;
    if index >= n - n_test.min(n) {
        Split::Test
    } else if index >= n - (n_test + n_val).min(n) {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn study_id(index: usize) -> String {
    format!("synth-{index:05}")
}

/// Study `index` of the dataset drawn from `seed`; independent of every other
/// index.
pub fn generate_study(cfg: &GeneratorConfig, seed: u64, index: usize) -> Result<Study> {
    let mut rng: ChaCha8Rng = RngStreams::new(seed).stream(Stream::Generator, &[index as u64]);
    let factors = SyntheticFactors::sample(cfg, &mut rng);
    let views = render_study(&factors, cfg.frames, cfg.image_size, &mut rng)?;
    Ok(Study {
        id: study_id(index),
        split: split_of(cfg, index),
        views,
        labels: Some(derive_labels(cfg.label_set, &factors)),
        target: Some(derive_target(&factors)),
        factors: Some(factors),
    })
}

pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<Study>> {
    cfg.validate()?;
    (0..cfg.studies).map(|i| generate_study(cfg, seed, i)).collect()
}
