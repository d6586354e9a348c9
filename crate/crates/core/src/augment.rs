//! Stochastic feature-space transforms for the teacher and student views.
//!
//! A [`TransformGroup`] is an ordered list of [`TransformSpec`]s sharing a
//! scale `s`: each transform is included independently with probability
//! `s · base_probability`, and included transforms run in list order. Sampling
//! yields a [`SampledTransform`] that records every random draw, so applying
//! it is a pure function and it can be logged as JSON.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transform families with their strength parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TransformKind {
    /// Keep one contiguous window of `[min_keep, 1] · D` coordinates, zero the rest.
    MaskCrop { min_keep: f64 },
    /// Swap each adjacent coordinate pair `(2i, 2i+1)`.
    CoordinateFlip,
    /// Add a shared offset in `±strength` plus per-coordinate noise in `±strength/2`.
    AdditiveJitter { strength: f64 },
    /// Zero every coordinate `i` with `i % groups == g` for one random `g`.
    ChannelDrop { groups: usize },
    /// Moving average with a random radius in `1..=max_radius`.
    SmoothBlur { max_radius: usize },
    /// Add i.i.d. `N(0, std²)` noise.
    GaussianNoise { std: f64 },
    /// Multiply every coordinate by a factor drawn from `[min, max]`.
    ZoomScale { min: f64, max: f64 },
    /// Rotate `pair_fraction · D/2` random disjoint coordinate pairs by angles in `±max_angle`.
    RotationMix { pair_fraction: f64, max_angle: f64 },
    /// Shear `pair_fraction · D/2` random disjoint pairs by factors in `±max_shear`.
    ShearMix { pair_fraction: f64, max_shear: f64 },
    /// Zero each coordinate independently with probability `rate`.
    Dropout { rate: f64 },
    /// Zero one contiguous window of `fraction · D` coordinates.
    Cutout { fraction: f64 },
}

impl TransformKind {
    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::MaskCrop { .. } => "mask-crop",
            TransformKind::CoordinateFlip => "coordinate-flip",
            TransformKind::AdditiveJitter { .. } => "additive-jitter",
            TransformKind::ChannelDrop { .. } => "channel-drop",
            TransformKind::SmoothBlur { .. } => "smooth-blur",
            TransformKind::GaussianNoise { .. } => "gaussian-noise",
            TransformKind::ZoomScale { .. } => "zoom-scale",
            TransformKind::RotationMix { .. } => "rotation-mix",
            TransformKind::ShearMix { .. } => "shear-mix",
            TransformKind::Dropout { .. } => "dropout",
            TransformKind::Cutout { .. } => "cutout",
        }
    }

    fn validate(&self) -> Result<()> {
        let unit = |field: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(
                    format!("{}.{field}", self.name()),
                    format!("must be in [0, 1], got {v}"),
                ))
            }
        };
        let nonneg = |field: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::config(
                    format!("{}.{field}", self.name()),
                    format!("must be finite and >= 0, got {v}"),
                ))
            }
        };
        match *self {
            TransformKind::MaskCrop { min_keep } => {
                unit("min_keep", min_keep)?;
                if min_keep == 0.0 {
                    return Err(Error::config("mask-crop.min_keep", "must be > 0"));
                }
                Ok(())
            }
            TransformKind::CoordinateFlip => Ok(()),
            TransformKind::AdditiveJitter { strength } => nonneg("strength", strength),
            TransformKind::ChannelDrop { groups } => {
                if groups < 2 {
                    Err(Error::config("channel-drop.groups", "must be >= 2"))
                } else {
                    Ok(())
                }
            }
            TransformKind::SmoothBlur { max_radius } => {
                if max_radius == 0 {
                    Err(Error::config("smooth-blur.max_radius", "must be >= 1"))
                } else {
                    Ok(())
                }
            }
            TransformKind::GaussianNoise { std } => nonneg("std", std),
            TransformKind::ZoomScale { min, max } => {
                nonneg("min", min)?;
                nonneg("max", max)?;
                if min > max {
                    return Err(Error::config("zoom-scale.min", "must be <= max"));
                }
                Ok(())
            }
            TransformKind::RotationMix {
                pair_fraction,
                max_angle,
            } => {
                unit("pair_fraction", pair_fraction)?;
                nonneg("max_angle", max_angle)
            }
            TransformKind::ShearMix {
                pair_fraction,
                max_shear,
            } => {
                unit("pair_fraction", pair_fraction)?;
                nonneg("max_shear", max_shear)
            }
            TransformKind::Dropout { rate } => unit("rate", rate),
            TransformKind::Cutout { fraction } => unit("fraction", fraction),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> AppliedOp {
        match *self {
            TransformKind::MaskCrop { min_keep } => {
                let min_len = ((min_keep * dim as f64).ceil() as usize).clamp(1, dim.max(1));
                let len = rng.random_range(min_len..=dim.max(min_len));
                let start = rng.random_range(0..=dim - len.min(dim));
                AppliedOp::KeepWindow { start, len }
            }
            TransformKind::CoordinateFlip => AppliedOp::SwapPairs,
            TransformKind::AdditiveJitter { strength } => {
                let offset = uniform(rng, strength);
                let noise = (0..dim)
                    .map(|_| offset + uniform(rng, strength / 2.0))
                    .collect();
                AppliedOp::Add { noise }
            }
            TransformKind::ChannelDrop { groups } => AppliedOp::DropGroup {
                groups,
                group: rng.random_range(0..groups),
            },
            TransformKind::SmoothBlur { max_radius } => AppliedOp::Blur {
                radius: rng.random_range(1..=max_radius),
            },
            TransformKind::GaussianNoise { std } => AppliedOp::Add {
                noise: (0..dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    })
                    .collect(),
            },
            TransformKind::ZoomScale { min, max } => AppliedOp::Scale {
                factor: if max > min {
                    rng.random_range(min..=max)
                } else {
                    min
                },
            },
            TransformKind::RotationMix {
                pair_fraction,
                max_angle,
            } => AppliedOp::Rotate {
                pairs: random_pairs(dim, pair_fraction, max_angle, rng),
            },
            TransformKind::ShearMix {
                pair_fraction,
                max_shear,
            } => AppliedOp::Shear {
                pairs: random_pairs(dim, pair_fraction, max_shear, rng),
            },
            TransformKind::Dropout { rate } => AppliedOp::Zero {
                indices: (0..dim).filter(|_| rng.random::<f64>() < rate).collect(),
            },
            TransformKind::Cutout { fraction } => {
                let len = ((fraction * dim as f64).round() as usize).min(dim);
                let start = rng.random_range(0..=dim - len);
                AppliedOp::Zero {
                    indices: (start..start + len).collect(),
                }
            }
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

fn random_pairs<R: Rng + ?Sized>(
    dim: usize,
    fraction: f64,
    max_param: f64,
    rng: &mut R,
) -> Vec<(usize, usize, f64)> {
    let mut idx: Vec<usize> = (0..dim).collect();
    let n_pairs = ((fraction * (dim / 2) as f64).round() as usize).min(dim / 2);
    // Partial Fisher-Yates over the first 2·n_pairs slots.
    for i in 0..2 * n_pairs {
        let j = rng.random_range(i..dim);
        idx.swap(i, j);
    }
    idx[..2 * n_pairs]
        .chunks_exact(2)
        .map(|p| (p[0], p[1], uniform(rng, max_param)))
        .collect()
}

/// One member of a transform group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    #[serde(flatten)]
    pub kind: TransformKind,
    pub base_probability: f64,
}

impl TransformSpec {
    pub fn new(kind: TransformKind, base_probability: f64) -> Self {
        Self {
            kind,
            base_probability,
        }
    }
}

/// Ordered transforms whose occurrence probabilities are all scaled by `scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformGroup {
    pub transforms: Vec<TransformSpec>,
    pub scale: f64,
}

impl TransformGroup {
    pub fn new(transforms: Vec<TransformSpec>, scale: f64) -> Result<Self> {
        let g = Self { transforms, scale };
        g.validate()?;
        Ok(g)
    }

    /// Group that never transforms anything.
    pub fn identity() -> Self {
        Self {
            transforms: Vec::new(),
            scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.scale) {
            return Err(Error::config(
                "scale",
                format!("must be in [0, 1], got {}", self.scale),
            ));
        }
        for t in &self.transforms {
            if !(0.0..=1.0).contains(&t.base_probability) {
                return Err(Error::config(
                    format!("{}.base_probability", t.kind.name()),
                    format!("must be in [0, 1], got {}", t.base_probability),
                ));
            }
            t.kind.validate()?;
        }
        Ok(())
    }

    /// The same transforms with a different scale.
    pub fn with_scale(&self, scale: f64) -> Self {
        Self {
            transforms: self.transforms.clone(),
            scale,
        }
    }

    pub fn effective_probability(&self, i: usize) -> f64 {
        (self.scale * self.transforms[i].base_probability).clamp(0.0, 1.0)
    }

    /// Draws a composed transform for vectors of length `dim`. One uniform is
    /// consumed per listed transform, followed by that transform's strength
    /// draws when it is included.
    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> SampledTransform {
        let mut ops = Vec::new();
        for (i, spec) in self.transforms.iter().enumerate() {
            let u: f64 = rng.random();
            if u < self.effective_probability(i) {
                ops.push(spec.kind.draw(dim, rng));
            }
        }
        SampledTransform { dim, ops }
    }
}

/// The default transform family: crop, flip, jitter, channel drop and blur
/// analogues with base probabilities 0.8, 0.5, 0.8, 0.2 and 0.5.
pub fn default_family() -> Vec<TransformSpec> {
    vec![
        TransformSpec::new(TransformKind::MaskCrop { min_keep: 0.5 }, 0.8),
        TransformSpec::new(TransformKind::CoordinateFlip, 0.5),
        TransformSpec::new(TransformKind::AdditiveJitter { strength: 0.8 }, 0.8),
        TransformSpec::new(TransformKind::ChannelDrop { groups: 4 }, 0.2),
        TransformSpec::new(TransformKind::SmoothBlur { max_radius: 2 }, 0.5),
    ]
}

/// Teacher group: the default family scaled by `scale`.
pub fn teacher_group(scale: f64) -> Result<TransformGroup> {
    TransformGroup::new(default_family(), scale)
}

/// Student group: the default family at full strength.
pub fn student_group() -> TransformGroup {
    TransformGroup {
        transforms: default_family(),
        scale: 1.0,
    }
}

/// Held-out deformations, each applied with probability one.
pub fn deformation_suite() -> Vec<(String, TransformGroup)> {
    let kinds = vec![
        TransformKind::GaussianNoise { std: 2.0 },
        TransformKind::Dropout { rate: 0.6 },
        TransformKind::Cutout { fraction: 0.6 },
        TransformKind::ZoomScale {
            min: 0.25,
            max: 2.5,
        },
        TransformKind::RotationMix {
            pair_fraction: 1.0,
            max_angle: std::f64::consts::FRAC_PI_2,
        },
        TransformKind::ShearMix {
            pair_fraction: 1.0,
            max_shear: 2.0,
        },
    ];
    kinds
        .into_iter()
        .map(|k| {
            let name = k.name().to_string();
            (
                name,
                TransformGroup {
                    transforms: vec![TransformSpec::new(k, 1.0)],
                    scale: 1.0,
                },
            )
        })
        .collect()
}

/// A single transform with its random draws fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum AppliedOp {
    KeepWindow { start: usize, len: usize },
    SwapPairs,
    Add { noise: Vec<f64> },
    DropGroup { groups: usize, group: usize },
    Blur { radius: usize },
    Scale { factor: f64 },
    Rotate { pairs: Vec<(usize, usize, f64)> },
    Shear { pairs: Vec<(usize, usize, f64)> },
    Zero { indices: Vec<usize> },
}

impl AppliedOp {
    fn apply_in_place(&self, x: &mut [f64]) {
        match self {
            AppliedOp::KeepWindow { start, len } => {
                let n = x.len();
                let end = (start + len).min(n);
                x[..(*start).min(n)].iter_mut().for_each(|v| *v = 0.0);
                x[end..].iter_mut().for_each(|v| *v = 0.0);
            }
            AppliedOp::SwapPairs => {
                for pair in x.chunks_exact_mut(2) {
                    pair.swap(0, 1);
                }
            }
            AppliedOp::Add { noise } => {
                for (v, n) in x.iter_mut().zip(noise) {
                    *v += n;
                }
            }
            AppliedOp::DropGroup { groups, group } => {
                for v in x.iter_mut().skip(*group).step_by(*groups) {
                    *v = 0.0;
                }
            }
            AppliedOp::Blur { radius } => {
                let src = x.to_vec();
                let n = src.len();
                for (i, v) in x.iter_mut().enumerate() {
                    let lo = i.saturating_sub(*radius);
                    let hi = (i + radius + 1).min(n);
                    *v = src[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
                }
            }
            AppliedOp::Scale { factor } => x.iter_mut().for_each(|v| *v *= factor),
            AppliedOp::Rotate { pairs } => {
                for &(i, j, angle) in pairs {
                    let (s, c) = angle.sin_cos();
                    let (a, b) = (x[i], x[j]);
                    x[i] = c * a - s * b;
                    x[j] = s * a + c * b;
                }
            }
            AppliedOp::Shear { pairs } => {
                for &(i, j, k) in pairs {
                    x[i] += k * x[j];
                }
            }
            AppliedOp::Zero { indices } => {
                for &i in indices {
                    x[i] = 0.0;
                }
            }
        }
    }
}

/// Composed transform with recorded draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledTransform {
    pub dim: usize,
    pub ops: Vec<AppliedOp>,
}

impl SampledTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            ops: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::shape("transform input", self.dim, x.len()));
        }
        let mut out = x.to_vec();
        for op in &self.ops {
            op.apply_in_place(&mut out);
        }
        Ok(out)
    }
}
