//! Synthetic scenes in which the most class-typical proposal is a small
//! part of the object rather than the object itself.
//!
//! Every object has a full box and a "part" sub-box covering the top
//! `part_fraction` of it. Proposals are jittered full boxes, jittered part
//! boxes and random background boxes. A proposal's raw feature sums, over
//! the objects it touches, the object's class prototype scaled by the
//! fraction of the proposal lying inside the object; proposals made mostly
//! of a part carry the prototype's part component amplified by
//! `part_signal_gain`. Gaussian noise is added last.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{GtBox, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::numcore::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub num_classes: usize,
    pub images_train: usize,
    pub images_test: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub canvas_width: f64,
    pub canvas_height: f64,
    /// Object side lengths, as a fraction of the canvas.
    pub object_size_min: f64,
    pub object_size_max: f64,
    pub part_fraction: f64,
    pub part_signal_gain: f64,
    /// Share of each prototype's squared norm that lives only in full-object
    /// evidence (absent from parts). Zero makes part proposals carry the
    /// whole prototype.
    pub body_share: f64,
    pub proposals_per_object: usize,
    /// How many of each object's proposals are jittered part boxes.
    pub part_proposals_per_object: usize,
    /// Extra top-anchored boxes per object whose height is drawn between the
    /// part height and the full height.
    pub extent_proposals_per_object: usize,
    pub background_proposals: usize,
    /// Maximum corner displacement, relative to the jittered box's size.
    pub jitter: f64,
    pub feature_dim: usize,
    pub prototype_norm: f64,
    pub feature_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_classes: 5,
            images_train: 200,
            images_test: 100,
            objects_min: 1,
            objects_max: 3,
            canvas_width: 100.0,
            canvas_height: 100.0,
            object_size_min: 0.25,
            object_size_max: 0.5,
            part_fraction: 0.3,
            part_signal_gain: 2.0,
            body_share: 0.0,
            proposals_per_object: 8,
            part_proposals_per_object: 4,
            extent_proposals_per_object: 0,
            background_proposals: 12,
            jitter: 0.12,
            feature_dim: 32,
            prototype_norm: 4.0,
            feature_noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// The bundled ablation benchmark: 5 classes, 200 train and 100 test
    /// images, with parts that show only part of the class appearance and
    /// extra proposals of intermediate height on every object.
    pub fn benchmark() -> Self {
        SceneSpec { part_signal_gain: 1.2, body_share: 0.45, extent_proposals_per_object: 4, ..SceneSpec::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("scene spec: {m}")));
        if self.num_classes == 0 || self.feature_dim == 0 {
            return bad("num_classes and feature_dim must be positive");
        }
        if self.objects_min == 0 || self.objects_max < self.objects_min {
            return bad("need 1 <= objects_min <= objects_max");
        }
        if self.proposals_per_object == 0 || self.part_proposals_per_object > self.proposals_per_object {
            return bad("need 0 <= part proposals <= proposals_per_object, proposals_per_object >= 1");
        }
        if !(self.canvas_width > 0.0 && self.canvas_height > 0.0) {
            return bad("canvas must have positive size");
        }
        if !(0.0 < self.object_size_min && self.object_size_min <= self.object_size_max && self.object_size_max <= 1.0)
        {
            return bad("object sizes must satisfy 0 < min <= max <= 1");
        }
        if !(0.0 < self.part_fraction && self.part_fraction < 1.0) {
            return bad("part_fraction must lie in (0, 1)");
        }
        if !(self.part_signal_gain > 0.0 && self.feature_noise_sigma >= 0.0 && self.prototype_norm > 0.0) {
            return bad("gain and prototype norm must be positive, noise non-negative");
        }
        if !(0.0..1.0).contains(&self.body_share) {
            return bad("body_share must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return bad("jitter must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// How a proposal was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalKind {
    /// Jittered full box of object `i` (index into the image's objects).
    Full(usize),
    /// Jittered part box of object `i`.
    Part(usize),
    /// Jittered box covering the top of object `i`, taller than its part.
    Extent(usize),
    Background,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSplit {
    pub train: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
    /// Per image, per proposal.
    pub train_kinds: Vec<Vec<ProposalKind>>,
    pub test_kinds: Vec<Vec<ProposalKind>>,
    /// `C × D_raw` class prototypes.
    pub prototypes: Matrix,
    /// Part component of each prototype, same shape.
    pub part_prototypes: Matrix,
}

/// Class prototypes: each is `u + b` with the part component `u` and the
/// body component `b` drawn independently, `|b|² = body_share·|p|²`.
fn prototypes(spec: &SceneSpec) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5ee_d0fc_1a55);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |norm: f64| -> Vec<f64> {
        let v: Vec<f64> = (0..spec.feature_dim).map(|_| normal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x * norm / n).collect()
    };
    let part_norm = spec.prototype_norm * (1.0 - spec.body_share).sqrt();
    let body_norm = spec.prototype_norm * spec.body_share.sqrt();
    let mut full = Vec::with_capacity(spec.num_classes * spec.feature_dim);
    let mut part = Vec::with_capacity(spec.num_classes * spec.feature_dim);
    for _ in 0..spec.num_classes {
        let u = draw(part_norm);
        let b = if spec.body_share > 0.0 { draw(body_norm) } else { vec![0.0; spec.feature_dim] };
        full.extend(u.iter().zip(&b).map(|(x, y)| x + y));
        part.extend(u);
    }
    (
        Matrix::from_vec(spec.num_classes, spec.feature_dim, full).unwrap(),
        Matrix::from_vec(spec.num_classes, spec.feature_dim, part).unwrap(),
    )
}

/// Top `fraction` of a box.
fn part_box(b: &BBox, fraction: f64) -> BBox {
    BBox::new(b.x1, b.y1, b.x2, b.y1 + fraction * b.height())
}

fn clip(b: BBox, spec: &SceneSpec) -> BBox {
    let x1 = b.x1.clamp(0.0, spec.canvas_width - 1.0);
    let y1 = b.y1.clamp(0.0, spec.canvas_height - 1.0);
    let x2 = b.x2.clamp(x1 + 1.0, spec.canvas_width);
    let y2 = b.y2.clamp(y1 + 1.0, spec.canvas_height);
    BBox::new(x1, y1, x2, y2)
}

fn jittered<R: Rng>(b: &BBox, jitter: f64, spec: &SceneSpec, rng: &mut R) -> BBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| if jitter > 0.0 { rng.random_range(-jitter..jitter) * s } else { 0.0 };
    clip(BBox::new(b.x1 + d(w), b.y1 + d(h), b.x2 + d(w), b.y2 + d(h)), spec)
}

/// Fraction of the proposal's area lying inside the object, in `[0, 1]`.
pub fn overlap_fraction(proposal: &BBox, object: &BBox) -> f64 {
    let a = proposal.area();
    if a <= 0.0 {
        0.0
    } else {
        (proposal.intersection_area(object) / a).clamp(0.0, 1.0)
    }
}

/// True when more than half of the proposal is part region.
fn mostly_part(proposal: &BBox, part: &BBox) -> bool {
    overlap_fraction(proposal, part) > 0.5
}

/// Noise-free feature of `proposal` given the image's objects.
pub(crate) fn clean_feature(
    proposal: &BBox,
    objects: &[(usize, BBox)],
    spec: &SceneSpec,
    full: &Matrix,
    part: &Matrix,
) -> Vec<f64> {
    let mut f = vec![0.0; spec.feature_dim];
    for &(class, obj) in objects {
        let frac = overlap_fraction(proposal, &obj);
        if frac == 0.0 {
            continue;
        }
        let (proto, gain) = if mostly_part(proposal, &part_box(&obj, spec.part_fraction)) {
            (part.row(class), spec.part_signal_gain)
        } else {
            (full.row(class), 1.0)
        };
        for (fi, &p) in f.iter_mut().zip(proto) {
            *fi += p * frac * gain;
        }
    }
    f
}

fn image_rng(seed: u64, split: u64, index: usize) -> ChaCha8Rng {
    // splitmix-style mixing of (seed, split, index)
    let mut z = seed ^ (split << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_objects<R: Rng>(spec: &SceneSpec, rng: &mut R) -> Vec<(usize, BBox)> {
    let n = rng.random_range(spec.objects_min..=spec.objects_max);
    let mut objects: Vec<(usize, BBox)> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n && attempts < 200 {
        attempts += 1;
        let w = rng.random_range(spec.object_size_min..=spec.object_size_max) * spec.canvas_width;
        let h = rng.random_range(spec.object_size_min..=spec.object_size_max) * spec.canvas_height;
        let x = rng.random_range(0.0..=(spec.canvas_width - w));
        let y = rng.random_range(0.0..=(spec.canvas_height - h));
        let b = BBox::new(x, y, x + w, y + h);
        if objects.iter().all(|(_, o)| iou(o, &b) < 0.1) {
            objects.push((rng.random_range(0..spec.num_classes), b));
        }
    }
    objects
}

fn generate_image(
    spec: &SceneSpec,
    split: u64,
    index: usize,
    full: &Matrix,
    part: &Matrix,
) -> (ImageSample, Vec<ProposalKind>) {
    let mut rng = image_rng(spec.seed, split, index);
    let objects = sample_objects(spec, &mut rng);

    let mut proposals: Vec<(BBox, ProposalKind)> = Vec::new();
    for (i, (_, obj)) in objects.iter().enumerate() {
        let pbox = part_box(obj, spec.part_fraction);
        for j in 0..spec.proposals_per_object {
            if j < spec.part_proposals_per_object {
                proposals.push((jittered(&pbox, spec.jitter, spec, &mut rng), ProposalKind::Part(i)));
            } else {
                proposals.push((jittered(obj, spec.jitter, spec, &mut rng), ProposalKind::Full(i)));
            }
        }
        for _ in 0..spec.extent_proposals_per_object {
            let share = rng.random_range(spec.part_fraction..=1.0);
            let ebox = part_box(obj, share);
            proposals.push((jittered(&ebox, spec.jitter, spec, &mut rng), ProposalKind::Extent(i)));
        }
    }
    let min_side = 0.08 * spec.canvas_width.min(spec.canvas_height);
    let max_side = 0.45 * spec.canvas_width.min(spec.canvas_height);
    for _ in 0..spec.background_proposals {
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let x = rng.random_range(0.0..=(spec.canvas_width - w));
        let y = rng.random_range(0.0..=(spec.canvas_height - h));
        proposals.push((BBox::new(x, y, x + w, y + h), ProposalKind::Background));
    }
    proposals.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.feature_noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Vec::with_capacity(proposals.len() * spec.feature_dim);
    for (b, _) in &proposals {
        for v in clean_feature(b, &objects, spec, full, part) {
            let n = if spec.feature_noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push(v + n);
        }
    }

    let mut labels = vec![false; spec.num_classes];
    for &(c, _) in &objects {
        labels[c] = true;
    }
    let gt = objects.iter().map(|&(c, b)| GtBox { class_id: c + 1, bbox: b }).collect();
    let prefix = if split == 0 { "train" } else { "test" };
    let sample = ImageSample::new(
        format!("{prefix}_{index:05}"),
        labels,
        proposals.iter().map(|p| p.0).collect(),
        Matrix::from_vec(proposals.len(), spec.feature_dim, data).unwrap(),
        Some(gt),
    )
    .expect("generator produces consistent samples");
    (sample, proposals.into_iter().map(|p| p.1).collect())
}

/// Generates train and test splits along with each proposal's provenance.
pub fn generate_with_provenance(spec: &SceneSpec) -> Result<GeneratedSplit> {
    spec.validate()?;
    let (full, part) = prototypes(spec);
    let make = |split: u64, n: usize| -> (Vec<ImageSample>, Vec<Vec<ProposalKind>>) {
        (0..n).map(|i| generate_image(spec, split, i, &full, &part)).unzip()
    };
    let (train, train_kinds) = make(0, spec.images_train);
    let (test, test_kinds) = make(1, spec.images_test);
    Ok(GeneratedSplit { train, test, train_kinds, test_kinds, prototypes: full, part_prototypes: part })
}

/// Generates `(train, test)`. Deterministic given `spec.seed`.
pub fn generate(spec: &SceneSpec) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let g = generate_with_provenance(spec)?;
    Ok((g.train, g.test))
}
