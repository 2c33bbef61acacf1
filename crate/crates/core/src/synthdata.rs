//! Synthetic hetero-modal segmentation data and the server/client split.
//!
//! Every sample is a stack of nested ellipses (background plus `n_classes - 1`
//! structures). Each modality sees the same geometry through its own
//! per-class contrast, so a modality with flat contrast across two classes
//! cannot tell them apart.

use std::collections::BTreeSet;
use std::fmt;

use crate::error::{contract_err, param_err, Result};
use crate::numkit::{Rng, Tensor};

/// Index of one imaging modality in the complete set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityId(pub u8);

impl ModalityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Display name from the default list, or `m<id>` beyond it.
    pub fn name(self) -> String {
        DEFAULT_MODALITY_NAMES
            .get(self.index())
            .map_or_else(|| format!("m{}", self.0), |n| n.to_string())
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub const DEFAULT_MODALITY_NAMES: [&str; 4] = ["T1", "T1c", "T2", "FLAIR"];

/// Per-modality, per-class mean intensity. Rows: T1, T1c, T2, FLAIR.
/// Columns: background, edema, core, enhancing.
pub fn default_contrast() -> Vec<Vec<f64>> {
    vec![
        vec![0.15, 0.35, 0.60, 0.60],
        vec![0.15, 0.15, 0.45, 0.90],
        vec![0.15, 0.75, 0.75, 0.45],
        vec![0.15, 0.90, 0.55, 0.55],
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// One `H×W` image per modality of the complete set, indexed by modality.
    pub images: Vec<Tensor>,
    /// `H×W` class indices stored as floats.
    pub label: Tensor,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.label.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.label.shape()[1]
    }

    pub fn classes(&self) -> Vec<usize> {
        self.label.values().iter().map(|&v| v as usize).collect()
    }

    pub fn image(&self, m: ModalityId) -> &Tensor {
        &self.images[m.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataParams {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Gaussian noise standard deviation.
    pub noise: f64,
    /// One row per modality, one column per class, entries in `[0, 1]`.
    pub contrast: Vec<Vec<f64>>,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            n_classes: 4,
            noise: 0.05,
            contrast: default_contrast(),
        }
    }
}

impl DataParams {
    pub fn n_modalities(&self) -> usize {
        self.contrast.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return param_err(format!(
                "image must be at least 8x8, got {}x{}",
                self.height, self.width
            ));
        }
        if self.n_classes < 2 {
            return param_err("need at least two classes (background + one structure)");
        }
        if self.contrast.is_empty() {
            return param_err("contrast matrix has no modalities");
        }
        for (m, row) in self.contrast.iter().enumerate() {
            if row.len() != self.n_classes {
                return param_err(format!(
                    "contrast row {m} has {} entries, expected {}",
                    row.len(),
                    self.n_classes
                ));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return param_err(format!("contrast row {m} leaves [0, 1]"));
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return param_err("noise must be a finite non-negative number");
        }
        Ok(())
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }
}

fn latent_label(rng: &mut Rng, h: usize, w: usize, n_classes: usize) -> Vec<usize> {
    let (hf, wf) = (h as f64, w as f64);
    let cy = rng.uniform(0.38, 0.62) * hf;
    let cx = rng.uniform(0.38, 0.62) * wf;
    let ry = rng.uniform(0.24, 0.36) * hf;
    let rx = rng.uniform(0.24, 0.36) * wf;
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let structures = n_classes - 1;
    let mut shapes = Vec::with_capacity(structures);
    for s in 0..structures {
        let scale = 1.0 - 0.62 * s as f64 / structures as f64 + rng.uniform(-0.04, 0.04);
        let jitter = 0.06 * s as f64;
        shapes.push(Ellipse {
            cy: cy + rng.uniform(-jitter, jitter) * ry,
            cx: cx + rng.uniform(-jitter, jitter) * rx,
            ry: ry * scale,
            rx: rx * scale,
            cos: angle.cos(),
            sin: angle.sin(),
        });
    }
    let mut label = vec![0usize; h * w];
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            for (s, e) in shapes.iter().enumerate() {
                if e.contains(py, px) {
                    label[y * w + x] = s + 1;
                }
            }
        }
    }
    label
}

/// Generates `n_samples` synthetic samples. Identical seeds give identical data.
pub fn generate(seed: u64, n_samples: usize, params: &DataParams) -> Result<Vec<Sample>> {
    params.validate()?;
    let (h, w) = (params.height, params.width);
    (0..n_samples)
        .map(|i| {
            let mut rng = Rng::derive(seed, 0x5A4D_0000 + i as u64);
            let label = latent_label(&mut rng, h, w, params.n_classes);
            let images = params
                .contrast
                .iter()
                .map(|row| {
                    let vals = label
                        .iter()
                        .map(|&c| (row[c] + params.noise * rng.normal()).clamp(0.0, 1.0))
                        .collect();
                    Tensor::new(vec![h, w], vals)
                })
                .collect::<Result<Vec<_>>>()?;
            let label = Tensor::new(vec![h, w], label.iter().map(|&c| c as f64).collect())?;
            Ok(Sample { images, label })
        })
        .collect()
}

/// Per-site acquisition shift: an intensity gain/offset per modality plus extra noise.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub extra_noise: f64,
}

impl SiteShift {
    pub fn identity(n_modalities: usize) -> Self {
        Self {
            gain: vec![1.0; n_modalities],
            offset: vec![0.0; n_modalities],
            extra_noise: 0.0,
        }
    }

    /// Draws a shift of magnitude `jitter` (0 gives the identity).
    pub fn random(rng: &mut Rng, n_modalities: usize, jitter: f64) -> Self {
        if jitter == 0.0 {
            return Self::identity(n_modalities);
        }
        Self {
            gain: (0..n_modalities)
                .map(|_| 1.0 + rng.uniform(-jitter, jitter))
                .collect(),
            offset: (0..n_modalities)
                .map(|_| rng.uniform(-0.5 * jitter, 0.5 * jitter))
                .collect(),
            extra_noise: rng.uniform(0.0, 0.25 * jitter),
        }
    }

    pub fn apply(&self, sample: &Sample, rng: &mut Rng) -> Sample {
        let images = sample
            .images
            .iter()
            .enumerate()
            .map(|(m, img)| {
                let vals = img
                    .values()
                    .iter()
                    .map(|&v| {
                        let noise = if self.extra_noise > 0.0 {
                            self.extra_noise * rng.normal()
                        } else {
                            0.0
                        };
                        (self.gain[m] * v + self.offset[m] + noise).clamp(0.0, 1.0)
                    })
                    .collect();
                Tensor::from_parts(img.shape().to_vec(), vals)
            })
            .collect();
        Sample {
            images,
            label: sample.label.clone(),
        }
    }
}

/// How many pool samples a site asks for.
#[derive(Clone, Debug, PartialEq)]
pub enum SampleRequest {
    Count(usize),
    Indices(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SiteRequest {
    pub modalities: Vec<ModalityId>,
    pub samples: SampleRequest,
}

/// One participant's data assignment. Site 0 is the server.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteSpec {
    pub site_id: usize,
    pub modalities: Vec<ModalityId>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SiteSpec {
    pub fn is_server(&self) -> bool {
        self.site_id == 0
    }

    pub fn all_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.train.iter().chain(&self.val).chain(&self.test).copied()
    }
}

/// Train/val/test sizes for a 6:2:2 split.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (0.6 * n as f64).round() as usize;
    let val = ((0.2 * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Default plan: a full-modal server plus two clients for each of the mono-,
/// dual-, triple- and full-modal combinations.
pub fn default_site_plan(samples_per_site: usize) -> Vec<SiteRequest> {
    let sets: [&[u8]; 9] = [
        &[0, 1, 2, 3],
        &[1],
        &[2],
        &[3, 1],
        &[0, 2],
        &[3, 1, 0],
        &[3, 0, 2],
        &[0, 1, 2, 3],
        &[0, 1, 2, 3],
    ];
    sets.iter()
        .map(|mods| SiteRequest {
            modalities: mods.iter().map(|&m| ModalityId(m)).collect(),
            samples: SampleRequest::Count(samples_per_site),
        })
        .collect()
}

/// Pool size a plan needs.
pub fn pool_size_for(plan: &[SiteRequest]) -> usize {
    let counted: usize = plan
        .iter()
        .map(|r| match &r.samples {
            SampleRequest::Count(n) => *n,
            SampleRequest::Indices(_) => 0,
        })
        .sum();
    let explicit = plan
        .iter()
        .filter_map(|r| match &r.samples {
            SampleRequest::Indices(ix) => ix.iter().max().map(|m| m + 1),
            SampleRequest::Count(_) => None,
        })
        .max()
        .unwrap_or(0);
    explicit + counted
}

/// Assigns disjoint pool samples to each site and splits them 6:2:2.
pub fn make_topology(
    seed: u64,
    pool_size: usize,
    n_modalities: usize,
    plan: &[SiteRequest],
) -> Result<Vec<SiteSpec>> {
    if plan.is_empty() {
        return param_err("site plan is empty");
    }
    for (site, req) in plan.iter().enumerate() {
        let set: BTreeSet<_> = req.modalities.iter().collect();
        if set.len() != req.modalities.len() {
            return param_err(format!("site {site} lists a modality twice"));
        }
        if req.modalities.is_empty() {
            return param_err(format!("site {site} has no modalities"));
        }
        if let Some(m) = req.modalities.iter().find(|m| m.index() >= n_modalities) {
            return param_err(format!("site {site} names unknown modality {m}"));
        }
        if site == 0 && req.modalities.len() != n_modalities {
            return param_err("site 0 is the server and must hold every modality");
        }
    }

    let mut taken = vec![false; pool_size];
    let mut explicit: Vec<Option<Vec<usize>>> = vec![None; plan.len()];
    for (site, req) in plan.iter().enumerate() {
        if let SampleRequest::Indices(ix) = &req.samples {
            for &i in ix {
                if i >= pool_size {
                    return param_err(format!("site {site} asks for sample {i} beyond pool of {pool_size}"));
                }
                if taken[i] {
                    return contract_err(format!("sample {i} requested by more than one site"));
                }
                taken[i] = true;
            }
            explicit[site] = Some(ix.clone());
        }
    }

    let mut free: Vec<usize> = (0..pool_size).filter(|&i| !taken[i]).collect();
    Rng::derive(seed, 0x7090).shuffle(&mut free);
    let mut cursor = 0;

    plan.iter()
        .enumerate()
        .map(|(site, req)| {
            let indices = match (&req.samples, explicit[site].take()) {
                (_, Some(ix)) => ix,
                (SampleRequest::Count(n), None) => {
                    if cursor + n > free.len() {
                        return param_err(format!(
                            "site {site} asks for {n} samples but only {} remain in the pool",
                            free.len() - cursor
                        ));
                    }
                    let chunk = free[cursor..cursor + n].to_vec();
                    cursor += n;
                    chunk
                }
                (SampleRequest::Indices(_), None) => unreachable!(),
            };
            let (tr, va, _) = split_sizes(indices.len());
            let mut modalities = req.modalities.clone();
            modalities.sort();
            Ok(SiteSpec {
                site_id: site,
                modalities,
                train: indices[..tr].to_vec(),
                val: indices[tr..tr + va].to_vec(),
                test: indices[tr + va..].to_vec(),
            })
        })
        .collect()
}

/// A site's samples after its acquisition shift has been applied.
#[derive(Clone, Debug)]
pub struct SiteData {
    pub spec: SiteSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Renders a site's share of the pool, applying a seeded acquisition shift
/// (clients only; the server sees the pool as generated).
pub fn materialize(seed: u64, pool: &[Sample], spec: &SiteSpec, jitter: f64) -> SiteData {
    let n_mod = pool.first().map_or(0, |s| s.images.len());
    let mut rng = Rng::derive(seed, 0x517E_0000 + spec.site_id as u64);
    let shift = if spec.is_server() {
        SiteShift::identity(n_mod)
    } else {
        SiteShift::random(&mut rng, n_mod, jitter)
    };
    let mut take = |ix: &[usize]| -> Vec<Sample> {
        ix.iter().map(|&i| shift.apply(&pool[i], &mut rng)).collect()
    };
    SiteData {
        spec: spec.clone(),
        train: take(&spec.train),
        val: take(&spec.val),
        test: take(&spec.test),
    }
}
