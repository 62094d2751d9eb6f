//! Synthetic scenes: ground-truth boxes plus a feature grid rendered from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::geometry::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub category: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: u64,
    pub objects: Vec<GroundTruth>,
    /// Side of the square feature grid.
    pub grid: usize,
    /// Feature width per cell.
    pub dim: usize,
    /// Row-major `[grid * grid, dim]`; cell `r * grid + c` covers column `c`, row `r`.
    pub features: Vec<f64>,
    pub split: Split,
}

impl Scene {
    pub fn num_cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        &self.features[index * self.dim..(index + 1) * self.dim]
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Center of grid cell `index` in normalized coordinates.
pub fn cell_center(grid: usize, index: usize) -> (f64, f64) {
    let (r, c) = (index / grid, index % grid);
    ((c as f64 + 0.5) / grid as f64, (r as f64 + 0.5) / grid as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub grid: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub max_objects: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub min_size: f64,
    pub max_size: f64,
    /// Placements overlapping an earlier object above this IoU are rejected.
    pub max_mutual_iou: f64,
    /// Bump standard deviation as a fraction of object width / height.
    pub bump_scale: f64,
    /// Seeds the per-category signatures; shared by every scene of a dataset.
    pub signature_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            dim: 32,
            num_classes: 3,
            max_objects: 8,
            noise: 0.1,
            min_size: 0.1,
            max_size: 0.4,
            max_mutual_iou: 0.9,
            bump_scale: 0.5,
            signature_seed: 7,
        }
    }
}

impl GenConfig {
    /// Fixed unit-variance signature per category, `[K, dim]`.
    pub fn signatures(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
        (0..self.num_classes)
            .map(|_| (0..self.dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }
}

const MAX_ATTEMPTS: usize = 100;

fn place_objects(rng: &mut impl Rng, cfg: &GenConfig, count: usize) -> Option<Vec<GroundTruth>> {
    let mut objects: Vec<GroundTruth> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let w = rng.gen_range(cfg.min_size..=cfg.max_size);
            // aspect jitter
            let h = (w * rng.gen_range(0.6..1.6)).clamp(cfg.min_size * 0.6, cfg.max_size * 1.2).min(1.0);
            let cx = rng.gen_range(w / 2.0..=1.0 - w / 2.0);
            let cy = rng.gen_range(h / 2.0..=1.0 - h / 2.0);
            let bbox = BBox::new(cx, cy, w, h);
            if objects.iter().all(|o| iou(&o.bbox, &bbox) <= cfg.max_mutual_iou) {
                let category = rng.gen_range(0..cfg.num_classes);
                objects.push(GroundTruth { bbox, category });
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(objects)
}

/// Renders the feature grid: per object an anisotropic Gaussian bump times the
/// category signature, plus isotropic noise.
pub fn render_features(
    rng: &mut impl Rng,
    cfg: &GenConfig,
    signatures: &[Vec<f64>],
    objects: &[GroundTruth],
) -> Vec<f64> {
    let cells = cfg.grid * cfg.grid;
    let mut out = vec![0.0; cells * cfg.dim];
    for cell in 0..cells {
        let (x, y) = cell_center(cfg.grid, cell);
        let row = &mut out[cell * cfg.dim..(cell + 1) * cfg.dim];
        for o in objects {
            let sx = (o.bbox.w * cfg.bump_scale).max(1e-6);
            let sy = (o.bbox.h * cfg.bump_scale).max(1e-6);
            let dx = (x - o.bbox.cx) / sx;
            let dy = (y - o.bbox.cy) / sy;
            let bump = (-0.5 * (dx * dx + dy * dy)).exp();
            for (r, s) in row.iter_mut().zip(&signatures[o.category]) {
                *r += bump * s;
            }
        }
        if cfg.noise > 0.0 {
            for r in row.iter_mut() {
                *r += cfg.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

/// Samples one scene. The object count is uniform in `1..=max_objects`; a
/// count that cannot be placed is retried with one object fewer.
pub fn generate_scene(rng: &mut impl Rng, cfg: &GenConfig, signatures: &[Vec<f64>], id: u64, split: Split) -> Scene {
    let mut count = rng.gen_range(1..=cfg.max_objects.max(1));
    let objects = loop {
        if let Some(objs) = place_objects(rng, cfg, count) {
            break objs;
        }
        count -= 1;
    };
    let features = render_features(rng, cfg, signatures, &objects);
    Scene {
        id,
        objects,
        grid: cfg.grid,
        dim: cfg.dim,
        features,
        split,
    }
}

/// Per-scene generator seeded from `(seed, id)` so datasets can be built in any order.
pub fn scene_rng(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub fn generate_dataset(cfg: &GenConfig, seed: u64, train: usize, val: usize) -> Vec<Scene> {
    let signatures = cfg.signatures();
    (0..(train + val) as u64)
        .map(|id| {
            let split = if (id as usize) < train { Split::Train } else { Split::Val };
            generate_scene(&mut scene_rng(seed, id), cfg, &signatures, id, split)
        })
        .collect()
}
