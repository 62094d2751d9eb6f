use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AdamState, Gradients, Graph, Value};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, ClsLossConfig, LossWeights};
use crate::matching::{match_predictions, select_matcher, MatcherConfig, MatcherKind};
use crate::query::QueryState;
use crate::scene::{GroundTruth, Scene};

use super::Model;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    #[default]
    Adam,
}

impl Optimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }
}

impl std::str::FromStr for Optimizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd|adam)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    /// Scenes per gradient step.
    pub batch: usize,
    pub optimizer: Optimizer,
    pub rate: f64,
    /// Decoupled weight decay (Adam only).
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip: f64,
    /// Seeds the scene sampling order.
    pub seed: u64,
    pub weights: LossWeights,
    pub cls: ClsLossConfig,
    pub matcher: MatcherConfig,
    /// Switch decoder matching to the high-order cost per `matcher.schedule`.
    pub high_order: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 4,
            optimizer: Optimizer::Adam,
            rate: 1e-3,
            weight_decay: 1e-4,
            clip: 0.1,
            seed: 0,
            weights: LossWeights::default(),
            cls: ClsLossConfig::default(),
            matcher: MatcherConfig::default(),
            high_order: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if !(self.rate > 0.0 && self.rate.is_finite() && self.clip > 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("rate {} and clip {} must be positive", self.rate, self.clip)));
        }
        Ok(())
    }

    /// Decoder matcher in effect at `step`.
    pub fn matcher_at(&self, step: usize) -> MatcherKind {
        if self.high_order {
            select_matcher(step, self.steps, self.matcher.schedule)
        } else {
            MatcherKind::Linear
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    /// Batch mean of the per-scene loss.
    pub loss: f64,
    /// Mean IoU of the final layer's matched pairs.
    pub matched_iou: f64,
    pub matcher: MatcherKind,
}

/// Loss of one scene: the set loss of every decoder layer plus the encoder
/// proposals (always matched with the linear cost), divided by the number of
/// ground truths. Non-finite predictions are reported as
/// [`Error::Numerical`] with `step` 0.
pub struct SceneLoss {
    pub total: Value,
    pub matched_iou: f64,
}

pub fn scene_loss(g: &mut Graph, model: &Model, scene: &Scene, cfg: &TrainConfig, kind: MatcherKind) -> Result<SceneLoss> {
    let out = model.forward(g, scene)?;
    for q in std::iter::once(&out.encoder).chain(&out.layers) {
        if !(g.data(q.probs).iter().chain(g.data(q.boxes)).all(|x| x.is_finite())) {
            return Err(Error::Numerical {
                step: 0,
                scene_id: scene.id,
                detail: format!("non-finite predictions at layer {}", q.layer),
            });
        }
    }
    let gts = &scene.objects;
    let (mut total, _) = layer_loss(g, &out.encoder, gts, cfg, MatcherKind::Linear)?;
    let mut matched_iou = 0.0;
    for q in &out.layers {
        let (l, iou) = layer_loss(g, q, gts, cfg, kind)?;
        total = g.add(total, l)?;
        matched_iou = iou;
    }
    let total = g.scale(total, 1.0 / gts.len().max(1) as f64);
    Ok(SceneLoss { total, matched_iou })
}

fn layer_loss(
    g: &mut Graph,
    q: &QueryState,
    gts: &[GroundTruth],
    cfg: &TrainConfig,
    kind: MatcherKind,
) -> Result<(Value, f64)> {
    let a = match_predictions(&q.snapshot(g), gts, kind, &cfg.weights, &cfg.matcher)?;
    let terms = composite_loss(g, q, gts, &a, &cfg.weights, &cfg.cls)?;
    Ok((terms.total, terms.matched_iou))
}

/// Clipped gradient steps over scenes drawn epoch by epoch in a
/// seeded shuffled order.
pub fn train(model: &mut Model, scenes: &[Scene], cfg: &TrainConfig) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Contract("training needs at least one scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut queue: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut adam = AdamState::new(&model.store);
    for step in 0..cfg.steps {
        let kind = cfg.matcher_at(step);
        let mut grads = Gradients::zeros(&model.store);
        let (mut loss, mut iou) = (0.0, 0.0);
        for _ in 0..cfg.batch {
            if queue.is_empty() {
                queue = (0..scenes.len()).rev().collect();
                queue.shuffle(&mut rng);
            }
            let scene = &scenes[queue.pop().expect("refilled")];
            let mut g = Graph::new();
            let l = scene_loss(&mut g, model, scene, cfg, kind).map_err(|e| match e {
                Error::Numerical { scene_id, detail, .. } => Error::Numerical { step, scene_id, detail },
                other => other,
            })?;
            let value = g.item(l.total);
            if !value.is_finite() {
                return Err(Error::Numerical {
                    step,
                    scene_id: scene.id,
                    detail: format!("loss = {value}"),
                });
            }
            g.backward(l.total)?;
            if !g.param_grads().all(|(_, d)| d.iter().all(|x| x.is_finite())) {
                return Err(Error::Numerical {
                    step,
                    scene_id: scene.id,
                    detail: "non-finite gradient".into(),
                });
            }
            grads.accumulate(g.param_grads(), 1.0 / cfg.batch as f64);
            loss += value / cfg.batch as f64;
            iou += l.matched_iou / cfg.batch as f64;
        }
        grads.clip_norm(cfg.clip);
        match cfg.optimizer {
            Optimizer::Sgd => model.store.apply_step(&grads, cfg.rate),
            Optimizer::Adam => adam.step(&mut model.store, &grads, cfg.rate, cfg.weight_decay),
        }
        log.push(StepLog {
            step,
            loss,
            matched_iou: iou,
            matcher: kind,
        });
    }
    Ok(log)
}
