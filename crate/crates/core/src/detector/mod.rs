//! Miniature two-stage detection transformer over a synthetic feature grid.
//!
//! Encoder: a 3x3 neighbourhood projection of the grid, then one
//! self-attention + MLP block over the cells. A dense
//! proposal head scores every cell; the `n` most confident cells seed the
//! decoder's reference boxes and positional queries. Each decoder layer runs
//! query self-attention, cross-attention to the cells and an MLP, then the
//! shared class head and a box head that refines the reference box in
//! inverse-sigmoid space.

mod train;

pub use train::{scene_loss, train, Optimizer, SceneLoss, StepLog, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, ParamId, ParamStore, Value};
use crate::error::{Error, Result};
use crate::query::QueryState;
use crate::rank::{
    rank_adaptive_head, rank_and_fuse, ranking_basis, sine_pe, topk_select, FuseParams, PeMlp,
    PositionalVariant, RankedDetection,
};
use crate::scene::{cell_center, Scene};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub queries: usize,
    pub width: usize,
    pub classes: usize,
    pub grid: usize,
    pub feature_dim: usize,
    pub rank_head: bool,
    pub query_rank: bool,
    pub positional: PositionalVariant,
    /// Gaussian prior around the reference box added to cross-attention logits.
    pub attn_prior: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            queries: 30,
            width: 32,
            classes: 3,
            grid: 8,
            feature_dim: 32,
            rank_head: false,
            query_rank: false,
            positional: PositionalVariant::Sort,
            attn_prior: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.queries == 0 || self.classes == 0 || self.grid == 0 || self.feature_dim == 0 {
            return fail("layers, queries, classes, grid and feature_dim must be positive".into());
        }
        if self.width == 0 || self.width % 8 != 0 {
            return fail(format!("width must be a positive multiple of 8, got {}", self.width));
        }
        if self.queries > self.grid * self.grid {
            return fail(format!(
                "{} queries exceed the {} proposal cells",
                self.queries,
                self.grid * self.grid
            ));
        }
        if self.query_rank && self.layers < 2 {
            return fail("the query rank layer needs at least 2 decoder layers".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    hidden: Linear,
    out: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FuseIds {
    rank_content: ParamId,
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    mlp: Mlp,
    rank_bias: Option<ParamId>,
    fuse: Option<FuseIds>,
}

#[derive(Clone, Debug)]
struct Ids {
    input: Linear,
    cell_pe: Mlp,
    enc_attn: Attention,
    enc_mlp: Mlp,
    prop_cls: Linear,
    prop_box: Linear,
    query_pe: Mlp,
    content0: ParamId,
    layers: Vec<DecoderLayer>,
    cls: Linear,
    box_head: Mlp,
}

/// Parameters plus the configuration that shaped them.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    ids: Ids,
}

/// Prior probability of the class heads' bias initialisation.
const PRIOR_PROB: f64 = 0.01;
const FUSE_NOISE: f64 = 1e-3;
const RANK_CONTENT_STD: f64 = 0.02;
const ANCHOR_SIZE: f64 = 0.25;

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * self.rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(self.store.insert(name, shape, data)?)
    }

    fn fill(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        Ok(self.store.insert(name, shape, vec![value; shape.iter().product()])?)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.normal(&format!("{name}.w"), &[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())?,
            b: self.fill(&format!("{name}.b"), &[fan_out], 0.0)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        let std = (1.0 / d as f64).sqrt();
        Ok(Attention {
            q: self.normal(&format!("{name}.q"), &[d, d], std)?,
            k: self.normal(&format!("{name}.k"), &[d, d], std)?,
            v: self.normal(&format!("{name}.v"), &[d, d], std)?,
            o: self.normal(&format!("{name}.o"), &[d, d], std)?,
        })
    }

    fn mlp(&mut self, name: &str, d_in: usize, hidden: usize, d_out: usize) -> Result<Mlp> {
        Ok(Mlp {
            hidden: self.linear(&format!("{name}.hidden"), d_in, hidden)?,
            out: self.linear(&format!("{name}.out"), hidden, d_out)?,
        })
    }
}

/// Outputs of one forward pass. Decoder rows are in rank order; see
/// [`QueryState::order`].
#[derive(Clone, Debug)]
pub struct Forward {
    /// Dense per-cell proposals (`layer` 0).
    pub encoder: QueryState,
    pub layers: Vec<QueryState>,
    /// Cells whose proposals seeded the queries.
    pub selected: Vec<usize>,
}

impl Forward {
    pub fn last(&self) -> &QueryState {
        self.layers.last().expect("at least one decoder layer")
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, k, n) = (cfg.width, cfg.classes, cfg.queries);
        let mut store = ParamStore::new();
        let prior_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
        };
        let input = init.linear("input", 9 * cfg.feature_dim, d)?;
        let cell_pe = init.mlp("cell_pe", d, d, d)?;
        let enc_attn = init.attention("enc.attn", d)?;
        let enc_mlp = init.mlp("enc.mlp", d, 2 * d, d)?;
        let prop_cls = init.linear("prop.cls", d, k)?;
        init.store.get_mut(prop_cls.b).data.fill(prior_bias);
        let prop_box = init.linear("prop.box", d, 4)?;
        let query_pe = init.mlp("query_pe", d, d, d)?;
        let content0 = init.normal("content0", &[n, d], 1.0)?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            layers.push(DecoderLayer {
                self_attn: init.attention(&format!("dec{l}.self"), d)?,
                cross_attn: init.attention(&format!("dec{l}.cross"), d)?,
                mlp: init.mlp(&format!("dec{l}.mlp"), d, 2 * d, d)?,
                rank_bias: None,
                fuse: None,
            });
        }
        let cls = init.linear("cls", d, k)?;
        init.store.get_mut(cls.b).data.fill(prior_bias);
        let box_head = init.mlp("box", d, d, 4)?;
        init.store.get_mut(box_head.out.w).data.iter_mut().for_each(|x| *x *= 0.1);

        // rank parameters draw from their own stream so that the shared
        // parameters are identical with and without them
        let mut rank_init = Init {
            store: &mut store,
            rng: {
                let mut r = ChaCha8Rng::seed_from_u64(cfg.init_seed);
                r.set_stream(1);
                r
            },
        };
        for (i, layer) in layers.iter_mut().enumerate() {
            let l = i + 1;
            if cfg.rank_head {
                layer.rank_bias = Some(rank_init.fill(&format!("dec{l}.rank_bias"), &[n, k], 0.0)?);
            }
            if cfg.query_rank && l >= 2 {
                let rank_content = rank_init.normal(&format!("dec{l}.rank_content"), &[n, d], RANK_CONTENT_STD)?;
                let weight = rank_init.normal(&format!("dec{l}.fuse.w"), &[2 * d, d], FUSE_NOISE)?;
                for j in 0..d {
                    rank_init.store.get_mut(weight).data[j * d + j] += 1.0;
                }
                let bias = rank_init.fill(&format!("dec{l}.fuse.b"), &[d], 0.0)?;
                layer.fuse = Some(FuseIds {
                    rank_content,
                    weight,
                    bias,
                });
            }
        }
        Ok(Self {
            ids: Ids {
                input,
                cell_pe,
                enc_attn,
                enc_mlp,
                prop_cls,
                prop_box,
                query_pe,
                content0,
                layers,
                cls,
                box_head,
            },
            cfg,
            store,
        })
    }

    /// Zeroes the rank biases and rank content and makes every fuse an exact
    /// pass-through, which reduces the rank mechanisms to the plain model.
    pub fn neutralize_rank_params(&mut self) {
        let d = self.cfg.width;
        for layer in &self.ids.layers {
            if let Some(b) = layer.rank_bias {
                self.store.get_mut(b).data.fill(0.0);
            }
            if let Some(f) = layer.fuse {
                self.store.get_mut(f.rank_content).data.fill(0.0);
                self.store.get_mut(f.bias).data.fill(0.0);
                let w = &mut self.store.get_mut(f.weight).data;
                w.fill(0.0);
                for j in 0..d {
                    w[j * d + j] = 1.0;
                }
            }
        }
    }

    pub fn forward(&self, g: &mut Graph, scene: &Scene) -> Result<Forward> {
        let cfg = &self.cfg;
        if scene.grid != cfg.grid || scene.dim != cfg.feature_dim {
            return Err(Error::Contract(format!(
                "scene {} has a {}x{} grid of width {}, model expects {}x{} of width {}",
                scene.id, scene.grid, scene.grid, scene.dim, cfg.grid, cfg.grid, cfg.feature_dim
            )));
        }
        let (k, n) = (cfg.classes, cfg.queries);
        let cells = scene.num_cells();
        let ids = &self.ids;

        let centers: Vec<(f64, f64)> = (0..cells).map(|c| cell_center(cfg.grid, c)).collect();
        let cell_size = 1.0 / cfg.grid as f64;
        let cell_boxes: Vec<f64> = centers.iter().flat_map(|&(x, y)| [x, y, cell_size, cell_size]).collect();
        let cell_boxes = g.constant(&[cells, 4], cell_boxes)?;
        let cell_pe = self.pe_mlp(g, &ids.cell_pe);
        let cell_pos = sine_pe(g, cell_boxes, &cell_pe)?;

        // encoder
        let feats = g.constant(&[cells, 9 * cfg.feature_dim], neighbourhoods(scene))?;
        let x = self.linear(g, &ids.input, feats)?;
        let h = g.add(x, cell_pos)?;
        let a = self.attention(g, &ids.enc_attn, h, h, x, None)?;
        let x = g.add(x, a)?;
        let x = layer_norm(g, x)?;
        let m = self.mlp(g, &ids.enc_mlp, x)?;
        let x = g.add(x, m)?;
        let memory = layer_norm(g, x)?;

        // dense proposals, boxes as offsets from per-cell anchors
        let enc_logits = self.linear(g, &ids.prop_cls, memory)?;
        let enc_probs = g.sigmoid(enc_logits);
        let anchors: Vec<f64> = centers
            .iter()
            .flat_map(|&(x, y)| [x, y, ANCHOR_SIZE, ANCHOR_SIZE].map(inverse_sigmoid))
            .collect();
        let anchors = g.constant(&[cells, 4], anchors)?;
        let delta = self.linear(g, &ids.prop_box, memory)?;
        let enc_boxes = g.add(anchors, delta)?;
        let enc_boxes = g.sigmoid(enc_boxes);
        let encoder = QueryState {
            layer: 0,
            content: memory,
            positional: cell_pos,
            logits: enc_logits,
            probs: enc_probs,
            boxes: enc_boxes,
            order: (0..cells).collect(),
        };

        let (_, cell_rank) = ranking_basis(g.data(enc_probs), k);
        let selected: Vec<usize> = cell_rank[..n].to_vec();
        let proposals = g.take_rows(enc_boxes, &selected)?;
        let mut reference = g.detach(proposals);
        let query_pe = self.pe_mlp(g, &ids.query_pe);
        let mut positional = sine_pe(g, reference, &query_pe)?;
        let mut content = g.param(&self.store, ids.content0);
        let mut order: Vec<usize> = (0..n).collect();
        let mem_keys = g.add(memory, cell_pos)?;
        let cls_w = g.param(&self.store, ids.cls.w);
        let cls_b = g.param(&self.store, ids.cls.b);

        let mut layers: Vec<QueryState> = Vec::with_capacity(cfg.layers);
        for (i, layer) in ids.layers.iter().enumerate() {
            if let Some(prev) = layers.last() {
                if let Some(f) = layer.fuse.filter(|_| cfg.query_rank) {
                    let fuse = FuseParams {
                        rank_content: g.param(&self.store, f.rank_content),
                        weight: g.param(&self.store, f.weight),
                        bias: g.param(&self.store, f.bias),
                    };
                    let r = rank_and_fuse(g, prev, &fuse, cfg.positional, &query_pe)?;
                    content = r.content;
                    reference = g.detach(r.boxes);
                    positional = match cfg.positional {
                        PositionalVariant::Sort => r.positional,
                        // re-encode from the detached boxes
                        PositionalVariant::Recreate => sine_pe(g, reference, &query_pe)?,
                    };
                    order = r.order;
                } else {
                    content = prev.content;
                    reference = g.detach(prev.boxes);
                    positional = match cfg.positional {
                        PositionalVariant::Sort => prev.positional,
                        PositionalVariant::Recreate => sine_pe(g, reference, &query_pe)?,
                    };
                    order = prev.order.clone();
                }
            }

            let q = g.add(content, positional)?;
            let a = self.attention(g, &layer.self_attn, q, q, content, None)?;
            let c = g.add(content, a)?;
            let c = layer_norm(g, c)?;

            let q = g.add(c, positional)?;
            let prior = if cfg.attn_prior {
                Some(self.attention_prior(g, reference, &centers)?)
            } else {
                None
            };
            let a = self.attention(g, &layer.cross_attn, q, mem_keys, memory, prior)?;
            let c = g.add(c, a)?;
            let c = layer_norm(g, c)?;
            let m = self.mlp(g, &layer.mlp, c)?;
            let c = g.add(c, m)?;
            let c = layer_norm(g, c)?;

            let logits = g.matmul(c, cls_w)?;
            let logits = g.add(logits, cls_b)?;
            let bias = match layer.rank_bias.filter(|_| cfg.rank_head) {
                Some(b) => Some(g.param(&self.store, b)),
                None => None,
            };
            let probs = rank_adaptive_head(g, logits, bias)?;
            let delta = self.mlp(g, &ids.box_head, c)?;
            let base: Vec<f64> = g.data(reference).iter().map(|&x| inverse_sigmoid(x)).collect();
            let base = g.constant(&[n, 4], base)?;
            let boxes = g.add(base, delta)?;
            let boxes = g.sigmoid(boxes);
            layers.push(QueryState {
                layer: i + 1,
                content: c,
                positional,
                logits,
                probs,
                boxes,
                order: order.clone(),
            });
        }
        Ok(Forward {
            encoder,
            layers,
            selected,
        })
    }

    /// Ranked detections from the final layer.
    pub fn infer(&self, scene: &Scene, k: usize) -> Result<Vec<RankedDetection>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, scene)?;
        let p = out.last().snapshot(&g);
        topk_select(&p.probs, p.num_classes, &p.boxes, k)
    }

    fn pe_mlp(&self, g: &mut Graph, m: &Mlp) -> PeMlp {
        PeMlp {
            w1: g.param(&self.store, m.hidden.w),
            b1: g.param(&self.store, m.hidden.b),
            w2: g.param(&self.store, m.out.w),
            b2: g.param(&self.store, m.out.b),
        }
    }

    fn linear(&self, g: &mut Graph, l: &Linear, x: Value) -> Result<Value> {
        let w = g.param(&self.store, l.w);
        let b = g.param(&self.store, l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add(y, b)?)
    }

    fn mlp(&self, g: &mut Graph, m: &Mlp, x: Value) -> Result<Value> {
        let h = self.linear(g, &m.hidden, x)?;
        let h = g.relu(h);
        self.linear(g, &m.out, h)
    }

    /// Single-head scaled dot-product attention.
    fn attention(
        &self,
        g: &mut Graph,
        a: &Attention,
        queries: Value,
        keys: Value,
        values: Value,
        bias: Option<Value>,
    ) -> Result<Value> {
        let d = self.cfg.width;
        let wq = g.param(&self.store, a.q);
        let wk = g.param(&self.store, a.k);
        let wv = g.param(&self.store, a.v);
        let wo = g.param(&self.store, a.o);
        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys, wk)?;
        let v = g.matmul(values, wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let mut s = g.scale(s, 1.0 / (d as f64).sqrt());
        if let Some(b) = bias {
            s = g.add(s, b)?;
        }
        let w = g.softmax(s, 1)?;
        let y = g.matmul(w, v)?;
        Ok(g.matmul(y, wo)?)
    }

    /// `[n, cells]` log-Gaussian centred on each reference box, deviation half
    /// its size but at least half a cell.
    fn attention_prior(&self, g: &mut Graph, reference: Value, centers: &[(f64, f64)]) -> Result<Value> {
        let floor = 0.5 / self.cfg.grid as f64;
        let r = g.data(reference);
        let n = r.len() / 4;
        let mut out = Vec::with_capacity(n * centers.len());
        for b in r.chunks(4) {
            let sx = (0.5 * b[2]).max(floor);
            let sy = (0.5 * b[3]).max(floor);
            for &(x, y) in centers {
                let dx = (x - b[0]) / sx;
                let dy = (y - b[1]) / sy;
                out.push(-0.5 * (dx * dx + dy * dy));
            }
        }
        Ok(g.constant(&[n, centers.len()], out)?)
    }
}

/// Each cell's features followed by its 8 neighbours' (zero outside the
/// grid), row-major over the 3x3 window: a fixed 3x3 convolution input.
fn neighbourhoods(scene: &Scene) -> Vec<f64> {
    let (f, dim) = (scene.grid as isize, scene.dim);
    let mut out = Vec::with_capacity(scene.num_cells() * 9 * dim);
    for r in 0..f {
        for c in 0..f {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    if (0..f).contains(&rr) && (0..f).contains(&cc) {
                        out.extend_from_slice(scene.cell((rr * f + cc) as usize));
                    } else {
                        out.extend(std::iter::repeat(0.0).take(dim));
                    }
                }
            }
        }
    }
    out
}

fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-5, 1.0 - 1e-5);
    (x / (1.0 - x)).ln()
}

fn layer_norm(g: &mut Graph, x: Value) -> Result<Value> {
    Ok(g.layer_norm(x, 1e-5)?)
}
