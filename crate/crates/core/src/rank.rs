//! Rank-oriented mechanisms: the rank-adaptive classification head, the query
//! rank layer that re-sorts and fuses queries between decoder layers, the box
//! sine encoding and top-k selection.

use crate::autodiff::{Graph, Value};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::query::QueryState;

/// How the positional queries of layer `l` are obtained from layer `l - 1`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum PositionalVariant {
    /// Carry the previous positional queries (permuted when ranking).
    #[default]
    Sort,
    /// Re-encode the previous layer's boxes.
    Recreate,
}

impl PositionalVariant {
    pub fn as_str(&self) -> &'static str {
        match self {
            PositionalVariant::Sort => "sort",
            PositionalVariant::Recreate => "recreate",
        }
    }
}

impl std::str::FromStr for PositionalVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sort" => Ok(Self::Sort),
            "recreate" => Ok(Self::Recreate),
            other => Err(format!("unknown positional variant `{other}` (expected sort|recreate)")),
        }
    }
}

/// `sigmoid(logits + bias)`; without a bias this is the plain sigmoid head.
/// The bias is indexed by row, i.e. by rank position once rows are sorted.
pub fn rank_adaptive_head(g: &mut Graph, logits: Value, bias: Option<Value>) -> Result<Value> {
    let Some(bias) = bias else {
        return Ok(g.sigmoid(logits));
    };
    if g.shape(bias) != g.shape(logits) {
        return Err(crate::autodiff::TensorError::Shape {
            op: "rank_adaptive_head",
            lhs: g.shape(logits).to_vec(),
            rhs: g.shape(bias).to_vec(),
        }
        .into());
    }
    let z = g.add(logits, bias)?;
    Ok(g.sigmoid(z))
}

/// Per-row maximum of a row-major `[n, k]` probability matrix and the stable
/// descending order of those maxima.
pub fn ranking_basis(probs: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let scores: Vec<f64> = probs
        .chunks(k.max(1))
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut perm: Vec<usize> = (0..scores.len()).collect();
    // sort_by is stable, so equal scores keep their original order
    perm.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    (scores, perm)
}

/// Raw sine encoding of `[n, 4]` boxes to width `d`: each coordinate gets
/// `d / 4` channels alternating sin/cos at frequencies `2π / 10000^(2i / (d/4))`.
pub fn sine_pe_raw(g: &mut Graph, boxes: Value, d: usize) -> Result<Value> {
    if d == 0 || d % 8 != 0 {
        return Err(Error::Validation(format!("encoding width must be a positive multiple of 8, got {d}")));
    }
    let shape = g.shape(boxes).to_vec();
    if shape.len() != 2 || shape[1] != 4 {
        return Err(Error::Contract(format!("sine encoding expects [n, 4] boxes, got {shape:?}")));
    }
    let per = d / 4;
    // freq[c, c * per + j] places coordinate c's frequencies in its block
    let mut freq = vec![0.0; 4 * d];
    for c in 0..4 {
        for j in 0..per {
            let e = 2.0 * (j / 2) as f64 / per as f64;
            freq[c * d + c * per + j] = 2.0 * std::f64::consts::PI / 10000f64.powf(e);
        }
    }
    let freq = g.constant(&[4, d], freq)?;
    let arg = g.matmul(boxes, freq)?;
    let even = g.constant(&[d], (0..d).map(|j| ((j + 1) % 2) as f64).collect())?;
    let odd = g.constant(&[d], (0..d).map(|j| (j % 2) as f64).collect())?;
    let s = g.sin(arg);
    let c = g.cos(arg);
    let s = g.mul(s, even)?;
    let c = g.mul(c, odd)?;
    Ok(g.add(s, c)?)
}

/// Two-layer perceptron applied after the raw sine encoding.
#[derive(Clone, Copy, Debug)]
pub struct PeMlp {
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

pub fn sine_pe(g: &mut Graph, boxes: Value, mlp: &PeMlp) -> Result<Value> {
    let d = g.shape(mlp.w1)[0];
    let raw = sine_pe_raw(g, boxes, d)?;
    let h = g.matmul(raw, mlp.w1)?;
    let h = g.add(h, mlp.b1)?;
    let h = g.relu(h);
    let h = g.matmul(h, mlp.w2)?;
    Ok(g.add(h, mlp.b2)?)
}

/// Rank content `C^l` and the linear fuse `2d -> d` of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct FuseParams {
    pub rank_content: Value,
    pub weight: Value,
    pub bias: Value,
}

/// Inputs of decoder layer `prev.layer + 1` after ranking.
#[derive(Clone, Debug)]
pub struct RankedInputs {
    pub content: Value,
    pub positional: Value,
    /// Reference boxes, permuted like the queries.
    pub boxes: Value,
    /// Original query slot of every row.
    pub order: Vec<usize>,
    /// Permutation applied to the previous rows.
    pub perm: Vec<usize>,
}

/// Sorts the previous layer's queries by their maximum probability and fuses
/// the sorted content with the rank-indexed content embedding.
pub fn rank_and_fuse(
    g: &mut Graph,
    prev: &QueryState,
    fuse: &FuseParams,
    variant: PositionalVariant,
    pe: &PeMlp,
) -> Result<RankedInputs> {
    if prev.layer == 0 {
        return Err(Error::Contract("the first decoder layer takes the initial queries untouched".into()));
    }
    let k = g.shape(prev.probs)[1];
    let (_, perm) = ranking_basis(g.data(prev.probs), k);
    let content = g.gather_rows(prev.content, &perm)?;
    let boxes = g.gather_rows(prev.boxes, &perm)?;
    let positional = match variant {
        PositionalVariant::Sort => g.gather_rows(prev.positional, &perm)?,
        PositionalVariant::Recreate => sine_pe(g, boxes, pe)?,
    };
    let joined = g.concat(content, fuse.rank_content)?;
    let fused = g.matmul(joined, fuse.weight)?;
    let fused = g.add(fused, fuse.bias)?;
    Ok(RankedInputs {
        content: fused,
        positional,
        boxes,
        order: perm.iter().map(|&i| prev.order[i]).collect(),
        perm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankedDetection {
    pub query: usize,
    pub category: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Top `k` (query, category) pairs by probability, descending, ties by
/// flattened index.
pub fn topk_select(probs: &[f64], num_classes: usize, boxes: &[BBox], k: usize) -> Result<Vec<RankedDetection>> {
    if num_classes == 0 || probs.len() != boxes.len() * num_classes {
        return Err(Error::Contract(format!(
            "{} probabilities do not match {} boxes x {num_classes} classes",
            probs.len(),
            boxes.len()
        )));
    }
    if k > probs.len() {
        return Err(Error::Validation(format!("k = {k} exceeds the {} available pairs", probs.len())));
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    Ok(idx
        .into_iter()
        .take(k)
        .map(|e| RankedDetection {
            query: e / num_classes,
            category: e % num_classes,
            score: probs[e],
            bbox: boxes[e / num_classes],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::max_grad_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn head_examples() {
        let mut g = Graph::new();
        let t = g.constant(&[1, 2], vec![0.0, -1.0]).unwrap();
        let s = g.constant(&[1, 2], vec![2.0, 0.0]).unwrap();
        let p = rank_adaptive_head(&mut g, t, Some(s)).unwrap();
        assert!((g.data(p)[0] - 0.8807970779778823).abs() < 1e-12);
        let zero = g.constant(&[1, 2], vec![0.0; 2]).unwrap();
        let p0 = rank_adaptive_head(&mut g, t, Some(zero)).unwrap();
        let plain = rank_adaptive_head(&mut g, t, None).unwrap();
        assert_eq!(g.data(p0), g.data(plain));
        let bad = g.constant(&[2, 1], vec![0.0; 2]).unwrap();
        assert!(rank_adaptive_head(&mut g, t, Some(bad)).is_err());
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let s: Vec<f64> = (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let wts: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = max_grad_error(&[(vec![3, 2], t), (vec![3, 2], s)], 1e-5, 1e-6, |g, v| {
                let p = rank_adaptive_head(g, v[0], Some(v[1])).unwrap();
                let w = g.constant(&[3, 2], wts.clone())?;
                let y = g.mul(p, w)?;
                Ok(g.sum(y))
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn basis_examples() {
        let (s, p) = ranking_basis(&[0.1, 0.9, 0.3, 0.2, 0.5, 0.5], 2);
        assert_eq!(s, vec![0.9, 0.3, 0.5]);
        assert_eq!(p, vec![0, 2, 1]);
        let (_, p) = ranking_basis(&[0.4; 8], 2);
        assert_eq!(p, vec![0, 1, 2, 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let probs: Vec<f64> = (0..300).map(|_| rng.gen()).collect();
        let (s, p) = ranking_basis(&probs, 3);
        assert!(p.windows(2).all(|w| s[w[0]] >= s[w[1]]));
    }

    fn state(g: &mut Graph, rng: &mut ChaCha8Rng, n: usize, d: usize, k: usize) -> QueryState {
        let mut rand = |len: usize| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let content = g.variable(&[n, d], rand(n * d)).unwrap();
        let positional = g.variable(&[n, d], rand(n * d)).unwrap();
        let logits = g.variable(&[n, k], rand(n * k)).unwrap();
        let probs = g.sigmoid(logits);
        let raw = g.variable(&[n, 4], rand(n * 4)).unwrap();
        let boxes = g.sigmoid(raw);
        QueryState {
            layer: 1,
            content,
            positional,
            logits,
            probs,
            boxes,
            order: (0..n).collect(),
        }
    }

    fn identity_fuse(g: &mut Graph, n: usize, d: usize) -> FuseParams {
        let mut w = vec![0.0; 2 * d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        FuseParams {
            rank_content: g.constant(&[n, d], vec![0.0; n * d]).unwrap(),
            weight: g.constant(&[2 * d, d], w).unwrap(),
            bias: g.constant(&[d], vec![0.0; d]).unwrap(),
        }
    }

    fn pe_mlp(g: &mut Graph, rng: &mut ChaCha8Rng, d: usize) -> PeMlp {
        let mut rand = |len: usize| (0..len).map(|_| rng.gen_range(-0.3..0.3)).collect::<Vec<f64>>();
        PeMlp {
            w1: g.constant(&[d, d], rand(d * d)).unwrap(),
            b1: g.constant(&[d], rand(d)).unwrap(),
            w2: g.constant(&[d, d], rand(d * d)).unwrap(),
            b2: g.constant(&[d], rand(d)).unwrap(),
        }
    }

    #[test]
    fn identity_fuse_sorts_content_and_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let (n, d) = (3, 8);
        let mut q = state(&mut g, &mut rng, n, d, 2);
        q.probs = g.constant(&[3, 2], vec![0.1, 0.9, 0.3, 0.2, 0.5, 0.5]).unwrap();
        let fuse = identity_fuse(&mut g, n, d);
        let pe = pe_mlp(&mut g, &mut rng, d);
        let r = rank_and_fuse(&mut g, &q, &fuse, PositionalVariant::Sort, &pe).unwrap();
        assert_eq!(r.perm, vec![0, 2, 1]);
        assert_eq!(r.order, vec![0, 2, 1]);
        let (c0, c1) = (g.data(q.content).to_vec(), g.data(r.content).to_vec());
        let (b0, b1) = (g.data(q.boxes).to_vec(), g.data(r.boxes).to_vec());
        let (p0, p1) = (g.data(q.positional).to_vec(), g.data(r.positional).to_vec());
        for (i, &src) in [0, 2, 1].iter().enumerate() {
            assert_eq!(c1[i * d..(i + 1) * d], c0[src * d..(src + 1) * d]);
            assert_eq!(p1[i * d..(i + 1) * d], p0[src * d..(src + 1) * d]);
            assert_eq!(b1[i * 4..(i + 1) * 4], b0[src * 4..(src + 1) * 4]);
        }

        // recreate re-encodes the sorted boxes
        let r = rank_and_fuse(&mut g, &q, &fuse, PositionalVariant::Recreate, &pe).unwrap();
        let expect = sine_pe(&mut g, r.boxes, &pe).unwrap();
        assert_eq!(g.data(r.positional), g.data(expect));

        let mut first = q.clone();
        first.layer = 0;
        assert!(matches!(
            rank_and_fuse(&mut g, &first, &fuse, PositionalVariant::Sort, &pe),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn sorted_input_gives_identity_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut g = Graph::new();
            let q = state(&mut g, &mut rng, 6, 8, 3);
            let fuse = identity_fuse(&mut g, 6, 8);
            let pe = pe_mlp(&mut g, &mut rng, 8);
            let r = rank_and_fuse(&mut g, &q, &fuse, PositionalVariant::Sort, &pe).unwrap();
            let probs = g.gather_rows(q.probs, &r.perm).unwrap();
            let sorted = QueryState {
                layer: 2,
                content: r.content,
                positional: r.positional,
                logits: probs,
                probs,
                boxes: r.boxes,
                order: r.order.clone(),
            };
            let again = rank_and_fuse(&mut g, &sorted, &fuse, PositionalVariant::Sort, &pe).unwrap();
            assert_eq!(again.perm, (0..6).collect::<Vec<_>>());
            assert_eq!(again.order, r.order);
        }
    }

    #[test]
    fn fuse_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, d, k) = (4, 8, 2);
        for case in 0..100 {
            let variant = if case % 2 == 0 { PositionalVariant::Sort } else { PositionalVariant::Recreate };
            let mut rand = |len: usize, s: f64| (0..len).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
            let probs = rand(n * k, 1.0).iter().map(|x| x.abs()).collect::<Vec<f64>>();
            let pe_w = rand(2 * d * d + 2 * d, 0.3);
            let readout = rand(n * d, 1.0);
            let inputs = vec![
                (vec![n, d], rand(n * d, 1.0)),
                (vec![n, d], rand(n * d, 1.0)),
                (vec![n, 4], rand(n * 4, 1.0)),
                (vec![n, d], rand(n * d, 0.1)),
                (vec![2 * d, d], rand(2 * d * d, 0.5)),
                (vec![d], rand(d, 0.1)),
            ];
            let err = max_grad_error(&inputs, 1e-5, 1e-6, |g, v| {
                let pv = g.constant(&[n, k], probs.clone())?;
                let boxes = g.sigmoid(v[2]);
                let q = QueryState {
                    layer: 1,
                    content: v[0],
                    positional: v[1],
                    logits: pv,
                    probs: pv,
                    boxes,
                    order: (0..n).collect(),
                };
                let pe = PeMlp {
                    w1: g.constant(&[d, d], pe_w[..d * d].to_vec())?,
                    b1: g.constant(&[d], pe_w[d * d..d * d + d].to_vec())?,
                    w2: g.constant(&[d, d], pe_w[d * d + d..2 * d * d + d].to_vec())?,
                    b2: g.constant(&[d], pe_w[2 * d * d + d..].to_vec())?,
                };
                let fuse = FuseParams {
                    rank_content: v[3],
                    weight: v[4],
                    bias: v[5],
                };
                let r = rank_and_fuse(g, &q, &fuse, variant, &pe).unwrap();
                let x = g.add(r.content, r.positional)?;
                let x = g.sin(x);
                let w = g.constant(&[n, d], readout.clone())?;
                let y = g.mul(x, w)?;
                Ok(g.sum(y))
            });
            assert!(err < 1e-4, "{variant:?}: {err}");
        }
    }

    #[test]
    fn pe_examples() {
        let mut g = Graph::new();
        let b = g.constant(&[2, 4], vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let raw = sine_pe_raw(&mut g, b, 16).unwrap();
        let d = g.data(raw).to_vec();
        for (j, x) in d[..16].iter().enumerate() {
            assert_eq!(*x, if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        let dist: f64 = (0..16).map(|j| (d[j] - d[16 + j]).powi(2)).sum::<f64>().sqrt();
        assert!(dist > 0.0);
        let raw2 = sine_pe_raw(&mut g, b, 16).unwrap();
        assert_eq!(g.data(raw), g.data(raw2));
        assert!(matches!(sine_pe_raw(&mut g, b, 12), Err(Error::Validation(_))));
    }

    #[test]
    fn pe_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 8;
        for _ in 0..100 {
            let mut rand = |len: usize, s: f64| (0..len).map(|_| rng.gen_range(-s..s)).collect::<Vec<f64>>();
            let readout = rand(2 * d, 1.0);
            let inputs = vec![
                (vec![2, 4], rand(8, 1.0)),
                (vec![d, d], rand(d * d, 0.5)),
                (vec![d], rand(d, 0.5)),
                (vec![d, d], rand(d * d, 0.5)),
                (vec![d], rand(d, 0.5)),
            ];
            let err = max_grad_error(&inputs, 1e-6, 1e-6, |g, v| {
                let mlp = PeMlp {
                    w1: v[1],
                    b1: v[2],
                    w2: v[3],
                    b2: v[4],
                };
                let e = sine_pe(g, v[0], &mlp).unwrap();
                let w = g.constant(&[2, d], readout.clone())?;
                let y = g.mul(e, w)?;
                Ok(g.sum(y))
            });
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn topk_examples() {
        let boxes = vec![BBox::new(0.5, 0.5, 0.1, 0.1), BBox::new(0.2, 0.2, 0.1, 0.1)];
        let probs = [0.2, 0.7, 0.9, 0.1];
        let all = topk_select(&probs, 2, &boxes, 4).unwrap();
        assert_eq!(all.iter().map(|r| r.score).collect::<Vec<_>>(), vec![0.9, 0.7, 0.2, 0.1]);
        let top = topk_select(&probs, 2, &boxes, 1).unwrap();
        assert_eq!((top[0].query, top[0].category), (1, 0));
        assert_eq!(top[0].bbox, boxes[1]);
        assert!(matches!(topk_select(&probs, 2, &boxes, 5), Err(Error::Validation(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let boxes = vec![BBox::new(0.5, 0.5, 0.1, 0.1); 20];
        let probs: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
        let r = topk_select(&probs, 3, &boxes, 25).unwrap();
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
    }
}
