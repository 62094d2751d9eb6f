//! Boxes in normalized center-size form and the IoU / GIoU family.

use crate::autodiff::{Graph, Result, Value};

/// Axis-aligned box, center-size form, normalized to the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// From corner form `(x1, y1, x2, y2)`.
    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: 0.5 * (x1 + x2),
            cy: 0.5 * (y1 + y2),
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.w >= 0.0 && self.h >= 0.0 && [self.cx, self.cy, self.w, self.h].iter().all(|x| x.is_finite())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self::new(s[0], s[1], s[2], s[3])
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }
}

/// IoU and GIoU of one pair. `degenerate` is set when both boxes have zero
/// area, in which case both scores are reported as 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub giou: f64,
    pub degenerate: bool,
}

pub fn overlap(a: &BBox, b: &BBox) -> Overlap {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0);
    let area_b = (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return Overlap {
            iou: 0.0,
            giou: 0.0,
            degenerate: true,
        };
    }
    let iou = inter / union;
    let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
    let giou = if enclosing > 0.0 {
        iou - (enclosing - union) / enclosing
    } else {
        iou
    };
    Overlap {
        iou,
        giou,
        degenerate: false,
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    overlap(a, b).iou
}

pub fn giou(a: &BBox, b: &BBox) -> f64 {
    overlap(a, b).giou
}

/// Sum of absolute differences over `(cx, cy, w, h)`.
pub fn l1_box(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).abs() + (a.cy - b.cy).abs() + (a.w - b.w).abs() + (a.h - b.h).abs()
}

/// Differentiable row-wise IoU and GIoU between two `[k, 4]` center-size box
/// tensors. Returns `[k]` values `(iou, giou)`.
pub fn iou_giou_rows(g: &mut Graph, a: Value, b: Value) -> Result<(Value, Value)> {
    let k = g.shape(a)[0];
    let ca = corner_cols(g, a)?;
    let cb = corner_cols(g, b)?;
    let x2 = g.minimum(ca[2], cb[2])?;
    let x1 = g.maximum(ca[0], cb[0])?;
    let y2 = g.minimum(ca[3], cb[3])?;
    let y1 = g.maximum(ca[1], cb[1])?;
    let iw = g.sub(x2, x1)?;
    let iw = g.relu(iw);
    let ih = g.sub(y2, y1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area_a = corner_area(g, &ca)?;
    let area_b = corner_area(g, &cb)?;
    let union = g.add(area_a, area_b)?;
    let union = g.sub(union, inter)?;
    let union = g.max_const(union, f64::MIN_POSITIVE);
    let iou = g.div(inter, union)?;

    let ex2 = g.maximum(ca[2], cb[2])?;
    let ex1 = g.minimum(ca[0], cb[0])?;
    let ey2 = g.maximum(ca[3], cb[3])?;
    let ey1 = g.minimum(ca[1], cb[1])?;
    let ew = g.sub(ex2, ex1)?;
    let eh = g.sub(ey2, ey1)?;
    let enclosing = g.mul(ew, eh)?;
    let enclosing = g.max_const(enclosing, f64::MIN_POSITIVE);
    let gap = g.sub(enclosing, union)?;
    let penalty = g.div(gap, enclosing)?;
    let giou = g.sub(iou, penalty)?;
    let iou = g.reshape(iou, &[k])?;
    let giou = g.reshape(giou, &[k])?;
    Ok((iou, giou))
}

/// Differentiable row-wise L1 distance between `[k, 4]` box tensors, `[k]`.
pub fn l1_rows(g: &mut Graph, a: Value, b: Value) -> Result<Value> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    g.sum_rows(d)
}

fn corner_area(g: &mut Graph, c: &[Value; 4]) -> Result<Value> {
    let w = g.sub(c[2], c[0])?;
    let h = g.sub(c[3], c[1])?;
    let w = g.relu(w);
    let h = g.relu(h);
    g.mul(w, h)
}

fn corner_cols(g: &mut Graph, a: Value) -> Result<[Value; 4]> {
    let cx = g.slice_cols(a, 0, 1)?;
    let cy = g.slice_cols(a, 1, 1)?;
    let w = g.slice_cols(a, 2, 1)?;
    let h = g.slice_cols(a, 3, 1)?;
    let hw = g.scale(w, 0.5);
    let hh = g.scale(h, 0.5);
    Ok([g.sub(cx, hw)?, g.sub(cy, hh)?, g.add(cx, hw)?, g.add(cy, hh)?])
}

/// Flattens boxes into a `[n, 4]` row-major buffer.
pub fn boxes_to_rows(boxes: &[BBox]) -> Vec<f64> {
    boxes.iter().flat_map(|b| b.to_array()).collect()
}

pub fn rows_to_boxes(data: &[f64]) -> Vec<BBox> {
    data.chunks_exact(4).map(BBox::from_slice).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::max_grad_error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = c(0.1, 0.2, 0.5, 0.6);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&c(0., 0., 1., 1.), &c(2., 0., 3., 1.)), 0.0);
        // inter = 1, union = 7
        assert!((iou(&c(0., 0., 2., 2.), &c(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn giou_examples() {
        let a = c(0.1, 0.2, 0.5, 0.6);
        assert_eq!(giou(&a, &a), 1.0);
        // C = 3, U = 2
        assert!((giou(&c(0., 0., 1., 1.), &c(2., 0., 3., 1.)) + 1.0 / 3.0).abs() < 1e-15);
        // 1/7 - (9 - 7)/9
        assert!((giou(&c(0., 0., 2., 2.), &c(1., 1., 3., 3.)) + 5.0 / 63.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_pairs() {
        let p = BBox::new(0.3, 0.3, 0.0, 0.0);
        let o = overlap(&p, &p);
        assert!(o.degenerate);
        assert_eq!(o.iou, 0.0);
        // zero-area prediction against a real box: IoU 0, GIoU still penalised
        let gt = BBox::new(0.7, 0.7, 0.2, 0.2);
        let o = overlap(&p, &gt);
        assert!(!o.degenerate);
        assert_eq!(o.iou, 0.0);
        assert!(o.giou < -0.5);
    }

    #[test]
    fn l1_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(l1_box(&a, &a), 0.0);
        let b = BBox::new(0.6, 0.5, 0.2, 0.2);
        assert!((l1_box(&a, &b) - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let r = |rng: &mut ChaCha8Rng| BBox::new(rng.gen(), rng.gen(), rng.gen(), rng.gen());
            let (a, b) = (r(&mut rng), r(&mut rng));
            assert_eq!(l1_box(&a, &b), l1_box(&b, &a));
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..1.0f64, 0.0..1.0f64, 0.0..0.8f64, 0.0..0.8f64).prop_map(|(a, b, c, d)| BBox::new(a, b, c, d))
    }

    proptest! {
        #[test]
        fn corner_round_trip(b in arb_box()) {
            let [x1, y1, x2, y2] = b.corners();
            prop_assert!(x1 <= x2 && y1 <= y2);
            let r = BBox::from_corners(x1, y1, x2, y2);
            for (u, v) in r.to_array().iter().zip(b.to_array()) {
                prop_assert!((u - v).abs() < 1e-12);
            }
        }

        #[test]
        fn giou_bounded_by_iou(a in arb_box(), b in arb_box()) {
            let o = overlap(&a, &b);
            prop_assert!(o.giou <= o.iou + 1e-15);
            prop_assert!(o.giou > -1.0 && o.giou <= 1.0);
            prop_assert!((0.0..=1.0).contains(&o.iou));
            let t = (o.giou + 1.0) / 2.0;
            prop_assert!(t > 0.0 && t <= 1.0);
            if !o.degenerate {
                let [ax1, ay1, ax2, ay2] = a.corners();
                let [bx1, by1, bx2, by2] = b.corners();
                let enclosing = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
                let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
                let union = a.area() + b.area() - inter;
                let equal = (enclosing - union).abs() < 1e-12;
                prop_assert_eq!(equal, (o.iou - o.giou).abs() < 1e-12);
            }
        }

        #[test]
        fn symmetric_and_translation_invariant(a in arb_box(), b in arb_box(), dx in -1.0..1.0f64, dy in -1.0..1.0f64) {
            let o1 = overlap(&a, &b);
            let o2 = overlap(&b, &a);
            prop_assert!((o1.iou - o2.iou).abs() < 1e-12 && (o1.giou - o2.giou).abs() < 1e-12);
            let o3 = overlap(&a.translated(dx, dy), &b.translated(dx, dy));
            prop_assert!((o1.iou - o3.iou).abs() < 1e-9 && (o1.giou - o3.giou).abs() < 1e-9);
        }
    }

    fn random_pairs(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>) {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..k {
            a.extend([rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)]);
            b.extend([rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5)]);
        }
        (a, b)
    }

    fn near_kink(a: &[f64], b: &[f64]) -> bool {
        let (ba, bb) = (BBox::from_slice(a), BBox::from_slice(b));
        let (ca, cb) = (ba.corners(), bb.corners());
        let mut edges = vec![];
        for i in 0..4 {
            for j in 0..4 {
                if i % 2 == j % 2 {
                    edges.push((ca[i] - cb[j]).abs());
                }
            }
        }
        edges.into_iter().any(|e| e < 1e-3)
    }

    #[test]
    fn differentiable_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = random_pairs(&mut rng, 200);
        let mut g = Graph::new();
        let av = g.constant(&[200, 4], a.clone()).unwrap();
        let bv = g.constant(&[200, 4], b.clone()).unwrap();
        let (i, gi) = iou_giou_rows(&mut g, av, bv).unwrap();
        let l = l1_rows(&mut g, av, bv).unwrap();
        for k in 0..200 {
            let (x, y) = (BBox::from_slice(&a[4 * k..]), BBox::from_slice(&b[4 * k..]));
            assert!((g.data(i)[k] - iou(&x, &y)).abs() < 1e-12);
            assert!((g.data(gi)[k] - giou(&x, &y)).abs() < 1e-12);
            assert!((g.data(l)[k] - l1_box(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn differentiable_giou_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 100 {
            let (a, b) = random_pairs(&mut rng, 1);
            if near_kink(&a, &b) {
                continue;
            }
            checked += 1;
            let inputs = vec![(vec![1, 4], a), (vec![1, 4], b)];
            let err = max_grad_error(&inputs, 1e-6, 1e-4, |g, v| {
                let (i, gi) = iou_giou_rows(g, v[0], v[1])?;
                let l = l1_rows(g, v[0], v[1])?;
                let s = g.add(i, gi)?;
                let s = g.add(s, l)?;
                Ok(g.sum(s))
            });
            assert!(err < 1e-4, "{err}");
        }
    }
}
