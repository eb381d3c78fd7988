//! Reverse-mode tape over `Tensor2`.
//!
//! Values are computed eagerly as nodes are appended, so the tape order is
//! already topological; `backward` walks it once in reverse. The op set is
//! exactly what the synthesis model and frame classifier need — this is not
//! a general autodiff engine.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Constant or parameter input. `param` ties the node to a `ParamStore`
    /// entry so `accumulate_grads` knows where gradients go.
    Leaf { param: Option<String> },
    /// x * W + broadcast bias b (b is 1 x cols).
    Affine { x: NodeId, w: NodeId, b: NodeId },
    MatMul { a: NodeId, b: NodeId },
    /// a * b^T
    MatMulNT { a: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// Row-wise softmax.
    SoftmaxRows { x: NodeId },
    /// sum_k weights[0,k] * layers[k]; weights is 1 x K.
    WeightedSum { weights: NodeId, layers: Vec<NodeId> },
    /// Mean over each contiguous row segment; seg_lens sums to x.rows.
    SegmentMean { x: NodeId, seg_lens: Vec<usize> },
    /// Repeat row i reps[i] times (length regulator).
    RepeatRows { x: NodeId, reps: Vec<usize> },
    /// out[r] = x[idx[r]] (embedding lookup / row reordering).
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// Row-wise selection between two same-shape inputs.
    MixRows { a: NodeId, b: NodeId, from_a: Vec<bool> },
    /// Vertical stack.
    ConcatRows { parts: Vec<NodeId> },
    /// Masked mean squared error against a constant target; scalar output.
    MaskedMse {
        pred: NodeId,
        target: Tensor2,
        mask: Vec<f64>,
    },
    /// Mean masked softmax cross-entropy against integer targets; scalar.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<f64>,
    },
}

struct Node {
    value: Tensor2,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor2, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    pub fn leaf(&mut self, t: Tensor2) -> NodeId {
        self.push(t, Op::Leaf { param: None })
    }

    /// Leaf tied to a named parameter; the current value is copied in.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let t = store.value(name)?.clone();
        Ok(self.push(
            t,
            Op::Leaf {
                param: Some(name.to_string()),
            },
        ))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.value(x).shape();
        let (wr, wc) = self.value(w).shape();
        let (br, bc) = self.value(b).shape();
        if xc != wr {
            return Err(Error::dimension("affine", format!("{xr}x{xc}"), format!("{wr}x{wc}")));
        }
        if br != 1 || bc != wc {
            return Err(Error::dimension("affine bias", format!("1x{wc}"), format!("{br}x{bc}")));
        }
        let mut out = self.value(x).matmul(self.value(w))?;
        let bias = self.value(b).row(0).to_vec();
        for i in 0..out.rows() {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNT { a, b }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dimension(
                "add",
                format!("{:?}", self.value(a).shape()),
                format!("{:?}", self.value(b).shape()),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), 1.0)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut out = self.value(x).clone();
        out.scale_in_place(c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let mut out = Tensor2::zeros(v.rows(), v.cols());
        for i in 0..v.rows() {
            let p = crate::tensor::softmax(v.row(i))?;
            out.row_mut(i).copy_from_slice(&p);
        }
        Ok(self.push(out, Op::SoftmaxRows { x }))
    }

    pub fn weighted_sum(&mut self, weights: NodeId, layers: Vec<NodeId>) -> Result<NodeId> {
        let (wr, wc) = self.value(weights).shape();
        if wr != 1 || wc != layers.len() || layers.is_empty() {
            return Err(Error::dimension(
                "weighted_sum",
                format!("1x{}", layers.len()),
                format!("{wr}x{wc}"),
            ));
        }
        let shape = self.value(layers[0]).shape();
        for &l in &layers {
            if self.value(l).shape() != shape {
                return Err(Error::dimension(
                    "weighted_sum layers",
                    format!("{shape:?}"),
                    format!("{:?}", self.value(l).shape()),
                ));
            }
        }
        let mut out = Tensor2::zeros(shape.0, shape.1);
        for (k, &l) in layers.iter().enumerate() {
            let wk = self.value(weights).get(0, k);
            out.add_scaled(self.value(l), wk)?;
        }
        Ok(self.push(out, Op::WeightedSum { weights, layers }))
    }

    pub fn segment_mean(&mut self, x: NodeId, seg_lens: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        let total: usize = seg_lens.iter().sum();
        if total != v.rows() || seg_lens.iter().any(|&l| l == 0) {
            return Err(Error::Alignment(format!(
                "segment lengths {seg_lens:?} do not tile {} frames",
                v.rows()
            )));
        }
        let mut out = Tensor2::zeros(seg_lens.len(), v.cols());
        let mut r = 0;
        for (s, &len) in seg_lens.iter().enumerate() {
            for _ in 0..len {
                let row = v.row(r).to_vec();
                for (o, x) in out.row_mut(s).iter_mut().zip(&row) {
                    *o += x / len as f64;
                }
                r += 1;
            }
        }
        Ok(self.push(out, Op::SegmentMean { x, seg_lens }))
    }

    pub fn repeat_rows(&mut self, x: NodeId, reps: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if reps.len() != v.rows() {
            return Err(Error::dimension("repeat_rows", v.rows(), reps.len()));
        }
        if reps.iter().any(|&r| r == 0) {
            return Err(Error::Duration("repeat count of zero".into()));
        }
        let total: usize = reps.iter().sum();
        let mut out = Tensor2::zeros(total, v.cols());
        let mut r = 0;
        for (i, &n) in reps.iter().enumerate() {
            for _ in 0..n {
                out.row_mut(r).copy_from_slice(v.row(i));
                r += 1;
            }
        }
        Ok(self.push(out, Op::RepeatRows { x, reps }))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Argument(format!(
                "gather index {bad} out of range for {} rows",
                v.rows()
            )));
        }
        let mut out = Tensor2::zeros(idx.len(), v.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(v.row(i));
        }
        Ok(self.push(out, Op::GatherRows { x, idx }))
    }

    pub fn mix_rows(&mut self, a: NodeId, b: NodeId, from_a: Vec<bool>) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        if self.value(b).shape() != (ar, ac) || from_a.len() != ar {
            return Err(Error::Alignment(format!(
                "mix_rows: a {:?}, b {:?}, plan len {}",
                self.value(a).shape(),
                self.value(b).shape(),
                from_a.len()
            )));
        }
        let mut out = Tensor2::zeros(ar, ac);
        for (r, &take_a) in from_a.iter().enumerate() {
            let src = if take_a { self.value(a) } else { self.value(b) };
            let row = src.row(r).to_vec();
            out.row_mut(r).copy_from_slice(&row);
        }
        Ok(self.push(out, Op::MixRows { a, b, from_a }))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Argument("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = Vec::new();
        for &p in &parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dimension("concat_rows", cols, v.cols()));
            }
            for i in 0..v.rows() {
                rows.push(v.row(i).to_vec());
            }
        }
        let out = Tensor2::from_rows(&rows)?;
        Ok(self.push(out, Op::ConcatRows { parts }))
    }

    /// Mean squared error over rows with mask 1, averaged over kept rows and
    /// all columns. All-zero mask yields 0 (and a zero gradient), not NaN.
    pub fn masked_mse(&mut self, pred: NodeId, target: Tensor2, mask: Vec<f64>) -> Result<NodeId> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dimension(
                "masked_mse",
                format!("{:?}", p.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        if mask.len() != p.rows() {
            return Err(Error::dimension("masked_mse mask", p.rows(), mask.len()));
        }
        let kept: f64 = mask.iter().sum();
        let mut loss = 0.0;
        if kept > 0.0 {
            let denom = kept * p.cols() as f64;
            for i in 0..p.rows() {
                if mask[i] == 0.0 {
                    continue;
                }
                loss += mask[i] * Tensor2::sq_dist(p.row(i), target.row(i)) / denom;
            }
        }
        let out = Tensor2::new(1, 1, vec![loss])?;
        Ok(self.push(out, Op::MaskedMse { pred, target, mask }))
    }

    /// Softmax cross-entropy with integer class targets, mean over rows with
    /// mask 1. All-zero mask yields 0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>, mask: Vec<f64>) -> Result<NodeId> {
        let l = self.value(logits);
        if targets.len() != l.rows() || mask.len() != l.rows() {
            return Err(Error::dimension("cross_entropy", l.rows(), targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
            return Err(Error::Argument(format!(
                "class target {bad} out of range for {} classes",
                l.cols()
            )));
        }
        let kept: f64 = mask.iter().sum();
        let mut loss = 0.0;
        if kept > 0.0 {
            for i in 0..l.rows() {
                if mask[i] == 0.0 {
                    continue;
                }
                let row = l.row(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let logsum = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
                loss += mask[i] * (logsum - row[targets[i]]) / kept;
            }
        }
        let out = Tensor2::new(1, 1, vec![loss])?;
        Ok(self.push(out, Op::CrossEntropy { logits, targets, mask }))
    }

    /// Reverse pass from a scalar node; returns one gradient slot per node.
    /// Plain constant leaves are skipped (their gradients are never read).
    pub fn backward(&self, loss: NodeId) -> Result<Vec<Option<Tensor2>>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Argument("backward from a non-scalar node".into()));
        }
        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::new(1, 1, vec![1.0])?);

        // Seeding a gradient allocates lazily; constant leaves are skipped.
        fn needs_grad(nodes: &[Node], id: usize) -> bool {
            !matches!(nodes[id].op, Op::Leaf { param: None })
        }

        macro_rules! accum {
            ($grads:ident, $self:ident, $id:expr, $delta:expr) => {{
                let id: NodeId = $id;
                if needs_grad(&$self.nodes, id.0) {
                    let slot = &mut $grads[id.0];
                    match slot {
                        Some(g) => g.add_scaled(&$delta, 1.0)?,
                        None => *slot = Some($delta),
                    }
                }
            }};
        }

        for i in (0..self.nodes.len()).rev() {
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {
                    // Terminal; restore the gradient for later extraction.
                    grads[i] = Some(dy);
                    continue;
                }
                Op::Affine { x, w, b } => {
                    let dx = dy.matmul_nt(self.value(*w))?;
                    let dw = self.value(*x).matmul_tn(&dy)?;
                    let mut db = Tensor2::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (o, v) in db.row_mut(0).iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                    accum!(grads, self, *x, dx);
                    accum!(grads, self, *w, dw);
                    accum!(grads, self, *b, db);
                }
                Op::MatMul { a, b } => {
                    let da = dy.matmul_nt(self.value(*b))?;
                    let db = self.value(*a).matmul_tn(&dy)?;
                    accum!(grads, self, *a, da);
                    accum!(grads, self, *b, db);
                }
                Op::MatMulNT { a, b } => {
                    // y = a b^T; da = dy b; db = dy^T a
                    let da = dy.matmul(self.value(*b))?;
                    let db = dy.matmul_tn(self.value(*a))?;
                    accum!(grads, self, *a, da);
                    accum!(grads, self, *b, db);
                }
                Op::Tanh { x } => {
                    let y = &self.nodes[i].value;
                    let mut dx = dy.clone();
                    for (g, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
                        *g *= 1.0 - yv * yv;
                    }
                    accum!(grads, self, *x, dx);
                }
                Op::Add { a, b } => {
                    accum!(grads, self, *a, dy.clone());
                    accum!(grads, self, *b, dy);
                }
                Op::Scale { x, c } => {
                    let mut dx = dy;
                    dx.scale_in_place(*c);
                    accum!(grads, self, *x, dx);
                }
                Op::SoftmaxRows { x } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Tensor2::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = dy.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum!(grads, self, *x, dx);
                }
                Op::WeightedSum { weights, layers } => {
                    let mut dw = Tensor2::zeros(1, layers.len());
                    for (k, &l) in layers.iter().enumerate() {
                        let lv = self.value(l);
                        let dot: f64 = lv.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
                        dw.set(0, k, dot);
                        if needs_grad(&self.nodes, l.0) {
                            let wk = self.value(*weights).get(0, k);
                            let mut dl = dy.clone();
                            dl.scale_in_place(wk);
                            accum!(grads, self, l, dl);
                        }
                    }
                    accum!(grads, self, *weights, dw);
                }
                Op::SegmentMean { x, seg_lens } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let mut r = 0;
                    for (s, &len) in seg_lens.iter().enumerate() {
                        let g = dy.row(s).to_vec();
                        for _ in 0..len {
                            for (o, gv) in dx.row_mut(r).iter_mut().zip(&g) {
                                *o += gv / len as f64;
                            }
                            r += 1;
                        }
                    }
                    accum!(grads, self, *x, dx);
                }
                Op::RepeatRows { x, reps } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    let mut r = 0;
                    for (i2, &n) in reps.iter().enumerate() {
                        for _ in 0..n {
                            let g = dy.row(r).to_vec();
                            for (o, gv) in dx.row_mut(i2).iter_mut().zip(&g) {
                                *o += gv;
                            }
                            r += 1;
                        }
                    }
                    accum!(grads, self, *x, dx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = self.value(*x);
                    let mut dx = Tensor2::zeros(xv.rows(), xv.cols());
                    for (r, &i2) in idx.iter().enumerate() {
                        let g = dy.row(r).to_vec();
                        for (o, gv) in dx.row_mut(i2).iter_mut().zip(&g) {
                            *o += gv;
                        }
                    }
                    accum!(grads, self, *x, dx);
                }
                Op::MixRows { a, b, from_a } => {
                    let shape = self.value(*a).shape();
                    let mut da = Tensor2::zeros(shape.0, shape.1);
                    let mut db = Tensor2::zeros(shape.0, shape.1);
                    for (r, &take_a) in from_a.iter().enumerate() {
                        let tgt = if take_a { &mut da } else { &mut db };
                        tgt.row_mut(r).copy_from_slice(dy.row(r));
                    }
                    accum!(grads, self, *a, da);
                    accum!(grads, self, *b, db);
                }
                Op::ConcatRows { parts } => {
                    let mut r = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        let mut dp = Tensor2::zeros(n, dy.cols());
                        for k in 0..n {
                            dp.row_mut(k).copy_from_slice(dy.row(r + k));
                        }
                        r += n;
                        accum!(grads, self, p, dp);
                    }
                }
                Op::MaskedMse { pred, target, mask } => {
                    let scale = dy.get(0, 0);
                    let pv = self.value(*pred);
                    let kept: f64 = mask.iter().sum();
                    let mut dp = Tensor2::zeros(pv.rows(), pv.cols());
                    if kept > 0.0 {
                        let denom = kept * pv.cols() as f64;
                        for r in 0..pv.rows() {
                            if mask[r] == 0.0 {
                                continue;
                            }
                            let coef = scale * mask[r] * 2.0 / denom;
                            for ((o, &p), &t) in
                                dp.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r))
                            {
                                *o = coef * (p - t);
                            }
                        }
                    }
                    accum!(grads, self, *pred, dp);
                }
                Op::CrossEntropy { logits, targets, mask } => {
                    let scale = dy.get(0, 0);
                    let lv = self.value(*logits);
                    let kept: f64 = mask.iter().sum();
                    let mut dl = Tensor2::zeros(lv.rows(), lv.cols());
                    if kept > 0.0 {
                        for r in 0..lv.rows() {
                            if mask[r] == 0.0 {
                                continue;
                            }
                            let p = crate::tensor::softmax(lv.row(r))?;
                            let coef = scale * mask[r] / kept;
                            for (j, (o, pj)) in dl.row_mut(r).iter_mut().zip(p).enumerate() {
                                let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                                *o = coef * (pj - onehot);
                            }
                        }
                    }
                    accum!(grads, self, *logits, dl);
                }
            }
        }
        Ok(grads)
    }

    /// Run backward and add parameter-tied leaf gradients into the store.
    /// Returns the loss value.
    pub fn accumulate_grads(&self, loss: NodeId, store: &mut ParamStore) -> Result<f64> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(name) } = &node.op {
                if let Some(g) = &grads[i] {
                    store.accumulate(name, g)?;
                }
            }
        }
        Ok(self.scalar(loss))
    }
}
