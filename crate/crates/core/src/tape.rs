//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! Every value on the tape is a 2-D array whose rows are batch items. Image
//! feature maps are stored flattened in channel-major (C, H, W) order and the
//! ops that care about spatial layout carry their geometry explicitly.
//!
//! The tape is single-threaded and evaluates in insertion order, so a given
//! sequence of calls always produces bitwise-identical values and gradients.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

/// Probability floor used by the cross-entropy ops before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Identifies a trainable tensor: the owning parameter set and its slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub owner: u64,
    pub index: usize,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Shape bookkeeping for a 2-D convolution over flattened (C, H, W) rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    /// Weight matrix shape: one row per output channel.
    pub fn weight_shape(&self) -> (usize, usize) {
        (
            self.out_channels,
            self.in_channels * self.kernel * self.kernel,
        )
    }
}

/// One hinge term of a batch-hard triplet loss, recorded for the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinedTriplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub pos_dist: f64,
    pub neg_dist: f64,
    pub active: bool,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    Triplet {
        x: Var,
        mined: Vec<MinedTriplet>,
    },
    GradReverse(Var, f64),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    RowPool {
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
        rows: (usize, usize),
    },
    ConcatCols(Var, Var),
    MeanAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamKey>,
}

/// Batch statistics observed by a training-mode batch-norm op.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    /// Biased (population) variance of the batch.
    pub var: Array1<f64>,
}

/// Error raised by tape ops whose inputs violate a shape or sampling contract.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("triplet anchor {anchor} has no {missing} in the batch (sampler must provide >=2 instances per label and >=2 labels)")]
    TripletSampler {
        anchor: usize,
        missing: &'static str,
    },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    /// Input that gradients may still be requested for (see [`Gradients::wrt`]).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, key: ParamKey, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Param);
        self.nodes[v.0].param = Some(key);
        v
    }

    /// Copies `v` into a fresh leaf; nothing flows back into `v` through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    fn check(op: &'static str, ok: bool, detail: impl FnOnce() -> String) -> Result<(), TapeError> {
        if ok {
            Ok(())
        } else {
            Err(TapeError::Shape {
                op,
                detail: detail(),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        Self::check("matmul", av.ncols() == bv.nrows(), || {
            format!("{:?} x {:?}", av.dim(), bv.dim())
        })?;
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a 1×m bias row to every row of an n×m matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(bias));
        Self::check(
            "add_bias",
            bv.nrows() == 1 && bv.ncols() == av.ncols(),
            || format!("{:?} + {:?}", av.dim(), bv.dim()),
        )?;
        let out = av + bv;
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        Self::check("add", av.dim() == bv.dim(), || {
            format!("{:?} + {:?}", av.dim(), bv.dim())
        })?;
        let out = av + bv;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    /// Training-mode batch normalization over the batch axis.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TapeError> {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        Self::check("batch_norm", n > 0, || "empty batch".into())?;
        Self::check(
            "batch_norm",
            self.value(gamma).dim() == (1, m) && self.value(beta).dim() == (1, m),
            || format!("x {:?}, gamma {:?}", xv.dim(), self.value(gamma).dim()),
        )?;
        let mean = xv.mean_axis(Axis(0)).expect("non-empty");
        let centered = xv - &mean;
        let var = centered
            .mapv(|c| c * c)
            .mean_axis(Axis(0))
            .expect("non-empty");
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = &centered * &inv_std;
        let out = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, stats))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Result<Var, TapeError> {
        let xv = self.value(x);
        let m = xv.ncols();
        Self::check(
            "normalize",
            mean.len() == m && var.len() == m && self.value(gamma).dim() == (1, m),
            || format!("x {:?}, stats {}", xv.dim(), mean.len()),
        )?;
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - mean) * &inv_std;
        let out = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        Ok(self.push(
            out,
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, logits: Var) -> Var {
        let out = softmax_rows(self.value(logits));
        self.push(out, Op::Softmax(logits))
    }

    /// Mean over rows of `-ln(max(p[label], PROB_FLOOR))`; returns a 1×1 node.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var, TapeError> {
        let pv = self.value(probs);
        Self::check(
            "cross_entropy",
            pv.nrows() == labels.len() && !labels.is_empty(),
            || format!("{} rows vs {} labels", pv.nrows(), labels.len()),
        )?;
        Self::check(
            "cross_entropy",
            labels.iter().all(|&l| l < pv.ncols()),
            || format!("label out of range for {} classes", pv.ncols()),
        )?;
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pv[[i, l]].max(PROB_FLOOR).ln())
            .sum();
        let out = Array2::from_elem((1, 1), total / labels.len() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Batch-hard triplet loss with Euclidean distances; returns a 1×1 node.
    pub fn triplet_batch_hard(
        &mut self,
        x: Var,
        labels: &[usize],
        margin: f64,
    ) -> Result<Var, TapeError> {
        let xv = self.value(x);
        Self::check(
            "triplet",
            xv.nrows() == labels.len() && !labels.is_empty(),
            || format!("{} rows vs {} labels", xv.nrows(), labels.len()),
        )?;
        let mined = mine_batch_hard(xv, labels, margin)?;
        let total: f64 = mined
            .iter()
            .map(|t| (t.pos_dist + margin - t.neg_dist).max(0.0))
            .sum();
        let out = Array2::from_elem((1, 1), total / mined.len() as f64);
        Ok(self.push(out, Op::Triplet { x, mined }))
    }

    /// Identity forward; the backward pass multiplies incoming gradients by `-factor`.
    pub fn grad_reverse(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::GradReverse(a, factor))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var, TapeError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        Self::check("conv2d", xv.ncols() == geom.in_len(), || {
            format!(
                "input row length {} vs geometry {}",
                xv.ncols(),
                geom.in_len()
            )
        })?;
        Self::check("conv2d", wv.dim() == geom.weight_shape(), || {
            format!("weight {:?} vs {:?}", wv.dim(), geom.weight_shape())
        })?;
        Self::check("conv2d", bv.dim() == (1, geom.out_channels), || {
            format!("bias {:?}", bv.dim())
        })?;
        let out = conv2d_forward(xv, wv, bv, &geom);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Average over spatial rows `rows.0..rows.1` (all columns) of a (C, H, W) map.
    pub fn row_pool(
        &mut self,
        x: Var,
        channels: usize,
        h: usize,
        w: usize,
        rows: (usize, usize),
    ) -> Result<Var, TapeError> {
        let xv = self.value(x);
        Self::check("row_pool", xv.ncols() == channels * h * w, || {
            format!("row length {} vs {}x{}x{}", xv.ncols(), channels, h, w)
        })?;
        Self::check("row_pool", rows.0 < rows.1 && rows.1 <= h, || {
            format!("row range {:?} of height {}", rows, h)
        })?;
        let count = ((rows.1 - rows.0) * w) as f64;
        let n = xv.nrows();
        let mut out = Array2::zeros((n, channels));
        for i in 0..n {
            for c in 0..channels {
                let mut s = 0.0;
                for r in rows.0..rows.1 {
                    for col in 0..w {
                        s += xv[[i, c * h * w + r * w + col]];
                    }
                }
                out[[i, c]] = s / count;
            }
        }
        Ok(self.push(
            out,
            Op::RowPool {
                x,
                channels,
                h,
                w,
                rows,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TapeError> {
        let (av, bv) = (self.value(a), self.value(b));
        Self::check("concat_cols", av.nrows() == bv.nrows(), || {
            format!("{:?} | {:?}", av.dim(), bv.dim())
        })?;
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("rows checked");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Mean of every entry, as a 1×1 node.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = if av.is_empty() {
            0.0
        } else {
            av.sum() / av.len() as f64
        };
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    /// Backpropagates from a 1×1 root. Every node's gradient is retained.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward root must be a scalar"
        );
        grads[root.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(a, f) => accumulate(&mut grads, *a, &g * *f),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).row(0).to_owned();
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &gv;
                    let mean_dxhat = dxhat.mean_axis(Axis(0)).expect("non-empty");
                    let mean_dxhat_xhat = (&dxhat * xhat).mean_axis(Axis(0)).expect("non-empty");
                    let dx = (&dxhat - &mean_dxhat - &(xhat * &mean_dxhat_xhat)) * inv_std;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Normalize {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).row(0).to_owned();
                    let dgamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dx = &g * &gv * inv_std;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let dot: f64 = y.row(i).iter().zip(g.row(i)).map(|(p, d)| p * d).sum();
                        for j in 0..y.ncols() {
                            ga[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CrossEntropy { probs, labels } => {
                    let pv = self.value(*probs);
                    let scale = g[[0, 0]] / labels.len() as f64;
                    let mut gp = Array2::zeros(pv.dim());
                    for (i, &l) in labels.iter().enumerate() {
                        let p = pv[[i, l]];
                        if p > PROB_FLOOR {
                            gp[[i, l]] = -scale / p;
                        }
                    }
                    accumulate(&mut grads, *probs, gp);
                }
                Op::Triplet { x, mined } => {
                    let xv = self.value(*x);
                    let scale = g[[0, 0]] / mined.len() as f64;
                    let mut gx = Array2::zeros(xv.dim());
                    for t in mined.iter().filter(|t| t.active) {
                        if t.pos_dist > 0.0 {
                            let u = (&xv.row(t.anchor) - &xv.row(t.positive)) / t.pos_dist;
                            let mut ra = gx.row_mut(t.anchor);
                            ra.scaled_add(scale, &u);
                            let mut rp = gx.row_mut(t.positive);
                            rp.scaled_add(-scale, &u);
                        }
                        if t.neg_dist > 0.0 {
                            let u = (&xv.row(t.anchor) - &xv.row(t.negative)) / t.neg_dist;
                            let mut ra = gx.row_mut(t.anchor);
                            ra.scaled_add(-scale, &u);
                            let mut rn = gx.row_mut(t.negative);
                            rn.scaled_add(scale, &u);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::GradReverse(a, f) => accumulate(&mut grads, *a, &g * -*f),
                Op::Conv2d { x, w, b, geom } => {
                    let (gx, gw, gb) = conv2d_backward(self.value(*x), self.value(*w), &g, geom);
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *b, gb);
                }
                Op::RowPool {
                    x,
                    channels,
                    h,
                    w,
                    rows,
                } => {
                    let n = g.nrows();
                    let count = ((rows.1 - rows.0) * w) as f64;
                    let mut gx = Array2::zeros((n, channels * h * w));
                    for i in 0..n {
                        for c in 0..*channels {
                            let d = g[[i, c]] / count;
                            for r in rows.0..rows.1 {
                                for col in 0..*w {
                                    gx[[i, c * h * w + r * w + col]] = d;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).ncols();
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MeanAll(a) => {
                    let dim = self.value(*a).dim();
                    let count = (dim.0 * dim.1).max(1) as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g[[0, 0]] / count));
                }
            }
            grads[idx] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(key), Some(g)) = (node.param, grads[idx].as_ref()) {
                params
                    .entry(key)
                    .and_modify(|acc: &mut Array2<f64>| *acc += g)
                    .or_insert_with(|| g.clone());
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Gradients {
            nodes: grads,
            shapes,
            params,
        }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: BTreeMap<ParamKey, Array2<f64>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. any node; zeros when no path reaches it.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        self.nodes[v.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.shapes[v.0]))
    }

    /// Whether any gradient reached the node (a zero-valued gradient still counts).
    pub fn reached(&self, v: Var) -> bool {
        self.nodes[v.0].is_some()
    }

    pub fn param(&self, key: ParamKey) -> Option<&Array2<f64>> {
        self.params.get(&key)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Array2<f64>)> {
        self.params.iter()
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let s = row.sum();
        row.mapv_inplace(|x| x / s);
    }
    out
}

/// Pairwise Euclidean distances between the rows of `x`.
pub fn pairwise_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let dist = s.sqrt();
            d[[i, j]] = dist;
            d[[j, i]] = dist;
        }
    }
    d
}

/// For each anchor, the farthest same-label sample and the nearest other-label
/// sample. Ties resolve to the lowest index.
pub fn mine_batch_hard(
    x: &Array2<f64>,
    labels: &[usize],
    margin: f64,
) -> Result<Vec<MinedTriplet>, TapeError> {
    let dist = pairwise_distances(x);
    let n = labels.len();
    let mut mined = Vec::with_capacity(n);
    for a in 0..n {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist[[a, j]];
            if labels[j] == labels[a] {
                if pos.is_none_or(|(_, best)| d > best) {
                    pos = Some((j, d));
                }
            } else if neg.is_none_or(|(_, best)| d < best) {
                neg = Some((j, d));
            }
        }
        let (positive, pos_dist) = pos.ok_or(TapeError::TripletSampler {
            anchor: a,
            missing: "positive",
        })?;
        let (negative, neg_dist) = neg.ok_or(TapeError::TripletSampler {
            anchor: a,
            missing: "negative",
        })?;
        mined.push(MinedTriplet {
            anchor: a,
            positive,
            negative,
            pos_dist,
            neg_dist,
            active: pos_dist + margin - neg_dist > 0.0,
        });
    }
    Ok(mined)
}

fn conv2d_forward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    b: &Array2<f64>,
    g: &ConvGeometry,
) -> Array2<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = x.nrows();
    let k = g.kernel;
    let mut out = Array2::zeros((n, g.out_len()));
    for i in 0..n {
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b[[0, oc]];
                    for ic in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy as usize >= g.in_h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix as usize >= g.in_w {
                                    continue;
                                }
                                let xi = ic * g.in_h * g.in_w + iy as usize * g.in_w + ix as usize;
                                let wi = ic * k * k + ky * k + kx;
                                s += x[[i, xi]] * w[[oc, wi]];
                            }
                        }
                    }
                    out[[i, oc * oh * ow + oy * ow + ox]] = s;
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Array2<f64>,
    w: &Array2<f64>,
    gout: &Array2<f64>,
    g: &ConvGeometry,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = x.nrows();
    let k = g.kernel;
    let mut gx = Array2::zeros(x.dim());
    let mut gw = Array2::zeros(w.dim());
    let mut gb = Array2::zeros((1, g.out_channels));
    for i in 0..n {
        for oc in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = gout[[i, oc * oh * ow + oy * ow + ox]];
                    gb[[0, oc]] += d;
                    for ic in 0..g.in_channels {
                        for ky in 0..k {
                            let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                            if iy < 0 || iy as usize >= g.in_h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if ix < 0 || ix as usize >= g.in_w {
                                    continue;
                                }
                                let xi = ic * g.in_h * g.in_w + iy as usize * g.in_w + ix as usize;
                                let wi = ic * k * k + ky * k + kx;
                                gx[[i, xi]] += d * w[[oc, wi]];
                                gw[[oc, wi]] += d * x[[i, xi]];
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central finite differences of `f` around `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut xp = x.clone();
            xp[[r, c]] += h;
            let mut xm = x.clone();
            xm[[r, c]] -= h;
            g[[r, c]] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, rel: f64) {
        let diff = (a - b).mapv(f64::abs).sum();
        let scale = a.mapv(f64::abs).sum().max(b.mapv(f64::abs).sum()).max(1e-8);
        assert!(diff / scale < rel, "analytic {a:?}\nnumeric {b:?}");
    }

    fn pseudo_random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut s = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Array2::from_shape_fn((rows, cols), |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn matmul_bias_relu_softmax_ce_gradient() {
        let x0 = pseudo_random(5, 4, 1);
        let w = pseudo_random(4, 3, 2);
        let b = pseudo_random(1, 3, 3);
        let labels = [0, 2, 1, 1, 0];
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let h = t.matmul(xv, wv).unwrap();
            let h = t.add_bias(h, bv).unwrap();
            let h = t.relu(h);
            let p = t.softmax(h);
            let l = t.cross_entropy(p, &labels).unwrap();
            (t.scalar(l), t, xv, l)
        };
        let (_, t, xv, l) = f(&x0);
        let analytic = t.backward(l).wrt(xv);
        let numeric = numeric_grad(&x0, |x| f(x).0);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let x0 = pseudo_random(6, 3, 7);
        let gamma = pseudo_random(1, 3, 8);
        let beta = pseudo_random(1, 3, 9);
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let g = t.leaf(gamma.clone());
            let b = t.leaf(beta.clone());
            let (y, _) = t.batch_norm(xv, g, b, 1e-5).unwrap();
            // a linear read-out would cancel against the batch mean
            let p = t.softmax(y);
            let s = t.cross_entropy(p, &[0, 2, 1, 1, 0, 2]).unwrap();
            (t.scalar(s), t, xv, s)
        };
        let (_, t, xv, s) = f(&x0);
        let analytic = t.backward(s).wrt(xv);
        let numeric = numeric_grad(&x0, |x| f(x).0);
        assert_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn conv_and_row_pool_gradient() {
        let geom = ConvGeometry {
            in_channels: 2,
            in_h: 5,
            in_w: 4,
            out_channels: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        assert_eq!((geom.out_h(), geom.out_w()), (3, 2));
        let x0 = pseudo_random(2, geom.in_len(), 11);
        let w = pseudo_random(3, 18, 12);
        let b = pseudo_random(1, 3, 13);
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let wv = t.leaf(w.clone());
            let bv = t.leaf(b.clone());
            let y = t.conv2d(xv, wv, bv, geom).unwrap();
            let p = t.row_pool(y, 3, 3, 2, (1, 3)).unwrap();
            let q = t.relu(p);
            let s = t.mean_all(q);
            (t.scalar(s), t, xv, s)
        };
        let (_, t, xv, s) = f(&x0);
        let analytic = t.backward(s).wrt(xv);
        let numeric = numeric_grad(&x0, |x| f(x).0);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, 2.0]]);
        let d = t.detach(x);
        let s = t.mean_all(d);
        let g = t.backward(s);
        assert!(!g.reached(x));
        assert_eq!(g.wrt(x), array![[0.0, 0.0]]);
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0, 3.0]]);
        let r = t.grad_reverse(x, 0.25);
        let s = t.mean_all(r);
        assert_eq!(t.scalar(s), 2.0 / 3.0);
        let g = t.backward(s).wrt(x);
        assert_eq!(g, array![[-0.25 / 3.0, -0.25 / 3.0, -0.25 / 3.0]]);
    }

    #[test]
    fn triplet_requires_positive_and_negative() {
        let mut t = Tape::new();
        let x = t.leaf(array![[0.0], [1.0], [2.0]]);
        let err = t.triplet_batch_hard(x, &[0, 0, 1], 0.5).unwrap_err();
        assert_eq!(
            err,
            TapeError::TripletSampler {
                anchor: 2,
                missing: "positive"
            }
        );
    }

    #[test]
    fn param_gradients_are_collected_by_key() {
        let key = ParamKey { owner: 9, index: 0 };
        let mut t = Tape::new();
        let w = t.param(key, array![[2.0]]);
        let x = t.leaf(array![[3.0]]);
        let y = t.matmul(x, w).unwrap();
        let s = t.mean_all(y);
        let g = t.backward(s);
        assert_eq!(g.param(key).unwrap(), &array![[3.0]]);
    }
}
