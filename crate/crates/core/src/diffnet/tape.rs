use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine {
        x: usize,
        weight: ParamId,
        start: usize,
        bias: Option<ParamId>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    OneMinus(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Abs(usize),
    Square(usize),
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    RepeatRows(usize),
    Sum(usize),
    RowSumSq(usize),
    RowNorm(usize),
    WeightedSum { src: usize, weights: Vec<f64> },
    LogSoftmax(usize),
    Pick { src: usize, cols: Vec<usize> },
    Min(usize, usize),
    Clamp { src: usize, lo: f64, hi: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of a forward computation over parameters of one [`ParamStore`].
///
/// Every operation caches its output; [`Tape::backward`] walks the record in
/// reverse and accumulates exact gradients for every parameter touched.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            context,
            format!("{}x{}", a.rows(), a.cols()),
            format!("{}x{}", b.rows(), b.cols()),
        ));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; gradients do not flow past it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn row(&mut self, values: Vec<f64>) -> Var {
        self.input(Tensor::row(values))
    }

    /// `y = x W^T + b` with `W` stored as `out x in`.
    pub fn affine(&mut self, x: Var, weight: ParamId, bias: Option<ParamId>) -> Result<Var> {
        let (wc, xc) = (self.store.value(weight).cols(), self.val(x).cols());
        if xc != wc {
            return Err(Error::shape("affine input", wc, xc));
        }
        self.affine_cols(x, weight, 0, bias)
    }

    /// Affine map through the column block `start..start + x.cols()` of `W`,
    /// i.e. the contribution of one slice of a wider input.
    pub fn affine_cols(&mut self, x: Var, weight: ParamId, start: usize, bias: Option<ParamId>) -> Result<Var> {
        let w = self.store.value(weight);
        let xv = self.val(x);
        let (n, din, dout, stride) = (xv.rows(), xv.cols(), w.rows(), w.cols());
        if start + din > stride {
            return Err(Error::shape("affine input", stride, start + din));
        }
        let mut out = Tensor::zeros(n, dout);
        if let Some(b) = bias {
            let bv = self.store.value(b);
            if bv.len() != dout {
                return Err(Error::shape("affine bias", dout, bv.len()));
            }
            for i in 0..n {
                out.data_mut()[i * dout..(i + 1) * dout].copy_from_slice(bv.data());
            }
        }
        let xd = xv.data();
        let wd = w.data();
        let od = out.data_mut();
        for i in 0..n {
            let xr = &xd[i * din..(i + 1) * din];
            for o in 0..dout {
                let wr = &wd[o * stride + start..o * stride + start + din];
                od[i * dout + o] += dot(xr, wr);
            }
        }
        Ok(self.push(
            out,
            Op::Affine {
                x: x.0,
                weight,
                start,
                bias,
            },
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        context: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        same_shape(context, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "min", f64::min, Op::Min(a.0, b.0))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.val(a).map(f);
        self.push(value, op)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a.0, factor))
    }

    /// Adds the constant `c` to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a.0))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 - x, Op::OneMinus(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a.0))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { src: a.0, lo, hi })
    }

    /// Column-wise concatenation; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|p| self.val(*p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "at least one part", 0))?;
        let mut cols = 0;
        for p in parts {
            let v = self.val(*p);
            if v.rows() != rows {
                return Err(Error::shape("concat_cols rows", rows, v.rows()));
            }
            cols += v.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.val(*p).row_slice(r));
            }
        }
        let value = Tensor::from_vec(rows, cols, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        if start + len > av.cols() {
            return Err(Error::shape("slice_cols", av.cols(), start + len));
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let value = Tensor::from_vec(av.rows(), len, out)?;
        Ok(self.push(value, Op::SliceCols { src: a.0, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.val(a);
        if start + len > av.rows() {
            return Err(Error::shape("slice_rows", av.rows(), start + len));
        }
        let c = av.cols();
        let value = Tensor::from_vec(len, c, av.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(value, Op::SliceRows { src: a.0, start }))
    }

    /// Broadcast a `1 x c` row to `n x c`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let av = self.val(a);
        if av.rows() != 1 {
            return Err(Error::shape("repeat_rows", 1, av.rows()));
        }
        let data = av.data().repeat(n);
        let value = Tensor::from_vec(n, av.cols(), data)?;
        Ok(self.push(value, Op::RepeatRows(a.0)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.val(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum of squares, `n x 1`.
    pub fn row_sum_sq(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let data = (0..av.rows())
            .map(|r| av.row_slice(r).iter().map(|x| x * x).sum())
            .collect::<Vec<f64>>();
        let value = Tensor::from_vec(av.rows(), 1, data).expect("row count");
        self.push(value, Op::RowSumSq(a.0))
    }

    /// Per-row Euclidean norm, `n x 1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let data = (0..av.rows())
            .map(|r| av.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect::<Vec<f64>>();
        let value = Tensor::from_vec(av.rows(), 1, data).expect("row count");
        self.push(value, Op::RowNorm(a.0))
    }

    /// `sum_i w_i * a_i` over the flattened values of `a`.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<f64>) -> Result<Var> {
        let av = self.val(a);
        if av.len() != weights.len() {
            return Err(Error::shape("weighted_sum", av.len(), weights.len()));
        }
        let s = av.data().iter().zip(&weights).map(|(x, w)| x * w).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { src: a.0, weights }))
    }

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.val(a);
        let mut out = av.clone();
        for r in 0..av.rows() {
            let row = av.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for c in 0..av.cols() {
                out.set(r, c, row[c] - lse);
            }
        }
        self.push(out, Op::LogSoftmax(a.0))
    }

    /// Picks column `cols[r]` from each row, producing `n x 1`.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let av = self.val(a);
        if cols.len() != av.rows() {
            return Err(Error::shape("pick rows", av.rows(), cols.len()));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= av.cols()) {
            return Err(Error::shape("pick column", av.cols(), bad));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| av.get(r, c)).collect();
        let value = Tensor::from_vec(av.rows(), 1, data)?;
        Ok(self.push(value, Op::Pick { src: a.0, cols }))
    }

    /// Reverse pass from a scalar output with upstream gradient 1.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.val(output);
        if out.len() != 1 {
            return Err(Error::shape("backward output", "1x1", format!("{}x{}", out.rows(), out.cols())));
        }
        self.backward_with(output, Tensor::scalar(1.0))
    }

    /// Reverse pass with an explicit upstream gradient for `output`.
    pub fn backward_with(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        same_shape("backward upstream", self.val(output), &upstream)?;
        let mut pgrads = self.store.zero_grads();
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(upstream);

        fn acc(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
            match &mut grads[idx] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Affine { x, weight, start, bias } => {
                    let xv = &self.nodes[*x].value;
                    let w = self.store.value(*weight);
                    let (n, din, dout, stride) = (xv.rows(), xv.cols(), w.rows(), w.cols());
                    let gd = g.data();
                    let xd = xv.data();
                    let wd = w.data();
                    {
                        let gw = pgrads.get_mut(*weight).data_mut();
                        for i in 0..n {
                            let xr = &xd[i * din..(i + 1) * din];
                            for o in 0..dout {
                                let go = gd[i * dout + o];
                                if go != 0.0 {
                                    let row = &mut gw[o * stride + start..o * stride + start + din];
                                    for (gwk, xk) in row.iter_mut().zip(xr) {
                                        *gwk += go * xk;
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let gb = pgrads.get_mut(*b).data_mut();
                        for i in 0..n {
                            for o in 0..dout {
                                gb[o] += gd[i * dout + o];
                            }
                        }
                    }
                    if matches!(self.nodes[*x].op, Op::Input) {
                        continue;
                    }
                    let mut gx = Tensor::zeros(n, din);
                    {
                        let gxd = gx.data_mut();
                        for i in 0..n {
                            let row = &mut gxd[i * din..(i + 1) * din];
                            for o in 0..dout {
                                let go = gd[i * dout + o];
                                if go != 0.0 {
                                    let wr = &wd[o * stride + start..o * stride + start + din];
                                    for (gk, wk) in row.iter_mut().zip(wr) {
                                        *gk += go * wk;
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    acc(&mut grads, *a, zip_map(&g, bv, |gi, bi| gi * bi));
                    acc(&mut grads, *b, zip_map(&g, av, |gi, ai| gi * ai));
                }
                Op::Min(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let mut ga = g.clone();
                    let mut gb = g;
                    for k in 0..av.len() {
                        if av.data()[k] <= bv.data()[k] {
                            gb.data_mut()[k] = 0.0;
                        } else {
                            ga.data_mut()[k] = 0.0;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut grads, *a, g.map(|v| v * f)),
                Op::Shift(a) => acc(&mut grads, *a, g),
                Op::OneMinus(a) => acc(&mut grads, *a, g.map(|v| -v)),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, y, |gi, s| gi * s * (1.0 - s))),
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, y, |gi, t| gi * (1.0 - t * t))),
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 }));
                }
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, y, |gi, e| gi * e)),
                Op::Abs(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_map(&g, x, |gi, xi| gi * sign(xi)));
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, zip_map(&g, x, |gi, xi| 2.0 * gi * xi));
                }
                Op::Clamp { src, lo, hi } => {
                    let x = &self.nodes[*src].value;
                    acc(
                        &mut grads,
                        *src,
                        zip_map(&g, x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 }),
                    );
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = &self.nodes[p].value;
                        let mut gp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            let src = &g.row_slice(r)[offset..offset + pv.cols()];
                            gp.data_mut()[r * pv.cols()..(r + 1) * pv.cols()].copy_from_slice(src);
                        }
                        offset += pv.cols();
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols { src, start } => {
                    let sv = &self.nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                    for r in 0..sv.rows() {
                        for (c, gv) in g.row_slice(r).iter().enumerate() {
                            gs.set(r, start + c, *gv);
                        }
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::SliceRows { src, start } => {
                    let sv = &self.nodes[*src].value;
                    let c = sv.cols();
                    let mut gs = Tensor::zeros(sv.rows(), c);
                    gs.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *src, gs);
                }
                Op::RepeatRows(a) => {
                    let cols = g.cols();
                    let mut ga = Tensor::zeros(1, cols);
                    for r in 0..g.rows() {
                        for (c, gv) in g.row_slice(r).iter().enumerate() {
                            ga.data_mut()[c] += gv;
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    ga.fill(g.item());
                    acc(&mut grads, *a, ga);
                }
                Op::RowSumSq(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = av.clone();
                    for r in 0..av.rows() {
                        let gr = g.get(r, 0);
                        for c in 0..av.cols() {
                            ga.set(r, c, 2.0 * gr * av.get(r, c));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowNorm(a) => {
                    let av = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        let norm = y.get(r, 0);
                        if norm > 0.0 {
                            let gr = g.get(r, 0);
                            for c in 0..av.cols() {
                                ga.set(r, c, gr * av.get(r, c) / norm);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum { src, weights } => {
                    let sv = &self.nodes[*src].value;
                    let gi = g.item();
                    let data = weights.iter().map(|w| w * gi).collect();
                    acc(&mut grads, *src, Tensor::from_vec(sv.rows(), sv.cols(), data)?);
                }
                Op::LogSoftmax(a) => {
                    let mut ga = g.clone();
                    for r in 0..y.rows() {
                        let gsum: f64 = g.row_slice(r).iter().sum();
                        for c in 0..y.cols() {
                            ga.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Pick { src, cols } => {
                    let sv = &self.nodes[*src].value;
                    let mut gs = Tensor::zeros(sv.rows(), sv.cols());
                    for (r, &c) in cols.iter().enumerate() {
                        gs.set(r, c, g.get(r, 0));
                    }
                    acc(&mut grads, *src, gs);
                }
            }
        }
        Ok(pgrads)
    }
}

/// Dot product with four independent accumulators, which lets the compiler
/// keep several multiply-adds in flight.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("shapes checked in forward")
}
