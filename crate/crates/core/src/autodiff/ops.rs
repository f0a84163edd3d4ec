use super::kernels::{self, gemm};
use super::tape::{accum, slot, Node, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf {
        tracked: bool,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    LogSigmoid(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    TargetLogProb {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Top1Route {
        logits: Var,
        experts: Vec<Var>,
        choice: Vec<usize>,
        soft: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { a, row } => vec![*a, *row],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::LogSigmoid(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } | Op::TargetLogProb { logits, .. } => vec![*logits],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Top1Route {
                logits, experts, ..
            } => {
                let mut v = vec![*logits];
                v.extend(experts);
                v
            }
        }
    }

    pub(crate) fn backward(
        &self,
        tape: &Tape,
        node: &Node,
        gout: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        match self {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, m, k, n, b_t } => {
                let (m, k, n) = (*m, *k, *n);
                if let Some(ga) = slot(grads, tape, *a) {
                    // dA = G · Bᵀ  (G: m×n, B: k×n or stored n×k)
                    gemm(m, n, k, gout, false, tape.value(*b), !*b_t, 1.0, ga);
                }
                if let Some(gb) = slot(grads, tape, *b) {
                    if *b_t {
                        // B stored n×k: dB = Gᵀ · A
                        gemm(n, m, k, gout, true, tape.value(*a), false, 1.0, gb);
                    } else {
                        // dB = Aᵀ · G
                        gemm(k, m, n, tape.value(*a), true, gout, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                accum(grads, tape, *a, gout);
                accum(grads, tape, *b, gout);
            }
            Op::Sub(a, b) => {
                accum(grads, tape, *a, gout);
                if let Some(gb) = slot(grads, tape, *b) {
                    gb.iter_mut().zip(gout).for_each(|(x, g)| *x -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (tape.value(*a), tape.value(*b));
                if let Some(ga) = slot(grads, tape, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * vb[i];
                    }
                }
                if let Some(gb) = slot(grads, tape, *b) {
                    for i in 0..gb.len() {
                        gb[i] += gout[i] * va[i];
                    }
                }
            }
            Op::AddRow { a, row } => {
                accum(grads, tape, *a, gout);
                if let Some(gr) = slot(grads, tape, *row) {
                    let n = gr.len();
                    for chunk in gout.chunks(n) {
                        gr.iter_mut().zip(chunk).for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, tape, *a) {
                    ga.iter_mut().zip(gout).for_each(|(x, g)| *x += c * g);
                }
            }
            Op::Gelu(a) => {
                let va = tape.value(*a);
                if let Some(ga) = slot(grads, tape, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * kernels::gelu_grad(va[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = tape.shape(*gamma).iter().product::<usize>();
                let gam = tape.value(*gamma);
                if let Some(gg) = slot(grads, tape, *gamma) {
                    for (gchunk, hchunk) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gchunk[j] * hchunk[j];
                        }
                    }
                }
                if let Some(gbeta) = slot(grads, tape, *beta) {
                    for gchunk in gout.chunks(n) {
                        gbeta.iter_mut().zip(gchunk).for_each(|(x, g)| *x += g);
                    }
                }
                if let Some(gx) = slot(grads, tape, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, (gchunk, hchunk)) in gout.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for j in 0..n {
                            dxhat[j] = gchunk[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hchunk[j];
                        }
                        mean_d /= n as f64;
                        mean_dh /= n as f64;
                        let out = &mut gx[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += rstd[r] * (dxhat[j] - mean_d - hchunk[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *node.shape.last().unwrap();
                if let Some(ga) = slot(grads, tape, *a) {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &gout[r * n..(r + 1) * n];
                        let dot: f64 = ys.iter().zip(gs).map(|(p, g)| p * g).sum();
                        for j in 0..n {
                            ga[r * n + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LogSigmoid(a) => {
                let va = tape.value(*a);
                if let Some(ga) = slot(grads, tape, *a) {
                    for i in 0..ga.len() {
                        ga[i] += gout[i] * kernels::sigmoid_neg(va[i]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(grads, tape, *a) {
                    ga.iter_mut().for_each(|x| *x += gout[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(grads, tape, *a) {
                    let s = gout[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if let Some(gl) = slot(grads, tape, *logits) {
                    let v = gl.len() / targets.len();
                    let s = gout[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            gl[r * v + j] += s * probs[r * v + j];
                        }
                        gl[r * v + t] -= s;
                    }
                }
            }
            Op::TargetLogProb {
                logits,
                targets,
                probs,
            } => {
                if let Some(gl) = slot(grads, tape, *logits) {
                    let v = gl.len() / targets.len();
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            gl[r * v + j] -= gout[0] * probs[r * v + j];
                        }
                        gl[r * v + t] += gout[0];
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(gt) = slot(grads, tape, *table) {
                    let d = *node.shape.last().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&gout[r * d..(r + 1) * d])
                            .for_each(|(x, g)| *x += g);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = tape.value(p).len();
                    accum(grads, tape, p, &gout[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => attention_backward(tape, *q, *k, *v, *heads, probs, gout, grads),
            Op::Top1Route {
                logits,
                experts,
                choice,
                soft,
            } => {
                let kk = experts.len();
                let d = *node.shape.last().unwrap();
                // Straight-through: the forward output is E_{k*}(h) scaled by
                // p_{k*}/stopgrad(p_{k*}) == 1, so the router sees
                // d/dlogit_j = <g, E_{k*}(h)> (δ_{j,k*} − p_j).
                let mut dlogits = vec![0.0; choice.len() * kk];
                for (t, &c) in choice.iter().enumerate() {
                    let e = &tape.value(experts[c])[t * d..(t + 1) * d];
                    let g = &gout[t * d..(t + 1) * d];
                    let dot: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
                    for j in 0..kk {
                        let delta = if j == c { 1.0 } else { 0.0 };
                        dlogits[t * kk + j] = dot * (delta - soft[t * kk + j]);
                    }
                }
                accum(grads, tape, *logits, &dlogits);
                for (e_idx, &e) in experts.iter().enumerate() {
                    if let Some(ge) = slot(grads, tape, e) {
                        for (t, &c) in choice.iter().enumerate() {
                            if c == e_idx {
                                ge[t * d..(t + 1) * d]
                                    .iter_mut()
                                    .zip(&gout[t * d..(t + 1) * d])
                                    .for_each(|(x, g)| *x += g);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    tape: &Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: &[f64],
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let (t, d) = tape.rows_cols(q);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    let mut dq = vec![0.0; t * d];
    let mut dk = vec![0.0; t * d];
    let mut dv = vec![0.0; t * d];
    let mut dp = vec![0.0; t];
    for h in 0..heads {
        let off = h * dh;
        let p = &probs[h * t * t..(h + 1) * t * t];
        for i in 0..t {
            let go = &gout[i * d + off..i * d + off + dh];
            let mut dot = 0.0;
            for j in 0..=i {
                let pij = p[i * t + j];
                let vj = &vv[j * d + off..j * d + off + dh];
                let mut s = 0.0;
                for c in 0..dh {
                    s += go[c] * vj[c];
                    dv[j * d + off + c] += pij * go[c];
                }
                dp[j] = s;
                dot += pij * s;
            }
            for j in 0..=i {
                let ds = p[i * t + j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                for c in 0..dh {
                    dq[i * d + off + c] += ds * kv[j * d + off + c];
                    dk[j * d + off + c] += ds * qv[i * d + off + c];
                }
            }
        }
    }
    accum(grads, tape, q, &dq);
    accum(grads, tape, k, &dk);
    accum(grads, tape, v, &dv);
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::dim(op, tape.shape(a), tape.shape(b)));
    }
    Ok(())
}

fn matrix_dims(tape: &Tape, op: &'static str, v: Var) -> Result<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 {
        return Err(Error::dim(op, s, &[0, 0]));
    }
    Ok((s[0], s[1]))
}

impl Tape {
    /// Matrix product `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self, "matmul", a)?;
        let (k2, n) = matrix_dims(self, "matmul", b)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_t: false,
            },
        ))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`. Used for `x · Wᵀ` linear layers and
    /// the tied output head.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self, "matmul_t", a)?;
        let (n, k2) = matrix_dims(self, "matmul_t", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            0.0,
            &mut out,
        );
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                b_t: true,
            },
        ))
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        same_shape(self, name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `row` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.rows_cols(a);
        if self.value(row).len() != n {
            return Err(Error::dim("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow { a, row }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    /// Normalizes each row over the last dimension, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, n) = self.rows_cols(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let (xs, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * n];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last dimension, stabilized by max-subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.rows_cols(a);
        if n == 0 {
            return Err(Error::dim("softmax", self.shape(a), &[1]));
        }
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_in_place);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a)))
    }

    /// Elementwise `log(1 / (1 + exp(-x)))`, stable for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| kernels::log_sigmoid(x))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::LogSigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(a))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`T × V`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().copied().map(Some).collect();
        self.cross_entropy_masked(logits, &t)
    }

    /// As [`Tape::cross_entropy`], but positions with `None` are excluded
    /// from both the sum and the count.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (probs, nll) = self.log_probs_for("cross_entropy", logits, targets)?;
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Contract(
                "cross_entropy needs at least one target".into(),
            ));
        }
        let loss = nll / count as f64;
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Sum over unmasked positions of `log softmax(logits)[target]`.
    pub fn target_log_prob(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (probs, nll) = self.log_probs_for("target_log_prob", logits, targets)?;
        Ok(self.push(
            vec![1],
            vec![-nll],
            Op::TargetLogProb {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Softmax probabilities (kept for backward) and the summed NLL.
    fn log_probs_for(
        &self,
        op: &'static str,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<(Vec<f64>, f64)> {
        let (rows, v) = self.rows_cols(logits);
        if rows != targets.len() || targets.is_empty() {
            return Err(Error::dim(op, self.shape(logits), &[targets.len()]));
        }
        let x = self.value(logits);
        let mut probs = x.to_vec();
        let mut nll = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let row = &x[r * v..(r + 1) * v];
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: t,
                        size: v,
                    });
                }
                nll += kernels::log_sum_exp(row) - row[t];
            }
            kernels::softmax_in_place(&mut probs[r * v..(r + 1) * v]);
        }
        Ok((probs, nll))
    }

    /// Gathers rows of `table` (`N × d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = matrix_dims(self, "embedding", table)?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: n,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of zero ids".into()));
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Stacks 2-D parts with equal width vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Contract("concat_rows of nothing".into()));
        };
        let (_, d) = matrix_dims(self, "concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = matrix_dims(self, "concat_rows", p)?;
            if c != d {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, d], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Causal multi-head scaled dot-product attention over `T × d` inputs.
    /// Row `i` attends to rows `0..=i` only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = matrix_dims(self, "attention", q)?;
        same_shape(self, "attention", q, k)?;
        same_shape(self, "attention", q, v)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &qv[i * d + off..i * d + off + dh];
                let row = &mut p[i * t..i * t + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                kernels::softmax_in_place(row);
                let o = &mut out[i * d + off..i * d + off + dh];
                for (j, &pij) in row.iter().enumerate() {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    o.iter_mut().zip(vj).for_each(|(x, y)| *x += pij * y);
                }
            }
        }
        Ok(self.push(
            vec![t, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Hard top-1 routing: row `t` of the output is row `t` of
    /// `experts[argmax(logits[t])]` (ties to the lowest index).
    ///
    /// Only the selected expert receives gradient for a row. The router
    /// logits receive a straight-through gradient through the softmax
    /// probability of the chosen expert.
    pub fn top1_route(&mut self, logits: Var, experts: &[Var]) -> Result<Var> {
        let (t, kk) = matrix_dims(self, "top1_route", logits)?;
        if kk != experts.len() || kk == 0 {
            return Err(Error::dim(
                "top1_route",
                self.shape(logits),
                &[experts.len()],
            ));
        }
        let (t2, d) = matrix_dims(self, "top1_route", experts[0])?;
        if t2 != t {
            return Err(Error::dim(
                "top1_route",
                self.shape(logits),
                self.shape(experts[0]),
            ));
        }
        for &e in experts {
            same_shape(self, "top1_route", experts[0], e)?;
        }
        let lv = self.value(logits);
        let mut soft = lv.to_vec();
        let mut choice = Vec::with_capacity(t);
        let mut out = Vec::with_capacity(t * d);
        for r in 0..t {
            let c = kernels::argmax(&lv[r * kk..(r + 1) * kk]);
            kernels::softmax_in_place(&mut soft[r * kk..(r + 1) * kk]);
            out.extend_from_slice(&self.value(experts[c])[r * d..(r + 1) * d]);
            choice.push(c);
        }
        Ok(self.push(
            vec![t, d],
            out,
            Op::Top1Route {
                logits,
                experts: experts.to_vec(),
                choice,
                soft,
            },
        ))
    }

    /// Expert index chosen per row by the most recent `top1_route` node
    /// producing `routed`.
    pub fn route_choices(&self, routed: Var) -> Option<&[usize]> {
        match &self.nodes[routed.0].op {
            Op::Top1Route { choice, .. } => Some(choice),
            _ => None,
        }
    }
}
