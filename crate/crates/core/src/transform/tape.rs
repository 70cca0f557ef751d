//! Minimal reverse-mode differentiation over dense `f64` buffers.
//!
//! A [`Tape`] records every operation with its output value. [`Tape::backward`]
//! walks the records in reverse and accumulates vector-Jacobian products.
//! Shapes are tracked only as far as each operation needs them; row-major
//! layout throughout.

use std::rc::Rc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// Constant offset folded into the value; gradient passes through.
    Shift {
        x: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        row: usize,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    SquaredError {
        a: Var,
        b: Var,
    },
    /// Scalar computed outside the tape with known partials.
    External {
        partials: Vec<(Var, Vec<f64>)>,
    },
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn len(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var, k: usize, n: usize) -> Var {
        let m = self.len(a) / k;
        debug_assert_eq!(self.len(a), m * k);
        debug_assert_eq!(self.len(b), k * n);
        let mut out = vec![0.0; m * n];
        mm(self.value(a), self.value(b), m, k, n, &mut out);
        self.push(out, Op::MatMul { a, b, m, k, n })
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ` with `transpose_b`), `a[i]` being `m×k`.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_matmul(
        &mut self,
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    ) -> Var {
        debug_assert_eq!(self.len(a), batch * m * k);
        debug_assert_eq!(self.len(b), batch * k * n);
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let oi = &mut out[i * m * n..(i + 1) * m * n];
                if transpose_b {
                    mm_bt(ai, bi, m, k, n, oi);
                } else {
                    mm(ai, bi, m, k, n, oi);
                }
            }
        }
        self.push(
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
        )
    }

    /// Adds `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = self.len(bias);
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| v + b))
            .collect();
        self.push(out, Op::AddBias { x, bias })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        debug_assert_eq!(self.len(a), self.len(b));
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(out, Op::Add { a, b })
    }

    /// `x + c` for a constant `c`.
    pub fn shift(&mut self, x: Var, c: &[f64]) -> Var {
        debug_assert_eq!(self.len(x), c.len());
        let out = self.value(x).iter().zip(c).map(|(v, c)| v + c).collect();
        self.push(out, Op::Shift { x })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        self.push(out, Op::Scale { x, factor })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        self.push(out, Op::Gelu { x })
    }

    /// Layer normalization over rows of length `gamma.len()`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let n = self.len(gamma);
        let rows = self.len(x) / n;
        let mut normalized = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        {
            let (xv, g, b) = (self.value(x), self.value(gamma), self.value(beta));
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[r] = is;
                for j in 0..n {
                    let h = (row[j] - mean) * is;
                    normalized[r * n + j] = h;
                    out[r * n + j] = h * g[j] + b[j];
                }
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Softmax over consecutive rows of length `row`.
    pub fn softmax(&mut self, x: Var, row: usize) -> Var {
        let mut out = self.value(x).to_vec();
        for r in out.chunks_exact_mut(row) {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in r.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in r.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::Softmax { x, row })
    }

    /// `out[i] = x[index[i]]`; covers reshapes, transposes, rolls and window partitions.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>) -> Var {
        let xv = self.value(x);
        let out = index.iter().map(|&i| xv[i]).collect();
        self.push(out, Op::Gather { x, index })
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Var {
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(vec![s], Op::SquaredError { a, b })
    }

    /// Scalar evaluated elsewhere, with its partials with respect to `inputs`.
    pub fn external(&mut self, value: f64, partials: Vec<(Var, Vec<f64>)>) -> Var {
        self.push(vec![value], Op::External { partials })
    }

    /// Gradients of the scalar `output` with respect to every recorded node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0; self.len(output)]);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ga = accumulator(&mut grads, *a, m * k);
                    mm_bt(&g, self.value(*b), m, n, k, ga);
                    let gb = accumulator(&mut grads, *b, k * n);
                    mm_at(self.value(*a), &g, m, k, n, gb);
                }
                Op::BatchMatMul {
                    a,
                    b,
                    batch,
                    m,
                    k,
                    n,
                    transpose_b,
                } => {
                    let (batch, m, k, n) = (*batch, *m, *k, *n);
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    {
                        let ga = accumulator(&mut grads, *a, batch * m * k);
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bv[i * k * n..(i + 1) * k * n];
                            let out = &mut ga[i * m * k..(i + 1) * m * k];
                            if *transpose_b {
                                // b is n×k: dA = dC · b
                                mm(gi, bi, m, n, k, out);
                            } else {
                                mm_bt(gi, bi, m, n, k, out);
                            }
                        }
                    }
                    let gb = accumulator(&mut grads, *b, batch * k * n);
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let out = &mut gb[i * k * n..(i + 1) * k * n];
                        if *transpose_b {
                            // dB (n×k) = dCᵀ · a
                            mm_at(gi, ai, m, n, k, out);
                        } else {
                            mm_at(ai, gi, m, k, n, out);
                        }
                    }
                }
                Op::AddBias { x, bias } => {
                    let n = self.len(*bias);
                    add_into(accumulator(&mut grads, *x, g.len()), &g);
                    let gb = accumulator(&mut grads, *bias, n);
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
                Op::Add { a, b } => {
                    add_into(accumulator(&mut grads, *a, g.len()), &g);
                    add_into(accumulator(&mut grads, *b, g.len()), &g);
                }
                Op::Shift { x } => add_into(accumulator(&mut grads, *x, g.len()), &g),
                Op::Scale { x, factor } => {
                    let gx = accumulator(&mut grads, *x, g.len());
                    for (o, v) in gx.iter_mut().zip(&g) {
                        *o += v * factor;
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let gx = accumulator(&mut grads, *x, g.len());
                    for ((o, &v), &gi) in gx.iter_mut().zip(xv).zip(&g) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let d = 0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * d;
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let n = self.len(*gamma);
                    let gv = self.value(*gamma);
                    {
                        let gx = accumulator(&mut grads, *x, g.len());
                        let mut dh = vec![0.0; n];
                        for (r, &is) in inv_std.iter().enumerate() {
                            let gr = &g[r * n..(r + 1) * n];
                            let hr = &normalized[r * n..(r + 1) * n];
                            let mut sum = 0.0;
                            let mut dot = 0.0;
                            for j in 0..n {
                                dh[j] = gr[j] * gv[j];
                                sum += dh[j];
                                dot += dh[j] * hr[j];
                            }
                            let out = &mut gx[r * n..(r + 1) * n];
                            for j in 0..n {
                                out[j] += is / n as f64 * (n as f64 * dh[j] - sum - hr[j] * dot);
                            }
                        }
                    }
                    {
                        let gg = accumulator(&mut grads, *gamma, n);
                        for (gr, hr) in g.chunks_exact(n).zip(normalized.chunks_exact(n)) {
                            for j in 0..n {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    let gb = accumulator(&mut grads, *beta, n);
                    for gr in g.chunks_exact(n) {
                        add_into(gb, gr);
                    }
                }
                Op::Softmax { x, row } => {
                    let y = &node.value;
                    let gx = accumulator(&mut grads, *x, g.len());
                    for ((yr, gr), out) in y
                        .chunks_exact(*row)
                        .zip(g.chunks_exact(*row))
                        .zip(gx.chunks_exact_mut(*row))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..*row {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Gather { x, index } => {
                    let gx = accumulator(&mut grads, *x, self.len(*x));
                    for (&i, &v) in index.iter().zip(&g) {
                        gx[i] += v;
                    }
                }
                Op::SquaredError { a, b } => {
                    let s = g[0];
                    let (av, bv) = (self.value(*a), self.value(*b));
                    {
                        let ga = accumulator(&mut grads, *a, av.len());
                        for ((o, x), y) in ga.iter_mut().zip(av).zip(bv) {
                            *o += 2.0 * s * (x - y);
                        }
                    }
                    let gb = accumulator(&mut grads, *b, bv.len());
                    for ((o, x), y) in gb.iter_mut().zip(av).zip(bv) {
                        *o -= 2.0 * s * (x - y);
                    }
                }
                Op::External { partials } => {
                    let s = g[0];
                    for (v, p) in partials {
                        let gv = accumulator(&mut grads, *v, p.len());
                        for (o, d) in gv.iter_mut().zip(p) {
                            *o += s * d;
                        }
                    }
                }
            }
            // keep leaf gradients for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulator(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
fn mm_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
