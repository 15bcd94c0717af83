//! Reverse-mode automatic differentiation over f64 tensors.
//!
//! A `Tape` records every operation; `backward` walks the record in reverse
//! and accumulates adjoints. The op set is exactly what the model needs
//! (convolutions, cross-attention building blocks, the analytic face
//! embedder's gates) — no broadcasting machinery beyond the few explicit
//! broadcast ops below. Every op's derivative is pinned by a finite-difference
//! test in this file; the full-model gradient check lives in `gradcheck`.

use std::cell::RefCell;

use crate::tensor::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise a / b, same shape.
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Elementwise product with a constant (not differentiated) tensor.
    MulConst(usize, Tensor),
    /// x * s with s a one-element tensor, broadcast over x.
    MulScalarVar { x: usize, s: usize },
    /// x + s with s a one-element tensor, broadcast over x.
    AddScalarVar { x: usize, s: usize },
    /// y[c,i,j] = x[c,i,j] * v[c] for x:[C,H,W], v:[C].
    MulChannelVec { x: usize, v: usize },
    /// [m,k] x [k,n] -> [m,n]
    Matmul(usize, usize),
    /// [m,n] -> [n,m]
    Transpose(usize),
    Reshape(usize),
    SoftmaxRows(usize),
    Silu(usize),
    Relu(usize),
    Sqrt(usize),
    /// Cubic smoothstep on (x - e0)/(e1 - e0), clamped to [0,1]. C1 everywhere.
    Smoothstep { x: usize, e0: f64, e1: f64 },
    Sum(usize),
    Mean(usize),
    /// x:[C,H,W], w:[O,C,3,3], stride 1, zero padding 1 -> [O,H,W]
    Conv3x3 { x: usize, w: usize },
    /// x:[C,H,W] + b:[C] broadcast over space.
    AddChannelBias { x: usize, b: usize },
    /// x:[R,C] + b:[C] broadcast over rows.
    AddRowBias { x: usize, b: usize },
    /// 2x2 mean pooling, [C,H,W] -> [C,H/2,W/2]
    AvgPool2(usize),
    /// Nearest-neighbor x2, [C,H,W] -> [C,2H,2W]
    Upsample2(usize),
    /// [C1,H,W] ++ [C2,H,W] -> [C1+C2,H,W]
    ConcatChannels(usize, usize),
    /// Spatial window copy, [C,H,W] -> [C,h,w]
    CropSpatial { x: usize, y0: usize, x0: usize },
    /// Channel range copy, [C,H,W] -> [len,H,W]
    SliceChannels { x: usize, c0: usize },
    /// x:[R,C] with row `row` replaced by v:[C].
    SetRow { x: usize, row: usize, v: usize },
    /// x:[R,C] -> [C]
    SelectRow { x: usize, row: usize },
    /// x:[R,C] -> [R]
    SelectCol { x: usize, col: usize },
    /// [C,H,W] -> [1,H,W], sum over channels.
    SumChannels(usize),
    /// x:[C,H,W] * s:[1,H,W] broadcast over channels.
    BroadcastChanMul { x: usize, s: usize },
    /// Concatenation of flattened inputs -> [total].
    Concat1(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Adjoints for every node of one backward pass.
pub struct Grads {
    g: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient with respect to `v`; zero tensor if the loss does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match &self.g[v.idx] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.idx]),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.idx].value.clone()
    }

    fn with_value<R>(&self, idx: usize, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[idx].value)
    }

    fn with_values2<R>(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[a].value, &nodes[b].value)
    }

    /// Reverse pass from a scalar loss. Adjoints for every node, including
    /// non-leaf intermediates; callers read the ones they care about.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss.idx].value.numel(),
            1,
            "backward root must be scalar"
        );
        let n = nodes.len();
        let mut g: Vec<Option<Tensor>> = vec![None; n];
        g[loss.idx] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx).rev() {
            let Some(gout) = g[idx].take() else { continue };
            backward_one(&nodes, idx, &gout, &mut g);
            g[idx] = Some(gout);
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Grads { g, shapes }
    }
}

fn accumulate(g: &mut [Option<Tensor>], idx: usize, delta: Tensor) {
    match &mut g[idx] {
        Some(t) => {
            let dst = t.data_mut();
            for (d, s) in dst.iter_mut().zip(delta.data()) {
                *d += s;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_one(nodes: &[Node], idx: usize, gout: &Tensor, g: &mut [Option<Tensor>]) {
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(g, *a, gout.clone());
            accumulate(g, *b, gout.clone());
        }
        Op::Sub(a, b) => {
            accumulate(g, *a, gout.clone());
            accumulate(g, *b, gout.scale(-1.0));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(g, *a, gout.zip_map(vb, |x, y| x * y).unwrap());
            accumulate(g, *b, gout.zip_map(va, |x, y| x * y).unwrap());
        }
        Op::Div(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(g, *a, gout.zip_map(vb, |x, y| x / y).unwrap());
            let mut db = gout.clone();
            for ((d, &x), (&y, _)) in db
                .data_mut()
                .iter_mut()
                .zip(va.data())
                .zip(vb.data().iter().zip(gout.data()))
            {
                *d = -*d * x / (y * y);
            }
            accumulate(g, *b, db);
        }
        Op::Scale(a, c) => accumulate(g, *a, gout.scale(*c)),
        Op::AddScalar(a) => accumulate(g, *a, gout.clone()),
        Op::MulConst(a, m) => accumulate(g, *a, gout.zip_map(m, |x, y| x * y).unwrap()),
        Op::MulScalarVar { x, s } => {
            let (vx, vs) = (&nodes[*x].value, &nodes[*s].value);
            let sv = vs.item();
            accumulate(g, *x, gout.scale(sv));
            accumulate(g, *s, Tensor::scalar(gout.dot(vx).unwrap()));
        }
        Op::AddScalarVar { x, s } => {
            accumulate(g, *x, gout.clone());
            accumulate(g, *s, Tensor::scalar(gout.data().iter().sum()));
        }
        Op::MulChannelVec { x, v } => {
            let (vx, vv) = (&nodes[*x].value, &nodes[*v].value);
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let mut dx = gout.clone();
            let mut dv = Tensor::zeros(&[c]);
            for ch in 0..c {
                let vc = vv.data()[ch];
                let base = ch * h * w;
                let mut acc = 0.0;
                for i in 0..h * w {
                    acc += gout.data()[base + i] * vx.data()[base + i];
                    dx.data_mut()[base + i] *= vc;
                }
                dv.data_mut()[ch] = acc;
            }
            accumulate(g, *x, dx);
            accumulate(g, *v, dv);
        }
        Op::Matmul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (va.shape()[0], va.shape()[1]);
            let n = vb.shape()[1];
            // da = g . b^T ; db = a^T . g
            let bt = transpose_raw(vb.data(), k, n);
            let da = matmul_raw(gout.data(), &bt, m, n, k);
            let at = transpose_raw(va.data(), m, k);
            let db = matmul_raw(&at, gout.data(), k, m, n);
            accumulate(g, *a, Tensor::new(vec![m, k], da).unwrap());
            accumulate(g, *b, Tensor::new(vec![k, n], db).unwrap());
        }
        Op::Transpose(a) => {
            let va = &nodes[*a].value;
            let (m, n) = (va.shape()[0], va.shape()[1]);
            let da = transpose_raw(gout.data(), n, m);
            accumulate(g, *a, Tensor::new(vec![m, n], da).unwrap());
        }
        Op::Reshape(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(
                g,
                *a,
                Tensor::new(shape, gout.data().to_vec()).unwrap(),
            );
        }
        Op::SoftmaxRows(a) => {
            let y = &nodes[idx].value;
            let (r, c) = (y.shape()[0], y.shape()[1]);
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                let yrow = &y.data()[i * c..(i + 1) * c];
                let grow = &gout.data()[i * c..(i + 1) * c];
                let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..c {
                    dx[i * c + j] = yrow[j] * (grow[j] - dot);
                }
            }
            accumulate(g, *a, Tensor::new(vec![r, c], dx).unwrap());
        }
        Op::Silu(a) => {
            let va = &nodes[*a].value;
            let dx = gout
                .zip_map(va, |gv, x| {
                    let s = sigmoid(x);
                    gv * (s + x * s * (1.0 - s))
                })
                .unwrap();
            accumulate(g, *a, dx);
        }
        Op::Relu(a) => {
            let va = &nodes[*a].value;
            let dx = gout
                .zip_map(va, |gv, x| if x > 0.0 { gv } else { 0.0 })
                .unwrap();
            accumulate(g, *a, dx);
        }
        Op::Sqrt(a) => {
            let y = &nodes[idx].value;
            let dx = gout.zip_map(y, |gv, yv| gv / (2.0 * yv)).unwrap();
            accumulate(g, *a, dx);
        }
        Op::Smoothstep { x, e0, e1 } => {
            let vx = &nodes[*x].value;
            let inv = 1.0 / (e1 - e0);
            let dx = vx
                .zip_map(gout, |xv, gv| {
                    let t = ((xv - e0) * inv).clamp(0.0, 1.0);
                    gv * 6.0 * t * (1.0 - t) * inv
                })
                .unwrap();
            accumulate(g, *x, dx);
        }
        Op::Sum(a) => {
            let shape = nodes[*a].value.shape().to_vec();
            accumulate(g, *a, Tensor::full(&shape, gout.item()));
        }
        Op::Mean(a) => {
            let va = &nodes[*a].value;
            let n = va.numel() as f64;
            accumulate(g, *a, Tensor::full(va.shape(), gout.item() / n));
        }
        Op::Conv3x3 { x, w } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let (dx, dw) = conv3x3_bwd(vx, vw, gout);
            accumulate(g, *x, dx);
            accumulate(g, *w, dw);
        }
        Op::AddChannelBias { x, b } => {
            accumulate(g, *x, gout.clone());
            let (c, h, w) = {
                let s = nodes[*x].value.shape();
                (s[0], s[1], s[2])
            };
            let mut db = Tensor::zeros(&[c]);
            for ch in 0..c {
                db.data_mut()[ch] = gout.data()[ch * h * w..(ch + 1) * h * w].iter().sum();
            }
            accumulate(g, *b, db);
        }
        Op::AddRowBias { x, b } => {
            accumulate(g, *x, gout.clone());
            let (r, c) = {
                let s = nodes[*x].value.shape();
                (s[0], s[1])
            };
            let mut db = Tensor::zeros(&[c]);
            for i in 0..r {
                for j in 0..c {
                    db.data_mut()[j] += gout.data()[i * c + j];
                }
            }
            accumulate(g, *b, db);
        }
        Op::AvgPool2(a) => {
            let va = &nodes[*a].value;
            let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let (ho, wo) = (h / 2, w / 2);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let gv = gout.data()[(ch * ho + i) * wo + j] * 0.25;
                        for di in 0..2 {
                            for dj in 0..2 {
                                dx.data_mut()[(ch * h + 2 * i + di) * w + 2 * j + dj] += gv;
                            }
                        }
                    }
                }
            }
            accumulate(g, *a, dx);
        }
        Op::Upsample2(a) => {
            let va = &nodes[*a].value;
            let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let (ho, wo) = (h * 2, w * 2);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        dx.data_mut()[(ch * h + i / 2) * w + j / 2] +=
                            gout.data()[(ch * ho + i) * wo + j];
                    }
                }
            }
            accumulate(g, *a, dx);
        }
        Op::ConcatChannels(a, b) => {
            let (ca, hw) = {
                let s = nodes[*a].value.shape();
                (s[0], s[1] * s[2])
            };
            let shape_a = nodes[*a].value.shape().to_vec();
            let shape_b = nodes[*b].value.shape().to_vec();
            let split = ca * hw;
            accumulate(
                g,
                *a,
                Tensor::new(shape_a, gout.data()[..split].to_vec()).unwrap(),
            );
            accumulate(
                g,
                *b,
                Tensor::new(shape_b, gout.data()[split..].to_vec()).unwrap(),
            );
        }
        Op::CropSpatial { x, y0, x0 } => {
            let vx = &nodes[*x].value;
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let (hc, wc) = (gout.shape()[1], gout.shape()[2]);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for i in 0..hc {
                    for j in 0..wc {
                        dx.data_mut()[(ch * h + y0 + i) * w + x0 + j] +=
                            gout.data()[(ch * hc + i) * wc + j];
                    }
                }
            }
            accumulate(g, *x, dx);
        }
        Op::SliceChannels { x, c0 } => {
            let vx = &nodes[*x].value;
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let len = gout.shape()[0];
            let mut dx = Tensor::zeros(&[c, h, w]);
            let hw = h * w;
            dx.data_mut()[c0 * hw..(c0 + len) * hw].copy_from_slice(gout.data());
            accumulate(g, *x, dx);
        }
        Op::SetRow { x, row, v } => {
            let c = nodes[*v].value.numel();
            let mut dx = gout.clone();
            dx.data_mut()[row * c..(row + 1) * c].fill(0.0);
            accumulate(g, *x, dx);
            accumulate(
                g,
                *v,
                Tensor::new(vec![c], gout.data()[row * c..(row + 1) * c].to_vec()).unwrap(),
            );
        }
        Op::SelectRow { x, row } => {
            let vx = &nodes[*x].value;
            let (r, c) = (vx.shape()[0], vx.shape()[1]);
            let mut dx = Tensor::zeros(&[r, c]);
            dx.data_mut()[row * c..(row + 1) * c].copy_from_slice(gout.data());
            accumulate(g, *x, dx);
        }
        Op::SelectCol { x, col } => {
            let vx = &nodes[*x].value;
            let (r, c) = (vx.shape()[0], vx.shape()[1]);
            let mut dx = Tensor::zeros(&[r, c]);
            for i in 0..r {
                dx.data_mut()[i * c + col] = gout.data()[i];
            }
            accumulate(g, *x, dx);
        }
        Op::SumChannels(a) => {
            let va = &nodes[*a].value;
            let (c, h, w) = (va.shape()[0], va.shape()[1], va.shape()[2]);
            let mut dx = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                dx.data_mut()[ch * h * w..(ch + 1) * h * w].copy_from_slice(gout.data());
            }
            accumulate(g, *a, dx);
        }
        Op::BroadcastChanMul { x, s } => {
            let (vx, vs) = (&nodes[*x].value, &nodes[*s].value);
            let (c, h, w) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
            let hw = h * w;
            let mut dx = gout.clone();
            let mut ds = Tensor::zeros(&[1, h, w]);
            for ch in 0..c {
                for i in 0..hw {
                    ds.data_mut()[i] += gout.data()[ch * hw + i] * vx.data()[ch * hw + i];
                    dx.data_mut()[ch * hw + i] *= vs.data()[i];
                }
            }
            accumulate(g, *x, dx);
            accumulate(g, *s, ds);
        }
        Op::Concat1(inputs) => {
            let mut off = 0;
            for &inp in inputs {
                let n = nodes[inp].value.numel();
                accumulate(
                    g,
                    inp,
                    Tensor::new(vec![n], gout.data()[off..off + n].to_vec()).unwrap(),
                );
                off += n;
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn value(self) -> Tensor {
        self.tape.value(self)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.with_value(self.idx, |v| v.shape().to_vec())
    }

    fn same_tape(self, other: Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self
            .tape
            .with_values2(self.idx, rhs.idx, |a, b| a.add(b).expect("add shapes"));
        self.tape.push(v, Op::Add(self.idx, rhs.idx))
    }

    pub fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self
            .tape
            .with_values2(self.idx, rhs.idx, |a, b| a.sub(b).expect("sub shapes"));
        self.tape.push(v, Op::Sub(self.idx, rhs.idx))
    }

    pub fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self.tape.with_values2(self.idx, rhs.idx, |a, b| {
            a.zip_map(b, |x, y| x * y).expect("mul shapes")
        });
        self.tape.push(v, Op::Mul(self.idx, rhs.idx))
    }

    pub fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self.tape.with_values2(self.idx, rhs.idx, |a, b| {
            a.zip_map(b, |x, y| x / y).expect("div shapes")
        });
        self.tape.push(v, Op::Div(self.idx, rhs.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| a.scale(c));
        self.tape.push(v, Op::Scale(self.idx, c))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x + c));
        self.tape.push(v, Op::AddScalar(self.idx))
    }

    pub fn mul_const(self, m: &Tensor) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            a.zip_map(m, |x, y| x * y).expect("mul_const shapes")
        });
        self.tape.push(v, Op::MulConst(self.idx, m.clone()))
    }

    pub fn mul_scalar_var(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(s);
        let v = self.tape.with_values2(self.idx, s.idx, |a, sv| {
            assert_eq!(sv.numel(), 1, "mul_scalar_var rhs must be scalar");
            a.scale(sv.item())
        });
        self.tape.push(v, Op::MulScalarVar { x: self.idx, s: s.idx })
    }

    pub fn add_scalar_var(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(s);
        let v = self.tape.with_values2(self.idx, s.idx, |a, sv| {
            assert_eq!(sv.numel(), 1, "add_scalar_var rhs must be scalar");
            a.map(|x| x + sv.item())
        });
        self.tape.push(v, Op::AddScalarVar { x: self.idx, s: s.idx })
    }

    pub fn mul_channel_vec(self, v: Var<'t>) -> Var<'t> {
        self.same_tape(v);
        let out = self.tape.with_values2(self.idx, v.idx, |x, vv| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(vv.numel(), c, "channel vec length");
            let mut y = x.clone();
            for ch in 0..c {
                let f = vv.data()[ch];
                for e in &mut y.data_mut()[ch * h * w..(ch + 1) * h * w] {
                    *e *= f;
                }
            }
            y
        });
        self.tape.push(out, Op::MulChannelVec { x: self.idx, v: v.idx })
    }

    pub fn matmul(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self.tape.with_values2(self.idx, rhs.idx, |a, b| {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let (k2, n) = (b.shape()[0], b.shape()[1]);
            assert_eq!(k, k2, "matmul inner dims");
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n)).unwrap()
        });
        self.tape.push(v, Op::Matmul(self.idx, rhs.idx))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            let (m, n) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![n, m], transpose_raw(a.data(), m, n)).unwrap()
        });
        self.tape.push(v, Op::Transpose(self.idx))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            a.clone().reshaped(shape.to_vec()).expect("reshape numel")
        });
        self.tape.push(v, Op::Reshape(self.idx))
    }

    /// Row-wise softmax of an [R,C] matrix, max-subtracted for stability.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &a.data()[i * c..(i + 1) * c];
                let m = row.iter().fold(f64::NEG_INFINITY, |x, &y| x.max(y));
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    out[i * c + j] /= z;
                }
            }
            Tensor::new(vec![r, c], out).unwrap()
        });
        self.tape.push(v, Op::SoftmaxRows(self.idx))
    }

    pub fn silu(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x * sigmoid(x)));
        self.tape.push(v, Op::Silu(self.idx))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| a.map(|x| x.max(0.0)));
        self.tape.push(v, Op::Relu(self.idx))
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| a.map(f64::sqrt));
        self.tape.push(v, Op::Sqrt(self.idx))
    }

    pub fn smoothstep(self, e0: f64, e1: f64) -> Var<'t> {
        assert!(e1 > e0, "smoothstep edges must be ordered");
        let v = self.tape.with_value(self.idx, |a| {
            a.map(|x| {
                let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
                t * t * (3.0 - 2.0 * t)
            })
        });
        self.tape.push(v, Op::Smoothstep { x: self.idx, e0, e1 })
    }

    pub fn sum(self) -> Var<'t> {
        let v = self
            .tape
            .with_value(self.idx, |a| Tensor::scalar(a.data().iter().sum()));
        self.tape.push(v, Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |a| {
            Tensor::scalar(a.data().iter().sum::<f64>() / a.numel() as f64)
        });
        self.tape.push(v, Op::Mean(self.idx))
    }

    pub fn conv3x3(self, w: Var<'t>) -> Var<'t> {
        self.same_tape(w);
        let v = self
            .tape
            .with_values2(self.idx, w.idx, conv3x3_fwd);
        self.tape.push(v, Op::Conv3x3 { x: self.idx, w: w.idx })
    }

    pub fn add_channel_bias(self, b: Var<'t>) -> Var<'t> {
        self.same_tape(b);
        let v = self.tape.with_values2(self.idx, b.idx, |x, bv| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(bv.numel(), c, "channel bias length");
            let mut y = x.clone();
            for ch in 0..c {
                let add = bv.data()[ch];
                for e in &mut y.data_mut()[ch * h * w..(ch + 1) * h * w] {
                    *e += add;
                }
            }
            y
        });
        self.tape.push(v, Op::AddChannelBias { x: self.idx, b: b.idx })
    }

    pub fn add_row_bias(self, b: Var<'t>) -> Var<'t> {
        self.same_tape(b);
        let v = self.tape.with_values2(self.idx, b.idx, |x, bv| {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            assert_eq!(bv.numel(), c, "row bias length");
            let mut y = x.clone();
            for i in 0..r {
                for j in 0..c {
                    y.data_mut()[i * c + j] += bv.data()[j];
                }
            }
            y
        });
        self.tape.push(v, Op::AddRowBias { x: self.idx, b: b.idx })
    }

    pub fn avg_pool2(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
            let (ho, wo) = (h / 2, w / 2);
            let mut y = Tensor::zeros(&[c, ho, wo]);
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for di in 0..2 {
                            for dj in 0..2 {
                                acc += x.data()[(ch * h + 2 * i + di) * w + 2 * j + dj];
                            }
                        }
                        y.data_mut()[(ch * ho + i) * wo + j] = acc * 0.25;
                    }
                }
            }
            y
        });
        self.tape.push(v, Op::AvgPool2(self.idx))
    }

    pub fn upsample2(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (h * 2, w * 2);
            let mut y = Tensor::zeros(&[c, ho, wo]);
            for ch in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        y.data_mut()[(ch * ho + i) * wo + j] = x.data()[(ch * h + i / 2) * w + j / 2];
                    }
                }
            }
            y
        });
        self.tape.push(v, Op::Upsample2(self.idx))
    }

    pub fn concat_channels(self, rhs: Var<'t>) -> Var<'t> {
        self.same_tape(rhs);
        let v = self.tape.with_values2(self.idx, rhs.idx, |a, b| {
            assert_eq!(a.shape()[1..], b.shape()[1..], "concat spatial dims");
            let mut data = a.data().to_vec();
            data.extend_from_slice(b.data());
            Tensor::new(
                vec![a.shape()[0] + b.shape()[0], a.shape()[1], a.shape()[2]],
                data,
            )
            .unwrap()
        });
        self.tape.push(v, Op::ConcatChannels(self.idx, rhs.idx))
    }

    pub fn crop_spatial(self, y0: usize, x0: usize, h: usize, w: usize) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (c, hh, ww) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert!(y0 + h <= hh && x0 + w <= ww, "crop window out of bounds");
            let mut y = Tensor::zeros(&[c, h, w]);
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        y.data_mut()[(ch * h + i) * w + j] =
                            x.data()[(ch * hh + y0 + i) * ww + x0 + j];
                    }
                }
            }
            y
        });
        self.tape.push(v, Op::CropSpatial { x: self.idx, y0, x0 })
    }

    pub fn slice_channels(self, c0: usize, len: usize) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert!(c0 + len <= c, "channel slice out of bounds");
            Tensor::new(
                vec![len, h, w],
                x.data()[c0 * h * w..(c0 + len) * h * w].to_vec(),
            )
            .unwrap()
        });
        self.tape.push(v, Op::SliceChannels { x: self.idx, c0 })
    }

    pub fn set_row(self, row: usize, v: Var<'t>) -> Var<'t> {
        self.same_tape(v);
        let out = self.tape.with_values2(self.idx, v.idx, |x, vv| {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            assert!(row < r, "set_row out of bounds");
            assert_eq!(vv.numel(), c, "set_row width");
            let mut y = x.clone();
            y.data_mut()[row * c..(row + 1) * c].copy_from_slice(vv.data());
            y
        });
        self.tape.push(out, Op::SetRow { x: self.idx, row, v: v.idx })
    }

    pub fn select_row(self, row: usize) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let c = x.shape()[1];
            Tensor::new(vec![c], x.data()[row * c..(row + 1) * c].to_vec()).unwrap()
        });
        self.tape.push(v, Op::SelectRow { x: self.idx, row })
    }

    pub fn select_col(self, col: usize) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let data = (0..r).map(|i| x.data()[i * c + col]).collect();
            Tensor::new(vec![r], data).unwrap()
        });
        self.tape.push(v, Op::SelectCol { x: self.idx, col })
    }

    pub fn sum_channels(self) -> Var<'t> {
        let v = self.tape.with_value(self.idx, |x| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut y = Tensor::zeros(&[1, h, w]);
            for ch in 0..c {
                for i in 0..h * w {
                    y.data_mut()[i] += x.data()[ch * h * w + i];
                }
            }
            y
        });
        self.tape.push(v, Op::SumChannels(self.idx))
    }

    pub fn broadcast_chan_mul(self, s: Var<'t>) -> Var<'t> {
        self.same_tape(s);
        let v = self.tape.with_values2(self.idx, s.idx, |x, sv| {
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            assert_eq!(sv.shape(), &[1, h, w], "broadcast map shape");
            let mut y = x.clone();
            for ch in 0..c {
                for i in 0..h * w {
                    y.data_mut()[ch * h * w + i] *= sv.data()[i];
                }
            }
            y
        });
        self.tape
            .push(v, Op::BroadcastChanMul { x: self.idx, s: s.idx })
    }
}

/// Concatenate flattened vars into one vector.
pub fn concat1<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let mut data = Vec::new();
    for p in parts {
        data.extend_from_slice(p.value().data());
    }
    let idxs = parts.iter().map(|p| p.idx).collect();
    let n = data.len();
    tape.push(Tensor::new(vec![n], data).unwrap(), Op::Concat1(idxs))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

pub(crate) fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

fn conv3x3_fwd(x: &Tensor, w: &Tensor) -> Tensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert_eq!(w.shape()[1], c_in, "conv weight in-channels");
    assert_eq!(&w.shape()[2..], &[3, 3], "conv kernel is 3x3");
    let c_out = w.shape()[0];
    let mut y = Tensor::zeros(&[c_out, h, wd]);
    for oc in 0..c_out {
        for c in 0..c_in {
            let w9 = &w.data()[(oc * c_in + c) * 9..(oc * c_in + c) * 9 + 9];
            for p in 0..3usize {
                let i_lo = 1usize.saturating_sub(p);
                let i_hi = (h + 1).saturating_sub(p).min(h);
                for i in i_lo..i_hi {
                    let iy = i + p - 1;
                    let xrow = &x.data()[(c * h + iy) * wd..(c * h + iy + 1) * wd];
                    let yo = (oc * h + i) * wd;
                    for q in 0..3usize {
                        let wv = w9[p * 3 + q];
                        if wv == 0.0 {
                            continue;
                        }
                        let j_lo = 1usize.saturating_sub(q);
                        let j_hi = (wd + 1).saturating_sub(q).min(wd);
                        let yrow = &mut y.data_mut()[yo + j_lo..yo + j_hi];
                        let xs = &xrow[j_lo + q - 1..j_hi + q - 1];
                        for (ye, &xe) in yrow.iter_mut().zip(xs) {
                            *ye += wv * xe;
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv3x3_bwd(x: &Tensor, w: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[0];
    let mut dx = Tensor::zeros(&[c_in, h, wd]);
    let mut dw = Tensor::zeros(&[c_out, c_in, 3, 3]);
    for oc in 0..c_out {
        for c in 0..c_in {
            let w9 = &w.data()[(oc * c_in + c) * 9..(oc * c_in + c) * 9 + 9];
            let dw9_base = (oc * c_in + c) * 9;
            for p in 0..3usize {
                let i_lo = 1usize.saturating_sub(p);
                let i_hi = (h + 1).saturating_sub(p).min(h);
                for i in i_lo..i_hi {
                    let iy = i + p - 1;
                    let go = (oc * h + i) * wd;
                    let xo = (c * h + iy) * wd;
                    for q in 0..3usize {
                        let j_lo = 1usize.saturating_sub(q);
                        let j_hi = (wd + 1).saturating_sub(q).min(wd);
                        let wv = w9[p * 3 + q];
                        let grow = &gout.data()[go + j_lo..go + j_hi];
                        // dx over the shifted window
                        {
                            let dxs = &mut dx.data_mut()[xo + j_lo + q - 1..xo + j_hi + q - 1];
                            if wv != 0.0 {
                                for (de, &ge) in dxs.iter_mut().zip(grow) {
                                    *de += wv * ge;
                                }
                            }
                        }
                        // dw accumulation
                        let xs = &x.data()[xo + j_lo + q - 1..xo + j_hi + q - 1];
                        let mut acc = 0.0;
                        for (&ge, &xe) in grow.iter().zip(xs) {
                            acc += ge * xe;
                        }
                        dw.data_mut()[dw9_base + p * 3 + q] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}
