//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse and returns gradients for
//! every node that requires them. Feature maps use channel-major `[C, H, W]` layout,
//! so channel concatenation and slicing are contiguous copies.

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::{Float, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// Operation tape.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T> Copy for Var<'_, T> {}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            parents,
            backward: if requires_grad { backward } else { None },
        });
        Var { graph: self, id }
    }

    /// Value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), false, None)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_node(value, Vec::new(), true, None)
    }

    fn op<'g>(
        &'g self,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'g, T> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        self.push_node(value, ids, requires_grad, Some(Box::new(backward)))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let out_shape = nodes[output.id].value.shape().to_vec();
        grads[output.id] = Some(Tensor::full(&out_shape, T::ONE));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = bw(&g, &mask);
            for ((&p, pg), need) in node.parents.iter().zip(parent_grads).zip(&mask) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor::new(
        a.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Replicate-padded im2col: `[C, H, W]` → `[C*k*k, Ho*Wo]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Float>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw = ho * wo;
    let xs = ColumnIndex::new(w, k, stride, pad, wo);
    let ys = ColumnIndex::new(h, k, stride, pad, ho);
    let mut cols = vec![T::ZERO; c * k * k * hw];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let idx = xs.row(kx);
                for (oy, drow) in dst.chunks_exact_mut(wo).enumerate() {
                    let iy = ys.row(ky)[oy];
                    let src = &plane[iy * w..(iy + 1) * w];
                    if let Some((lo, hi, first)) = xs.contiguous(kx) {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        for ox in (0..lo).chain(hi..wo) {
                            drow[ox] = src[idx[ox]];
                        }
                    } else {
                        for (d, &ix) in drow.iter_mut().zip(idx) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Clamped source index of every output position, per kernel offset.
struct ColumnIndex {
    table: Vec<usize>,
    out: usize,
    /// Per offset: output range `[lo, hi)` reading consecutive unclamped inputs from `first`.
    runs: Vec<Option<(usize, usize, usize)>>,
}

impl ColumnIndex {
    fn new(size: usize, k: usize, stride: usize, pad: usize, out: usize) -> Self {
        let mut table = Vec::with_capacity(k * out);
        let mut runs = Vec::with_capacity(k);
        for kk in 0..k {
            let pos = |o: usize| (o * stride + kk) as isize - pad as isize;
            table.extend((0..out).map(|o| pos(o).clamp(0, size as isize - 1) as usize));
            let inside: Vec<usize> = (0..out).filter(|&o| pos(o) >= 0 && pos(o) < size as isize).collect();
            runs.push(match (stride, inside.first(), inside.last()) {
                (1, Some(&lo), Some(&hi)) => Some((lo, hi + 1, pos(lo) as usize)),
                _ => None,
            });
        }
        Self { table, out, runs }
    }

    fn row(&self, kk: usize) -> &[usize] {
        &self.table[kk * self.out..(kk + 1) * self.out]
    }

    fn contiguous(&self, kk: usize) -> Option<(usize, usize, usize)> {
        self.runs[kk]
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let hw = ho * wo;
    let xs = ColumnIndex::new(w, k, stride, pad, wo);
    let ys = ColumnIndex::new(h, k, stride, pad, ho);
    let mut x = vec![T::ZERO; c * h * w];
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let idx = xs.row(kx);
                for (oy, srow) in src.chunks_exact(wo).enumerate() {
                    let iy = ys.row(ky)[oy];
                    let dst = &mut plane[iy * w..(iy + 1) * w];
                    if let Some((lo, hi, first)) = xs.contiguous(kx) {
                        for (d, &v) in dst[first..first + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                        for ox in (0..lo).chain(hi..wo) {
                            dst[idx[ox]] += srow[ox];
                        }
                    } else {
                        for (&ix, &v) in idx.iter().zip(srow) {
                            dst[ix] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, T: Float> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.data()[0]
    }

    /// Copy of the value with no history.
    pub fn detach(&self) -> Var<'g, T> {
        self.graph.constant((*self.value()).clone())
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value(), &other.value(), |a, b| a + b);
        self.graph
            .op(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = zip_map(&self.value(), &other.value(), |a, b| a - b);
        self.graph.op(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        let out = zip_map(&a, &b, |x, y| x * y);
        self.graph.op(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| zip_map(g, &b, |gv, bv| gv * bv)),
                need[1].then(|| zip_map(g, &a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64(c);
        let out = self.value().map(|v| v * c);
        self.graph.op(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::from_f64(c);
        let out = self.value().map(|v| v + c);
        self.graph.op(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.exp());
        let y = out.clone();
        self.graph
            .op(out, &[self], move |g, _| vec![Some(zip_map(g, &y, |a, b| a * b))])
    }

    pub fn sqr(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::from_f64(2.0);
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |a, b| a * two * b))]
        })
    }

    pub fn abs(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |a, b| a * b.signum()))]
        })
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.sigmoid());
        let y = out.clone();
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &y, |a, s| a * s * (T::ONE - s)))]
        })
    }

    pub fn tanh(self) -> Var<'g, T> {
        let out = self.value().map(|v| v.tanh());
        let y = out.clone();
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &y, |a, t| a * (T::ONE - t * t)))]
        })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'g, T> {
        let s = T::from_f64(slope);
        let x = self.value();
        let out = x.map(|v| if v > T::ZERO { v } else { v * s });
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |a, v| if v > T::ZERO { a } else { a * s }))]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(0.0)
    }

    /// Clamp to `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (lo, hi) = (T::from_f64(lo), T::from_f64(hi));
        let x = self.value();
        let out = x.map(|v| v.max(lo).min(hi));
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(zip_map(g, &x, |a, v| {
                if v < lo || v > hi {
                    T::ZERO
                } else {
                    a
                }
            }))]
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.numel();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph.op(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(&old))]
        })
    }

    /// Concatenate along the leading axis. Trailing dimensions must agree.
    pub fn concat(parts: &[Var<'g, T>]) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let graph = parts[0].graph;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(values.len());
        for v in &values {
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        graph.op(Tensor::new(&shape, data), parts, move |g, need| {
            let mut off = 0;
            sizes
                .iter()
                .zip(&shapes)
                .zip(need)
                .map(|((&n, s), &nd)| {
                    let r = nd.then(|| Tensor::new(s, g.data()[off..off + n].to_vec()));
                    off += n;
                    r
                })
                .collect()
        })
    }

    /// Rows `[start, start+len)` of the leading axis.
    pub fn narrow(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let inner: usize = shape[1..].iter().product();
        assert!(start + len <= shape[0], "narrow out of range");
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        let out = Tensor::new(
            &out_shape,
            x.data()[start * inner..(start + len) * inner].to_vec(),
        );
        self.graph.op(out, &[self], move |g, _| {
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[start * inner..(start + len) * inner].copy_from_slice(g.data());
            vec![Some(full)]
        })
    }

    /// Row `idx` of a 2-D table, as a vector.
    pub fn select_row(self, idx: usize) -> Var<'g, T> {
        let shape = self.shape();
        assert_eq!(shape.len(), 2, "select_row expects a 2-D table");
        self.narrow(idx, 1).reshape(&[shape[1]])
    }

    /// Element `idx` of a flat view, as a one-element tensor.
    pub fn index(self, idx: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.data()[idx]);
        self.graph.op(out, &[self], move |g, _| {
            let mut full = Tensor::zeros(&shape);
            full.data_mut()[idx] = g.data()[0];
            vec![Some(full)]
        })
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = other.value();
        assert!(a.shape().len() == 2 && b.shape().len() == 2, "matmul expects 2-D");
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(b.shape()[0], k, "matmul inner dimension mismatch");
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, T::ONE, a.data(), false, b.data(), false, T::ZERO, &mut out);
        self.graph
            .op(Tensor::new(&[m, n], out), &[self, other], move |g, need| {
                let ga = need[0].then(|| {
                    let mut d = vec![T::ZERO; m * k];
                    T::gemm(m, n, k, T::ONE, g.data(), false, b.data(), true, T::ZERO, &mut d);
                    Tensor::new(&[m, k], d)
                });
                let gb = need[1].then(|| {
                    let mut d = vec![T::ZERO; k * n];
                    T::gemm(k, m, n, T::ONE, a.data(), true, g.data(), false, T::ZERO, &mut d);
                    Tensor::new(&[k, n], d)
                });
                vec![ga, gb]
            })
    }

    /// Apply a fixed linear map over the spatial positions of a `[C, P_in]` (or `[C, H, W]`)
    /// feature map: `out[c, q] = Σ_p map[q, p] · x[c, p]`. Output is `[C, P_out]`.
    pub fn spatial_map(self, map: Rc<Tensor<T>>) -> Var<'g, T> {
        let x = self.value();
        let c = x.shape()[0];
        let p_in = x.len() / c;
        let (p_out, p_in_m) = (map.shape()[0], map.shape()[1]);
        assert_eq!(p_in, p_in_m, "spatial_map position count mismatch");
        let mut out = vec![T::ZERO; c * p_out];
        T::gemm(c, p_in, p_out, T::ONE, x.data(), false, map.data(), true, T::ZERO, &mut out);
        let in_shape = x.shape().to_vec();
        self.graph
            .op(Tensor::new(&[c, p_out], out), &[self], move |g, _| {
                let mut d = vec![T::ZERO; c * p_in];
                T::gemm(c, p_out, p_in, T::ONE, g.data(), false, map.data(), false, T::ZERO, &mut d);
                vec![Some(Tensor::new(&in_shape, d))]
            })
    }

    /// Multiply every channel of a `[C, ...]` map by the same fixed spatial mask.
    pub fn mask_spatial(self, mask: Rc<Tensor<T>>) -> Var<'g, T> {
        let x = self.value();
        let p = mask.len();
        assert_eq!(x.len() % p, 0, "mask size does not divide feature map");
        let apply = move |src: &Tensor<T>, mask: &Tensor<T>| {
            let mut out = src.clone();
            for chunk in out.data_mut().chunks_mut(p) {
                for (v, &m) in chunk.iter_mut().zip(mask.data()) {
                    *v *= m;
                }
            }
            out
        };
        let out = apply(&x, &mask);
        self.graph
            .op(out, &[self], move |g, _| vec![Some(apply(g, &mask))])
    }

    /// Mean over all positions of each channel: `[C, ...]` → `[C]`.
    pub fn mean_spatial(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = shape[0];
        let p = x.len() / c;
        let inv = T::from_f64(1.0 / p as f64);
        let out: Vec<T> = x
            .data()
            .chunks(p)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.graph.op(Tensor::new(&[c], out), &[self], move |g, _| {
            let mut d = Vec::with_capacity(c * p);
            for &gv in g.data() {
                d.extend(std::iter::repeat_n(gv * inv, p));
            }
            vec![Some(Tensor::new(&shape, d))]
        })
    }

    /// 2-D convolution of a `[C, H, W]` map with `[Co, C, k, k]` weights and
    /// replicate padding. Replicate padding keeps a constant input constant.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, ci, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
        assert_eq!(ci, c, "conv2d channel mismatch: input {c}, weight {ci}");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let hw = ho * wo;
        let ckk = c * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let cols: Rc<Vec<T>> = if direct {
            Rc::new(x.data().to_vec())
        } else {
            Rc::new(im2col(x.data(), c, h, wd, k, stride, pad, ho, wo))
        };
        let mut out = vec![T::ZERO; co * hw];
        T::gemm(co, ckk, hw, T::ONE, w.data(), false, &cols, false, T::ZERO, &mut out);
        let mut parents = vec![self, weight];
        if let Some(b) = bias {
            let bv = b.value();
            for (row, &bb) in out.chunks_mut(hw).zip(bv.data()) {
                for v in row {
                    *v += bb;
                }
            }
            parents.push(b);
        }
        let has_bias = bias.is_some();
        let wshape = w.shape().to_vec();
        self.graph
            .op(Tensor::new(&[co, ho, wo], out), &parents, move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut dcols = vec![T::ZERO; ckk * hw];
                    T::gemm(ckk, co, hw, T::ONE, w.data(), true, gd, false, T::ZERO, &mut dcols);
                    let dx = if direct {
                        dcols
                    } else {
                        col2im(&dcols, c, h, wd, k, stride, pad, ho, wo)
                    };
                    Tensor::new(&[c, h, wd], dx)
                });
                let gw = need[1].then(|| {
                    let mut dw = vec![T::ZERO; co * ckk];
                    T::gemm(co, hw, ckk, T::ONE, gd, false, &cols, true, T::ZERO, &mut dw);
                    Tensor::new(&wshape, dw)
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(need[2].then(|| {
                        Tensor::new(&[co], gd.chunks(hw).map(|r| r.iter().copied().sum()).collect())
                    }));
                }
                res
            })
    }

    /// Nearest-neighbour 2x upsampling of a `[C, H, W]` map.
    pub fn upsample2x(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::ZERO; c * h2 * w2];
        for ci in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ci * h2 + y) * w2 + xx] = x.data()[(ci * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.graph
            .op(Tensor::new(&[c, h2, w2], out), &[self], move |g, _| {
                let mut d = vec![T::ZERO; c * h * w];
                for ci in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            d[(ci * h + y / 2) * w + xx / 2] += g.data()[(ci * h2 + y) * w2 + xx];
                        }
                    }
                }
                vec![Some(Tensor::new(&[c, h, w], d))]
            })
    }

    /// 2x2 max pooling with stride 2 of a `[C, H, W]` map (H, W even).
    pub fn max_pool2x2(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::ZERO; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ci in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (ci * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ci * h + 2 * y + dy) * w + 2 * xx + dx;
                        if x.data()[i] > x.data()[best] {
                            best = i;
                        }
                    }
                    let o = (ci * ho + y) * wo + xx;
                    out[o] = x.data()[best];
                    arg[o] = best;
                }
            }
        }
        let n = x.len();
        self.graph
            .op(Tensor::new(&[c, ho, wo], out), &[self], move |g, _| {
                let mut d = vec![T::ZERO; n];
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    d[a] += gv;
                }
                vec![Some(Tensor::new(&[c, h, w], d))]
            })
    }

    /// Adaptive instance normalization of a `[C, ...]` map:
    /// `scale_c · (x − μ_c) / (σ_c + eps) + bias_c` with population σ.
    pub fn adain(self, scale: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let s = scale.value();
        let b = bias.value();
        let shape = x.shape().to_vec();
        let c = shape[0];
        assert_eq!(s.len(), c, "adain scale length must equal channel count");
        assert_eq!(b.len(), c, "adain bias length must equal channel count");
        let p = x.len() / c;
        let eps = T::from_f64(eps);
        let inv_p = T::from_f64(1.0 / p as f64);
        let mut xhat = vec![T::ZERO; x.len()];
        let mut sigma = vec![T::ZERO; c];
        let mut out = vec![T::ZERO; x.len()];
        for ch in 0..c {
            let xs = &x.data()[ch * p..(ch + 1) * p];
            let mu = xs.iter().copied().sum::<T>() * inv_p;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_p;
            let sd = var.sqrt();
            sigma[ch] = sd;
            let r = T::ONE / (sd + eps);
            for i in 0..p {
                let xh = (xs[i] - mu) * r;
                xhat[ch * p + i] = xh;
                out[ch * p + i] = s.data()[ch] * xh + b.data()[ch];
            }
        }
        self.graph
            .op(Tensor::new(&shape, out), &[self, scale, bias], move |g, need| {
                let gd = g.data();
                let gx = need[0].then(|| {
                    let mut d = vec![T::ZERO; gd.len()];
                    for ch in 0..c {
                        let sd = sigma[ch];
                        let r = T::ONE / (sd + eps);
                        let gs = &gd[ch * p..(ch + 1) * p];
                        let xh = &xhat[ch * p..(ch + 1) * p];
                        let sc = s.data()[ch];
                        // dL/dxhat = g * scale; xhat = (x-μ)·r
                        let gmean = gs.iter().copied().sum::<T>() * sc * inv_p;
                        // Σ g·(x-μ) = Σ g·xhat/r
                        let gxc = gs.iter().zip(xh).map(|(&a, &h)| a * h).sum::<T>() * sc / r;
                        for i in 0..p {
                            let centered = xh[i] / r;
                            let mut v = r * (gs[i] * sc - gmean);
                            if sd > T::ZERO {
                                v -= r * r * gxc * centered * inv_p / sd;
                            }
                            d[ch * p + i] = v;
                        }
                    }
                    Tensor::new(&shape, d)
                });
                let gs = need[1].then(|| {
                    Tensor::new(
                        &[c],
                        (0..c)
                            .map(|ch| {
                                gd[ch * p..(ch + 1) * p]
                                    .iter()
                                    .zip(&xhat[ch * p..(ch + 1) * p])
                                    .map(|(&a, &h)| a * h)
                                    .sum()
                            })
                            .collect(),
                    )
                });
                let gb = need[2].then(|| {
                    Tensor::new(
                        &[c],
                        gd.chunks(p).map(|r| r.iter().copied().sum()).collect(),
                    )
                });
                vec![gx, gs, gb]
            })
    }

    /// Log-softmax of a flat vector.
    pub fn log_softmax(self) -> Var<'g, T> {
        let x = self.value();
        let mx = x.data().iter().copied().fold(x.data()[0], |a, b| a.max(b));
        let lse = x.data().iter().map(|&v| (v - mx).exp()).sum::<T>().ln() + mx;
        let out = x.map(|v| v - lse);
        let probs = out.map(|v| v.exp());
        self.graph.op(out, &[self], move |g, _| {
            let gs = g.sum();
            vec![Some(zip_map(g, &probs, |a, p| a - p * gs))]
        })
    }
}

impl<'g, T: Float> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Float> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Float> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

/// Sum a non-empty list of scalars.
pub fn sum_all<'g, T: Float>(terms: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!terms.is_empty(), "sum of no terms");
    Var::concat(
        &terms
            .iter()
            .map(|t| t.reshape(&[t.numel()]))
            .collect::<Vec<_>>(),
    )
    .sum()
}

pub mod gradcheck {
    //! Central finite-difference gradient checks for graph operations.
    use super::*;

    /// Relative error with a floor on the denominator so that gradients that are zero
    /// up to rounding do not blow the ratio up.
    pub fn rel_err(a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
    }

    /// Checks `d f / d inputs` for a scalar function built on a fresh graph.
    /// Returns the worst relative error over all input entries.
    pub fn check_fn<F>(inputs: &[Tensor<f64>], f: F) -> f64
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Var<'g, f64>,
    {
        let analytic: Vec<Tensor<f64>> = {
            let g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
            let out = f(&g, &vars);
            let grads = g.backward(out);
            vars.iter()
                .zip(inputs)
                .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect()
        };
        let eval = |inps: &[Tensor<f64>]| {
            let g = Graph::new();
            let vars: Vec<_> = inps.iter().map(|t| g.constant(t.clone())).collect();
            f(&g, &vars).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            for j in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                worst = worst.max(rel_err(analytic[i].data()[j], num));
            }
        }
        worst
    }
}
