//! Reverse-mode autodiff over whole tensors.
//!
//! A `Tape` records one computation; `backward` walks it once in reverse.
//! Values and gradients live in separate arenas so backward can borrow
//! parent values while accumulating parent gradients.

use std::sync::Arc;

use super::kernels;
use super::tensor::Tensor;

pub type VarId = usize;

trait BackwardOp {
    /// Gradients w.r.t. each parent given the node's value and incoming
    /// gradient.
    fn backward(&self, out_value: &Tensor, out_grad: &Tensor, parents: &[&Tensor]) -> Vec<Tensor>;
}

impl<F> BackwardOp for F
where
    F: Fn(&Tensor, &Tensor, &[&Tensor]) -> Vec<Tensor>,
{
    fn backward(&self, out_value: &Tensor, out_grad: &Tensor, parents: &[&Tensor]) -> Vec<Tensor> {
        self(out_value, out_grad, parents)
    }
}

struct Node {
    parents: Vec<VarId>,
    needs_grad: bool,
    back: Option<Box<dyn BackwardOp>>,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.values[id]
    }

    fn push(&mut self, value: Tensor, parents: Vec<VarId>, back: Box<dyn BackwardOp>) -> VarId {
        value.debug_check_finite("tape node");
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents,
            needs_grad,
            back: Some(back),
        });
        self.values.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> VarId {
        self.values.push(value);
        self.nodes.push(Node {
            parents: Vec::new(),
            needs_grad,
            back: None,
        });
        self.values.len() - 1
    }

    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.leaf(value, false)
    }

    fn zip2(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(a.dims(), b.dims());
        Tensor::from_vec(
            a.dims(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::zip2(&self.values[a], &self.values[b], |x, y| x + y);
        self.push(
            v,
            vec![a, b],
            Box::new(|_: &Tensor, g: &Tensor, _: &[&Tensor]| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::zip2(&self.values[a], &self.values[b], |x, y| x - y);
        self.push(
            v,
            vec![a, b],
            Box::new(|_: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let neg = Tensor::from_vec(g.dims(), g.data().iter().map(|&x| -x).collect());
                vec![g.clone(), neg]
            }),
        )
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::zip2(&self.values[a], &self.values[b], |x, y| x * y);
        self.push(
            v,
            vec![a, b],
            Box::new(|_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let ga = Self::zip2(g, p[1], |gi, y| gi * y);
                let gb = Self::zip2(g, p[0], |gi, x| gi * x);
                vec![ga, gb]
            }),
        )
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> VarId {
        let v = Self::zip2(&self.values[a], &self.values[b], |x, y| x / y);
        self.push(
            v,
            vec![a, b],
            Box::new(|out: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let ga = Self::zip2(g, p[1], |gi, y| gi / y);
                let mut gb = Tensor::zeros(p[1].dims());
                for i in 0..gb.len() {
                    gb.data_mut()[i] = -g.data()[i] * out.data()[i] / p[1].data()[i];
                }
                vec![ga, gb]
            }),
        )
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let mut acc = 0.0;
        for &v in self.values[a].data() {
            acc += v;
        }
        let dims = self.values[a].dims().to_vec();
        self.push(
            Tensor::scalar(acc),
            vec![a],
            Box::new(move |_: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let gi = g.item();
                vec![Tensor::from_vec(&dims, vec![gi; dims.iter().product()])]
            }),
        )
    }

    /// Collapse the leading axis: [d0, rest..] -> [rest..].
    pub fn sum_axis0(&mut self, a: VarId) -> VarId {
        let dims = self.values[a].dims().to_vec();
        let d0 = dims[0];
        let rest: usize = dims[1..].iter().product();
        let mut out = vec![0.0; rest];
        for i in 0..d0 {
            for j in 0..rest {
                out[j] += self.values[a].data()[i * rest + j];
            }
        }
        let out_dims: Vec<usize> = if dims.len() > 1 {
            dims[1..].to_vec()
        } else {
            vec![1]
        };
        self.push(
            Tensor::from_vec(&out_dims, out),
            vec![a],
            Box::new(move |_: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let mut gi = vec![0.0; d0 * rest];
                for i in 0..d0 {
                    gi[i * rest..(i + 1) * rest].copy_from_slice(g.data());
                }
                vec![Tensor::from_vec(&dims, gi)]
            }),
        )
    }

    /// Softmax over the leading axis, independently per trailing index.
    pub fn softmax_axis0(&mut self, a: VarId) -> VarId {
        let dims = self.values[a].dims().to_vec();
        let d0 = dims[0];
        let rest: usize = dims[1..].iter().product();
        let x = self.values[a].data();
        let mut out = vec![0.0; x.len()];
        for j in 0..rest {
            let mut max = f64::NEG_INFINITY;
            for i in 0..d0 {
                max = max.max(x[i * rest + j]);
            }
            let mut z = 0.0;
            for i in 0..d0 {
                let e = (x[i * rest + j] - max).exp();
                out[i * rest + j] = e;
                z += e;
            }
            for i in 0..d0 {
                out[i * rest + j] /= z;
            }
        }
        self.push(
            Tensor::from_vec(&dims, out),
            vec![a],
            Box::new(move |y: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let mut gx = vec![0.0; y.len()];
                for j in 0..rest {
                    let mut dot = 0.0;
                    for i in 0..d0 {
                        dot += g.data()[i * rest + j] * y.data()[i * rest + j];
                    }
                    for i in 0..d0 {
                        let idx = i * rest + j;
                        gx[idx] = y.data()[idx] * (g.data()[idx] - dot);
                    }
                }
                vec![Tensor::from_vec(y.dims(), gx)]
            }),
        )
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = Tensor::from_vec(
            self.values[a].dims(),
            self.values[a].data().iter().map(|&x| kernels::softplus(x)).collect(),
        );
        self.push(
            v,
            vec![a],
            Box::new(|_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                vec![Self::zip2(g, p[0], |gi, x| gi * kernels::sigmoid(x))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = Tensor::from_vec(
            self.values[a].dims(),
            self.values[a]
                .data()
                .iter()
                .map(|&x| kernels::leaky_relu(x, slope))
                .collect(),
        );
        self.push(
            v,
            vec![a],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                vec![Self::zip2(g, p[0], |gi, x| {
                    if x >= 0.0 {
                        gi
                    } else {
                        gi * slope
                    }
                })]
            }),
        )
    }

    /// log2(max(x, floor)); zero gradient in the clamped region.
    pub fn log2_clamped(&mut self, a: VarId, floor: f64) -> VarId {
        let v = Tensor::from_vec(
            self.values[a].dims(),
            self.values[a].data().iter().map(|&x| x.max(floor).log2()).collect(),
        );
        self.push(
            v,
            vec![a],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                vec![Self::zip2(g, p[0], |gi, x| {
                    if x > floor {
                        gi / (x * std::f64::consts::LN_2)
                    } else {
                        0.0
                    }
                })]
            }),
        )
    }

    /// sigma(hi) - sigma(lo) with the outer bin edges clipped to the tails:
    /// where `lower_clipped` the lower term is 0, where `upper_clipped` the
    /// upper term is 1. Masked slots get zero gradient.
    pub fn edge_sigmoid_diff(
        &mut self,
        lo: VarId,
        hi: VarId,
        lower_clipped: Arc<Vec<bool>>,
        upper_clipped: Arc<Vec<bool>>,
    ) -> VarId {
        let lo_t = &self.values[lo];
        let hi_t = &self.values[hi];
        debug_assert_eq!(lo_t.dims(), hi_t.dims());
        debug_assert_eq!(lo_t.len(), lower_clipped.len());
        let mut out = vec![0.0; lo_t.len()];
        for i in 0..out.len() {
            out[i] = match (lower_clipped[i], upper_clipped[i]) {
                (true, true) => 1.0,
                (true, false) => kernels::sigmoid(hi_t.data()[i]),
                (false, true) => kernels::sigmoid(-lo_t.data()[i]),
                (false, false) => {
                    crate::entropy::logistic_cdf_diff(lo_t.data()[i], hi_t.data()[i])
                }
            };
        }
        let v = Tensor::from_vec(lo_t.dims(), out);
        let lc = Arc::clone(&lower_clipped);
        let uc = Arc::clone(&upper_clipped);
        self.push(
            v,
            vec![lo, hi],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let mut glo = Tensor::zeros(p[0].dims());
                let mut ghi = Tensor::zeros(p[1].dims());
                for i in 0..g.len() {
                    if !lc[i] {
                        glo.data_mut()[i] = -g.data()[i] * kernels::sigmoid_deriv(p[0].data()[i]);
                    }
                    if !uc[i] {
                        ghi.data_mut()[i] = g.data()[i] * kernels::sigmoid_deriv(p[1].data()[i]);
                    }
                }
                vec![glo, ghi]
            }),
        )
    }

    pub fn normal_cdf(&mut self, a: VarId) -> VarId {
        let v = Tensor::from_vec(
            self.values[a].dims(),
            self.values[a]
                .data()
                .iter()
                .map(|&x| super::normal_cdf(x))
                .collect(),
        );
        self.push(
            v,
            vec![a],
            Box::new(|_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                vec![Self::zip2(g, p[0], |gi, x| gi * super::normal_pdf(x))]
            }),
        )
    }

    /// out[i] = src[map[i]]. Covers slicing, channel regrouping and
    /// broadcasts; backward scatter-adds.
    pub fn gather_map(&mut self, src: VarId, map: Arc<Vec<usize>>, out_dims: &[usize]) -> VarId {
        debug_assert_eq!(out_dims.iter().product::<usize>(), map.len());
        let src_t = &self.values[src];
        let out: Vec<f64> = map.iter().map(|&i| src_t.data()[i]).collect();
        let v = Tensor::from_vec(out_dims, out);
        let src_dims = src_t.dims().to_vec();
        let m = Arc::clone(&map);
        self.push(
            v,
            vec![src],
            Box::new(move |_: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let mut gs = Tensor::zeros(&src_dims);
                for (i, &si) in m.iter().enumerate() {
                    gs.data_mut()[si] += g.data()[i];
                }
                vec![gs]
            }),
        )
    }

    /// Concatenate [Ci, H, W] maps along the channel axis.
    pub fn concat_axis0(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.values[parts[0]].chw();
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.values[p].chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            chans.push(c);
            data.extend_from_slice(self.values[p].data());
        }
        let total: usize = chans.iter().sum();
        let v = Tensor::from_vec(&[total, h, w], data);
        self.push(
            v,
            parts.to_vec(),
            Box::new(move |_: &Tensor, g: &Tensor, _: &[&Tensor]| {
                let mut out = Vec::with_capacity(chans.len());
                let mut offset = 0;
                for &c in &chans {
                    let n = c * h * w;
                    out.push(Tensor::from_vec(
                        &[c, h, w],
                        g.data()[offset..offset + n].to_vec(),
                    ));
                    offset += n;
                }
                out
            }),
        )
    }

    pub fn conv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
    ) -> VarId {
        let v = kernels::conv2d_forward(
            &self.values[input],
            &self.values[weight],
            &self.values[bias],
            stride,
            pad,
        );
        self.push(
            v,
            vec![input, weight, bias],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let (gi, gw, gb) = kernels::conv2d_backward(p[0], p[1], g, stride, pad);
                vec![gi, gw, gb]
            }),
        )
    }

    pub fn deconv2d(
        &mut self,
        input: VarId,
        weight: VarId,
        bias: VarId,
        stride: usize,
        pad: usize,
        target_h: usize,
        target_w: usize,
    ) -> VarId {
        let v = kernels::deconv2d_forward(
            &self.values[input],
            &self.values[weight],
            &self.values[bias],
            stride,
            pad,
            target_h,
            target_w,
        );
        self.push(
            v,
            vec![input, weight, bias],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let (gi, gw, gb) = kernels::deconv2d_backward(p[0], p[1], g, stride, pad);
                vec![gi, gw, gb]
            }),
        )
    }

    pub fn masked_conv2d(&mut self, input: VarId, weight: VarId, bias: VarId) -> VarId {
        let v = kernels::masked_conv2d_forward(
            &self.values[input],
            &self.values[weight],
            &self.values[bias],
        );
        self.push(
            v,
            vec![input, weight, bias],
            Box::new(|_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let (gi, gw, gb) = kernels::masked_conv2d_backward(p[0], p[1], g);
                vec![gi, gw, gb]
            }),
        )
    }

    /// Piecewise-linear interpolation of per-channel bin masses: pmf is
    /// [bins, C] (mass per integer offset), z is [C, h, w] with values in
    /// latent units; bin j covers value j - bound. Exact at integers.
    pub fn hist_interp(&mut self, pmf: VarId, z: VarId, bound: i32) -> VarId {
        let pmf_t = &self.values[pmf];
        let z_t = &self.values[z];
        let bins = pmf_t.dims()[0];
        let nch = pmf_t.dims()[1];
        let (c, h, w) = z_t.chw();
        assert_eq!(c, nch, "hist_interp channel mismatch");
        let plane = h * w;
        let eval = move |pmf: &Tensor, z: &Tensor| -> (Vec<f64>, Vec<(usize, f64, bool)>) {
            let mut out = vec![0.0; z.len()];
            let mut cells = Vec::with_capacity(z.len());
            for i in 0..z.len() {
                let ch = i / plane;
                let t_raw = z.data()[i] + f64::from(bound);
                let clamped = !(0.0..=(bins - 1) as f64).contains(&t_raw);
                let t = t_raw.clamp(0.0, (bins - 1) as f64);
                let j = (t.floor() as usize).min(bins - 2);
                let f = t - j as f64;
                out[i] = (1.0 - f) * pmf.data()[j * nch + ch] + f * pmf.data()[(j + 1) * nch + ch];
                cells.push((j, f, clamped));
            }
            (out, cells)
        };
        let (out, _) = eval(pmf_t, z_t);
        let v = Tensor::from_vec(z_t.dims(), out);
        self.push(
            v,
            vec![pmf, z],
            Box::new(move |_: &Tensor, g: &Tensor, p: &[&Tensor]| {
                let (_, cells) = eval(p[0], p[1]);
                let mut gpmf = Tensor::zeros(p[0].dims());
                let mut gz = Tensor::zeros(p[1].dims());
                for (i, &(j, f, clamped)) in cells.iter().enumerate() {
                    let ch = i / plane;
                    let gi = g.data()[i];
                    gpmf.data_mut()[j * nch + ch] += gi * (1.0 - f);
                    gpmf.data_mut()[(j + 1) * nch + ch] += gi * f;
                    if !clamped {
                        gz.data_mut()[i] =
                            gi * (p[0].data()[(j + 1) * nch + ch] - p[0].data()[j * nch + ch]);
                    }
                }
                vec![gpmf, gz]
            }),
        )
    }

    /// Reverse pass from a scalar root. Returns per-var gradients; only
    /// leaves and grad-needing nodes are populated.
    pub fn backward(&self, root: VarId) -> Vec<Option<Tensor>> {
        assert_eq!(self.values[root].len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[root] = Some(Tensor::scalar(1.0));
        for id in (0..=root).rev() {
            if self.nodes[id].back.is_none() || grads[id].is_none() {
                continue;
            }
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = grads[id].take().unwrap();
            let parent_ids = self.nodes[id].parents.clone();
            let parent_vals: Vec<&Tensor> = parent_ids.iter().map(|&p| &self.values[p]).collect();
            let pgrads = self.nodes[id]
                .back
                .as_ref()
                .unwrap()
                .backward(&self.values[id], &g, &parent_vals);
            debug_assert_eq!(pgrads.len(), parent_ids.len());
            for (&pid, pg) in parent_ids.iter().zip(pgrads) {
                if !self.nodes[pid].needs_grad {
                    continue;
                }
                match &mut grads[pid] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
        }
        grads
    }
}
