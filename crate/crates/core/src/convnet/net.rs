use rand_distr::{Distribution, StandardNormal};

use super::layers::{self, ConvGeom, LrnParams};
use super::tensor::{Scalar, Tensor};
use super::{LayerKind, NetError, NetSpec};
use crate::rng;

/// Weights and biases of one conv or fc layer. Conv weights are
/// `[out, in, k, k]`, fc weights `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub weight_shape: Vec<usize>,
}

impl<T: Scalar> Param<T> {
    fn zeros_like(&self) -> Self {
        Param {
            weight: vec![T::zero(); self.weight.len()],
            bias: vec![T::zero(); self.bias.len()],
            weight_shape: self.weight_shape.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Net<T> {
    pub spec: NetSpec,
    shapes: Vec<Vec<usize>>,
    pub params: Vec<Option<Param<T>>>,
}

/// Per-layer parameter gradients, aligned with `Net::params`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub params: Vec<Option<Param<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_for(net: &Net<T>) -> Self {
        Grads {
            params: net
                .params
                .iter()
                .map(|p| p.as_ref().map(Param::zeros_like))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            if let (Some(a), Some(b)) = (a, b) {
                for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                    *x = *x + *y;
                }
                for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                    *x = *x + *y;
                }
            }
        }
    }

    pub fn iter_values(&self) -> impl Iterator<Item = T> + '_ {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| p.weight.iter().chain(&p.bias).copied())
    }
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub batch: usize,
    /// `acts[i]` is the input of layer `i`; `acts[i + 1]` its output.
    pub acts: Vec<Vec<T>>,
    argmax: Vec<Vec<u32>>,
    lrn_scale: Vec<Vec<T>>,
    pub labels: Option<Vec<usize>>,
    /// Mean cross-entropy over the batch (zero without labels).
    pub loss: T,
}

impl<T: Scalar> ForwardCache<T> {
    /// Softmax probabilities, `batch × classes`, if the pass reached the loss.
    pub fn probs(&self) -> &[T] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn predictions(&self, classes: usize) -> Vec<usize> {
        self.probs()
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SgdState<T> {
    velocity: Vec<Option<Param<T>>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(net: &Net<T>) -> Self {
        SgdState {
            velocity: Grads::zeros_for(net).params,
        }
    }
}

/// `v <- momentum·v - lr·(grad + decay·w); w <- w + v` for every parameter.
pub fn sgd_step<T: Scalar>(net: &mut Net<T>, grads: &Grads<T>, state: &mut SgdState<T>, lr: f64, momentum: f64, weight_decay: f64) {
    let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
    let layers = net.params.iter_mut().zip(&grads.params).zip(&mut state.velocity);
    for ((p, g), v) in layers {
        if let (Some(p), Some(g), Some(v)) = (p, g, v) {
            let pairs = p
                .weight
                .iter_mut()
                .zip(&g.weight)
                .zip(&mut v.weight)
                .chain(p.bias.iter_mut().zip(&g.bias).zip(&mut v.bias));
            for ((w, &gr), vel) in pairs {
                *vel = mu * *vel - lr * (gr + wd * *w);
                *w = *w + *vel;
            }
        }
    }
}

impl<T: Scalar> Net<T> {
    /// Builds the net with He-normal weights (`std = sqrt(2 / fan_in)`) and
    /// zero biases, deterministically from `seed`.
    pub fn build(spec: &NetSpec, seed: u64) -> Result<Self, NetError> {
        let shapes = spec.shapes()?;
        let mut rng = rng::rng_from(&[seed, 0x6e6574]);
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut in_shape: Vec<usize> = spec.input.to_vec();
        for (l, out_shape) in spec.layers.iter().zip(&shapes) {
            let param = match l.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                } => Some(vec![out_channels, in_shape[0], kernel, kernel]),
                LayerKind::Fc { out } => Some(vec![out, in_shape.iter().product()]),
                _ => None,
            }
            .map(|weight_shape| {
                let fan_in: usize = weight_shape[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                let n: usize = weight_shape.iter().product();
                let weight = (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        T::from_f64(z * std)
                    })
                    .collect();
                Param {
                    weight,
                    bias: vec![T::zero(); weight_shape[0]],
                    weight_shape,
                }
            });
            params.push(param);
            in_shape = out_shape.clone();
        }
        Ok(Net {
            spec: spec.clone(),
            shapes,
            params,
        })
    }

    /// Per-sample output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    fn input_shape(&self, i: usize) -> Vec<usize> {
        if i == 0 {
            self.spec.input.to_vec()
        } else {
            self.shapes[i - 1].clone()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(|s| s[0]).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.params
            .iter()
            .flatten()
            .map(|p| p.weight.len() + p.bias.len())
            .sum()
    }

    pub fn zero_params(&mut self) {
        for p in self.params.iter_mut().flatten() {
            p.weight.fill(T::zero());
            p.bias.fill(T::zero());
        }
    }

    /// Zeroes the last fully connected layer so initial predictions are uniform.
    pub fn zero_last_layer(&mut self) {
        if let Some(p) = self.params.iter_mut().rev().flatten().next() {
            p.weight.fill(T::zero());
            p.bias.fill(T::zero());
        }
    }

    fn conv_geom(&self, i: usize) -> ConvGeom {
        let ins = self.input_shape(i);
        let out = &self.shapes[i];
        match self.spec.layers[i].kind {
            LayerKind::Conv {
                kernel, stride, pad, ..
            } => ConvGeom {
                in_c: ins[0],
                in_h: ins[1],
                in_w: ins[2],
                kernel,
                stride,
                pad,
                out_h: out[1],
                out_w: out[2],
            },
            _ => unreachable!("conv_geom on non-conv layer"),
        }
    }

    /// Runs layers `0..=stop` (all layers when `stop` is `None`). With labels,
    /// the loss layer computes the mean cross-entropy.
    pub fn forward_until(
        &self,
        input: &Tensor<T>,
        labels: Option<&[usize]>,
        stop: Option<usize>,
    ) -> Result<ForwardCache<T>, NetError> {
        let per_sample: usize = self.spec.input.iter().product();
        let batch = input.shape.first().copied().unwrap_or(0);
        if batch == 0 || input.len() != batch * per_sample || input.shape[1..].iter().product::<usize>() != per_sample {
            return Err(NetError::ShapeMismatch(format!(
                "input {:?} vs per-sample {:?}",
                input.shape, self.spec.input
            )));
        }
        let classes = self.num_classes();
        if let Some(l) = labels {
            if l.len() != batch || l.iter().any(|&c| c >= classes) {
                return Err(NetError::ShapeMismatch(format!(
                    "{} labels for batch {batch} with {classes} classes",
                    l.len()
                )));
            }
        }
        let last = stop.unwrap_or(self.spec.layers.len() - 1);
        let mut acts = vec![input.data.clone()];
        let mut argmax = vec![Vec::new(); self.spec.layers.len()];
        let mut lrn_scale = vec![Vec::new(); self.spec.layers.len()];
        let mut loss = T::zero();
        for i in 0..=last {
            let in_size: usize = self.input_shape(i).iter().product();
            let out_size: usize = self.shapes[i].iter().product();
            let x = &acts[i];
            let mut y = vec![T::zero(); batch * out_size];
            match self.spec.layers[i].kind {
                LayerKind::Conv { .. } => {
                    let g = self.conv_geom(i);
                    let p = self.params[i].as_ref().unwrap();
                    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
                    for n in 0..batch {
                        layers::conv_forward(
                            &g,
                            &p.weight,
                            &p.bias,
                            &x[n * in_size..(n + 1) * in_size],
                            &mut col,
                            &mut y[n * out_size..(n + 1) * out_size],
                        );
                    }
                }
                LayerKind::Relu => {
                    for (o, &v) in y.iter_mut().zip(x) {
                        *o = v.max(T::zero());
                    }
                }
                LayerKind::MaxPool { size, stride } => {
                    let s = self.input_shape(i);
                    let mut am = vec![0u32; batch * out_size];
                    for n in 0..batch {
                        layers::maxpool_forward(
                            (s[0], s[1], s[2]),
                            size,
                            stride,
                            &x[n * in_size..(n + 1) * in_size],
                            &mut y[n * out_size..(n + 1) * out_size],
                            &mut am[n * out_size..(n + 1) * out_size],
                        );
                    }
                    argmax[i] = am;
                }
                LayerKind::Lrn {
                    local_size,
                    alpha,
                    beta,
                    k,
                } => {
                    let s = self.input_shape(i);
                    let lp = LrnParams {
                        local_size,
                        alpha,
                        beta,
                        k,
                    };
                    let mut scale = vec![T::zero(); batch * out_size];
                    for n in 0..batch {
                        let r = n * in_size..(n + 1) * in_size;
                        layers::lrn_forward(&lp, s[0], s[1] * s[2], &x[r.clone()], &mut y[r.clone()], &mut scale[r]);
                    }
                    lrn_scale[i] = scale;
                }
                LayerKind::Fc { out } => {
                    let p = self.params[i].as_ref().unwrap();
                    T::gemm(batch, in_size, out, x, false, &p.weight, true, &mut y, false);
                    for row in y.chunks_mut(out) {
                        for (v, &b) in row.iter_mut().zip(&p.bias) {
                            *v = *v + b;
                        }
                    }
                }
                LayerKind::SoftmaxLoss => {
                    let mut total = T::zero();
                    for n in 0..batch {
                        let label = labels.map(|l| l[n]);
                        total = total
                            + layers::softmax_xent(
                                &x[n * in_size..(n + 1) * in_size],
                                &mut y[n * out_size..(n + 1) * out_size],
                                label,
                            );
                    }
                    loss = total / T::from_f64(batch as f64);
                }
            }
            acts.push(y);
        }
        Ok(ForwardCache {
            batch,
            acts,
            argmax,
            lrn_scale,
            labels: labels.map(<[usize]>::to_vec),
            loss,
        })
    }

    pub fn forward(&self, input: &Tensor<T>, labels: Option<&[usize]>) -> Result<ForwardCache<T>, NetError> {
        self.forward_until(input, labels, None)
    }

    /// Gradient of the mean cross-entropy. Weight decay is not included.
    pub fn backward(&self, cache: &ForwardCache<T>) -> Result<Grads<T>, NetError> {
        let scale = T::one() / T::from_f64(cache.batch as f64);
        self.backward_scaled(cache, scale)
    }

    /// Gradient of `scale · Σ cross-entropy` over the cached batch.
    pub fn backward_scaled(&self, cache: &ForwardCache<T>, scale: T) -> Result<Grads<T>, NetError> {
        let labels = cache.labels.as_ref().ok_or(NetError::NoCachedForward)?;
        if cache.acts.len() != self.spec.layers.len() + 1 {
            return Err(NetError::NoCachedForward);
        }
        let classes = self.num_classes();
        let mut dlogits = cache.probs().to_vec();
        for (n, &l) in labels.iter().enumerate() {
            dlogits[n * classes + l] = dlogits[n * classes + l] - T::one();
        }
        for v in dlogits.iter_mut() {
            *v = *v * scale;
        }
        Ok(self.backward_from(cache, &dlogits, false)?.0)
    }

    /// Backpropagates `dlogits` (gradient w.r.t. the loss layer's input).
    /// Returns parameter gradients and, if requested, the input gradient.
    pub fn backward_from(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &[T],
        want_input_grad: bool,
    ) -> Result<(Grads<T>, Option<Vec<T>>), NetError> {
        let nl = self.spec.layers.len();
        if cache.acts.len() != nl + 1 {
            return Err(NetError::NoCachedForward);
        }
        let batch = cache.batch;
        let mut grads = Grads::zeros_for(self);
        let mut dy = dlogits.to_vec();
        for i in (0..nl - 1).rev() {
            let in_size: usize = self.input_shape(i).iter().product();
            let out_size: usize = self.shapes[i].iter().product();
            let x = &cache.acts[i];
            let need_dx = i > 0 || want_input_grad;
            let mut dx = vec![T::zero(); if need_dx { batch * in_size } else { 0 }];
            match self.spec.layers[i].kind {
                LayerKind::Conv { .. } => {
                    let g = self.conv_geom(i);
                    let p = self.params[i].as_ref().unwrap();
                    let gp = grads.params[i].as_mut().unwrap();
                    let mut col = vec![T::zero(); g.col_rows() * g.col_cols()];
                    for n in 0..batch {
                        let dxn = if need_dx {
                            Some(&mut dx[n * in_size..(n + 1) * in_size])
                        } else {
                            None
                        };
                        layers::conv_backward(
                            &g,
                            &p.weight,
                            &x[n * in_size..(n + 1) * in_size],
                            &dy[n * out_size..(n + 1) * out_size],
                            &mut col,
                            &mut gp.weight,
                            &mut gp.bias,
                            dxn,
                        );
                    }
                }
                LayerKind::Relu if need_dx => {
                    for ((d, &g), &v) in dx.iter_mut().zip(&dy).zip(x) {
                        *d = if v > T::zero() { g } else { T::zero() };
                    }
                }
                LayerKind::MaxPool { .. } if need_dx => {
                    for n in 0..batch {
                        layers::maxpool_backward(
                            &dy[n * out_size..(n + 1) * out_size],
                            &cache.argmax[i][n * out_size..(n + 1) * out_size],
                            &mut dx[n * in_size..(n + 1) * in_size],
                        );
                    }
                }
                LayerKind::Lrn {
                    local_size,
                    alpha,
                    beta,
                    k,
                } if need_dx => {
                    let s = self.input_shape(i);
                    let lp = LrnParams {
                        local_size,
                        alpha,
                        beta,
                        k,
                    };
                    let y = &cache.acts[i + 1];
                    for n in 0..batch {
                        let r = n * in_size..(n + 1) * in_size;
                        layers::lrn_backward(
                            &lp,
                            s[0],
                            s[1] * s[2],
                            &x[r.clone()],
                            &y[r.clone()],
                            &cache.lrn_scale[i][r.clone()],
                            &dy[r.clone()],
                            &mut dx[r],
                        );
                    }
                }
                LayerKind::Fc { out } => {
                    let p = self.params[i].as_ref().unwrap();
                    let gp = grads.params[i].as_mut().unwrap();
                    T::gemm(out, batch, in_size, &dy, true, x, false, &mut gp.weight, true);
                    for row in dy.chunks(out) {
                        for (b, &d) in gp.bias.iter_mut().zip(row) {
                            *b = *b + d;
                        }
                    }
                    if need_dx {
                        T::gemm(batch, out, in_size, &dy, false, &p.weight, false, &mut dx, false);
                    }
                }
                _ => {}
            }
            dy = dx;
        }
        Ok((grads, if want_input_grad { Some(dy) } else { None }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convnet::LayerDef;

    fn l(name: &str, kind: LayerKind) -> LayerDef {
        LayerDef {
            name: name.into(),
            kind,
        }
    }

    fn tiny_spec() -> NetSpec {
        NetSpec {
            input: [1, 8, 8],
            layers: vec![
                l("conv1", LayerKind::Conv { out_channels: 3, kernel: 3, stride: 1, pad: 1 }),
                l("relu1", LayerKind::Relu),
                l("pool1", LayerKind::MaxPool { size: 2, stride: 2 }),
                l("norm1", LayerKind::lrn()),
                l("conv2", LayerKind::Conv { out_channels: 4, kernel: 3, stride: 2, pad: 1 }),
                l("relu2", LayerKind::Relu),
                l("fc", LayerKind::Fc { out: 3 }),
                l("loss", LayerKind::SoftmaxLoss),
            ],
            taps: vec!["conv2".into(), "fc".into()],
        }
    }

    fn input(batch: usize, seed: u64) -> Tensor<f64> {
        let n = batch * 64;
        Tensor::from_vec(
            &[batch, 1, 8, 8],
            (0..n).map(|i| ((i as f64 + seed as f64) * 0.731).sin()).collect(),
        )
    }

    #[test]
    fn deterministic_init() {
        let a = Net::<f32>::build(&tiny_spec(), 3).unwrap();
        let b = Net::<f32>::build(&tiny_spec(), 3).unwrap();
        let c = Net::<f32>::build(&tiny_spec(), 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
        assert!(a.params[0].as_ref().unwrap().bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_net_predicts_uniformly() {
        let mut net = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        net.zero_params();
        let cache = net.forward(&input(4, 0), Some(&[0, 1, 2, 0])).unwrap();
        assert!(cache.probs().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert!((cache.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn forward_invariants() {
        let net = Net::<f32>::build(&tiny_spec(), 2).unwrap();
        let x = input(5, 1);
        let x32 = Tensor::from_vec(&x.shape, x.data.iter().map(|&v| v as f32).collect());
        let cache = net.forward(&x32, None).unwrap();
        for row in cache.probs().chunks(3) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        assert!(cache.acts[2].iter().all(|&v| v >= 0.0));
        // Max pool output never exceeds the largest input.
        let pooled = &cache.acts[3];
        let max_in = cache.acts[2].iter().cloned().fold(f32::MIN, f32::max);
        assert!(pooled.iter().all(|&v| v <= max_in));
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let net = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let bad = Tensor::from_vec(&[2, 1, 4, 4], vec![0.0; 32]);
        assert!(matches!(net.forward(&bad, None), Err(NetError::ShapeMismatch(_))));
        assert!(matches!(
            net.forward(&input(2, 0), Some(&[0, 7])),
            Err(NetError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn backward_requires_labels() {
        let net = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let cache = net.forward(&input(2, 0), None).unwrap();
        assert!(matches!(net.backward(&cache), Err(NetError::NoCachedForward)));
        let partial = net.forward_until(&input(2, 0), Some(&[0, 1]), Some(3)).unwrap();
        assert!(matches!(net.backward(&partial), Err(NetError::NoCachedForward)));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let net = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let cache = net.forward(&input(3, 0), Some(&[0, 1, 2])).unwrap();
        let (g, _) = net.backward_from(&cache, &[0.0; 9], false).unwrap();
        assert!(g.iter_values().all(|v| v == 0.0));
    }

    #[test]
    fn sgd_step_cases() {
        let mut net = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let cache = net.forward(&input(3, 0), Some(&[0, 1, 2])).unwrap();
        let grads = net.backward(&cache).unwrap();
        let before = net.params.clone();

        // Plain gradient descent.
        let mut state = SgdState::new(&net);
        sgd_step(&mut net, &grads, &mut state, 0.1, 0.0, 0.0);
        let after: Vec<f64> = net.params.iter().flatten().flat_map(|p| p.weight.clone()).collect();
        let expect: Vec<f64> = before
            .iter()
            .zip(&grads.params)
            .filter_map(|(p, g)| Some((p.as_ref()?, g.as_ref()?)))
            .flat_map(|(p, g)| p.weight.iter().zip(&g.weight).map(|(w, d)| w - 0.1 * d).collect::<Vec<_>>())
            .collect();
        for (a, e) in after.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-15);
        }

        // Zero gradient leaves weights untouched.
        let mut net2 = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let zero = Grads::zeros_for(&net2);
        let mut state = SgdState::new(&net2);
        sgd_step(&mut net2, &zero, &mut state, 0.1, 0.9, 0.0);
        assert_eq!(net2.params, before);

        // Momentum: second displacement is 1.9x the first for a constant gradient.
        let mut net3 = Net::<f64>::build(&tiny_spec(), 1).unwrap();
        let mut state = SgdState::new(&net3);
        let w0 = net3.params[0].as_ref().unwrap().weight[0];
        sgd_step(&mut net3, &grads, &mut state, 0.1, 0.9, 0.0);
        let w1 = net3.params[0].as_ref().unwrap().weight[0];
        sgd_step(&mut net3, &grads, &mut state, 0.1, 0.9, 0.0);
        let w2 = net3.params[0].as_ref().unwrap().weight[0];
        assert!(((w2 - w1) - 1.9 * (w1 - w0)).abs() < 1e-12);
    }

    fn flat_params(net: &Net<f64>) -> Vec<f64> {
        net.params.iter().flatten().flat_map(|p| p.weight.iter().chain(&p.bias).copied()).collect()
    }

    fn set_param(net: &mut Net<f64>, mut k: usize, v: f64) {
        for p in net.params.iter_mut().flatten() {
            let n = p.weight.len();
            if k < n {
                p.weight[k] = v;
                return;
            }
            k -= n;
            if k < p.bias.len() {
                p.bias[k] = v;
                return;
            }
            k -= p.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_gradients(spec: &NetSpec, seed: u64) {
        let mut net = Net::<f64>::build(spec, seed).unwrap();
        // Non-zero biases so relu/pool boundaries are generic.
        for (i, p) in net.params.iter_mut().flatten().enumerate() {
            for (j, b) in p.bias.iter_mut().enumerate() {
                *b = 0.05 * ((i * 7 + j) as f64).sin();
            }
        }
        let per: usize = spec.input.iter().product();
        let x = Tensor::from_vec(
            &[2, spec.input[0], spec.input[1], spec.input[2]],
            (0..2 * per).map(|i| ((i as f64 + seed as f64) * 0.917).sin()).collect(),
        );
        let labels = [0, 2];
        let cache = net.forward(&x, Some(&labels)).unwrap();
        let analytic: Vec<f64> = net.backward(&cache).unwrap().iter_values().collect();
        let theta = flat_params(&net);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..theta.len() {
            set_param(&mut net, k, theta[k] + eps);
            let up = net.forward(&x, Some(&labels)).unwrap().loss;
            set_param(&mut net, k, theta[k] - eps);
            let down = net.forward(&x, Some(&labels)).unwrap().loss;
            set_param(&mut net, k, theta[k]);
            let numeric = (up - down) / (2.0 * eps);
            let rel = (numeric - analytic[k]).abs() / (numeric.abs() + analytic[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn gradient_check_tiny_net() {
        check_gradients(&tiny_spec(), 1);
        check_gradients(&tiny_spec(), 2);
    }

    #[test]
    fn gradient_check_strong_lrn() {
        let mut spec = tiny_spec();
        spec.layers[3].kind = LayerKind::Lrn { local_size: 3, alpha: 0.5, beta: 0.75, k: 2.0 };
        check_gradients(&spec, 4);
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let net = Net::<f64>::build(&tiny_spec(), 6).unwrap();
        let mut x = input(1, 3);
        let cache = net.forward(&x, Some(&[1])).unwrap();
        let mut d = cache.probs().to_vec();
        d[1] -= 1.0;
        let (_, dx) = net.backward_from(&cache, &d, true).unwrap();
        let dx = dx.unwrap();
        let eps = 1e-5;
        for k in [0, 9, 27, 63] {
            let v = x.data[k];
            x.data[k] = v + eps;
            let up = net.forward(&x, Some(&[1])).unwrap().loss;
            x.data[k] = v - eps;
            let down = net.forward(&x, Some(&[1])).unwrap().loss;
            x.data[k] = v;
            let numeric = (up - down) / (2.0 * eps);
            assert!((numeric - dx[k]).abs() <= 1e-6 + 1e-4 * numeric.abs());
        }
    }
}
