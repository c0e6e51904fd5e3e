//! A small convolutional network with hand-written backpropagation.
//!
//! Each block is a 3x3 same-padded convolution, ReLU and a 2x2 max-pool.
//! The last block's output is the feature map that global average pooling
//! reduces to one value per channel, and a single fully connected layer maps
//! the pooled vector to class logits.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::tensor::{Scalar, Tensor};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub n_classes: usize,
}

impl Arch {
    pub fn desk(n_classes: usize) -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            channels: vec![16, 32, 64],
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::invalid("channels", "at least one conv block is required"));
        }
        if self.in_channels == 0 || self.n_classes == 0 || self.channels.contains(&0) {
            return Err(Error::invalid("arch", "channel and class counts must be positive"));
        }
        let div = 1usize << self.channels.len();
        if !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) || self.height < div || self.width < div
        {
            return Err(Error::invalid(
                "arch",
                format!(
                    "{}x{} input cannot be halved {} times",
                    self.height,
                    self.width,
                    self.channels.len()
                ),
            ));
        }
        Ok(())
    }

    /// Channel count `K` of the pre-pooling feature map.
    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated arch")
    }

    /// Spatial size `(h, w)` of the pre-pooling feature map.
    pub fn feature_hw(&self) -> (usize, usize) {
        let div = 1usize << self.channels.len();
        (self.height / div, self.width / div)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T: Scalar = f32> {
    /// `[out, in, 3, 3]`
    pub kernel: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

/// The final linear classifier; row `c` of `weight` is the class-`c` filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T: Scalar = f32> {
    /// `[n_classes, K]`
    pub weight: Tensor<T>,
    /// `[n_classes]`
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    pub arch: Arch,
    pub conv: Vec<ConvLayer<T>>,
    pub fc: Classifier<T>,
}

/// Gradients share the parameter layout.
pub type Gradients<T = f32> = ModelParams<T>;

/// Named access to every trainable tensor, in a fixed order.
pub trait Parameters<T: Scalar> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

impl<T: Scalar> Parameters<T> for Classifier<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("fc.weight".into(), &self.weight),
            ("fc.bias".into(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("fc.weight".into(), &mut self.weight),
            ("fc.bias".into(), &mut self.bias),
        ]
    }
}

impl<T: Scalar> Parameters<T> for ModelParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter().enumerate() {
            out.push((format!("conv{i}.kernel"), &layer.kernel));
            out.push((format!("conv{i}.bias"), &layer.bias));
        }
        out.extend(self.fc.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv.iter_mut().enumerate() {
            out.push((format!("conv{i}.kernel"), &mut layer.kernel));
            out.push((format!("conv{i}.bias"), &mut layer.bias));
        }
        out.extend(self.fc.tensors_mut());
        out
    }
}

fn glorot<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}

impl<T: Scalar> Classifier<T> {
    pub fn zeros(n_classes: usize, k: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[n_classes, k]),
            bias: Tensor::zeros(&[n_classes]),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    /// `pooled [N, K] -> logits [N, C]`
    pub fn logits(&self, pooled: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.in_features();
        if pooled.ndim() != 2 || pooled.dim(1) != k {
            return Err(Error::shape(
                "classifier",
                format!("dimension 1 of pooled input must be {k}, got shape {:?}", pooled.shape()),
            ));
        }
        let (n, c) = (pooled.dim(0), self.n_classes());
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(self.bias.data());
        }
        T::gemm(
            n,
            k,
            c,
            T::one(),
            pooled.data(),
            k as isize,
            1,
            self.weight.data(),
            1,
            k as isize,
            T::one(),
            &mut out,
            c as isize,
            1,
        );
        Tensor::new(vec![n, c], out)
    }

    /// Parameter gradients for upstream `dlogits [N, C]`, plus `d pooled`.
    pub fn backward(&self, pooled: &Tensor<T>, dlogits: &Tensor<T>) -> Result<(Self, Tensor<T>)> {
        let (n, k, c) = (pooled.dim(0), self.in_features(), self.n_classes());
        if dlogits.shape() != [n, c] {
            return Err(Error::shape(
                "classifier backward",
                format!("upstream gradient must be [{n}, {c}], got {:?}", dlogits.shape()),
            ));
        }
        let mut grad = Self::zeros(c, k);
        // dW = dlogits^T * pooled
        T::gemm(
            c,
            n,
            k,
            T::one(),
            dlogits.data(),
            1,
            c as isize,
            pooled.data(),
            k as isize,
            1,
            T::zero(),
            grad.weight.data_mut(),
            k as isize,
            1,
        );
        for i in 0..n {
            for (b, &g) in grad.bias.data_mut().iter_mut().zip(dlogits.row(i)) {
                *b = *b + g;
            }
        }
        let mut dpooled = Tensor::zeros(&[n, k]);
        T::gemm(
            n,
            c,
            k,
            T::one(),
            dlogits.data(),
            c as isize,
            1,
            self.weight.data(),
            k as isize,
            1,
            T::zero(),
            dpooled.data_mut(),
            k as isize,
            1,
        );
        Ok((grad, dpooled))
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: &Arch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut conv = Vec::with_capacity(arch.channels.len());
        let mut in_ch = arch.in_channels;
        for &out_ch in &arch.channels {
            conv.push(ConvLayer {
                kernel: glorot(&[out_ch, in_ch, KERNEL, KERNEL], in_ch * TAPS, out_ch * TAPS, rng),
                bias: Tensor::zeros(&[out_ch]),
            });
            in_ch = out_ch;
        }
        let fc = Classifier {
            weight: glorot(&[arch.n_classes, in_ch], in_ch, arch.n_classes, rng),
            bias: Tensor::zeros(&[arch.n_classes]),
        };
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc,
        })
    }

    pub fn zeros(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let mut in_ch = arch.in_channels;
        let mut conv = Vec::with_capacity(arch.channels.len());
        for &out_ch in &arch.channels {
            conv.push(ConvLayer {
                kernel: Tensor::zeros(&[out_ch, in_ch, KERNEL, KERNEL]),
                bias: Tensor::zeros(&[out_ch]),
            });
            in_ch = out_ch;
        }
        Ok(Self {
            arch: arch.clone(),
            conv,
            fc: Classifier::zeros(arch.n_classes, in_ch),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    kernel: Tensor::zeros(l.kernel.shape()),
                    bias: Tensor::zeros(l.bias.shape()),
                })
                .collect(),
            fc: Classifier::zeros(self.fc.n_classes(), self.fc.in_features()),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    kernel: l.kernel.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            fc: Classifier {
                weight: self.fc.weight.cast(),
                bias: self.fc.bias.cast(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.conv.len() != self.arch.channels.len() {
            return Err(Error::shape(
                "params",
                format!("{} conv layers for {} blocks", self.conv.len(), self.arch.channels.len()),
            ));
        }
        let mut in_ch = self.arch.in_channels;
        for (i, (layer, &out_ch)) in self.conv.iter().zip(&self.arch.channels).enumerate() {
            if layer.kernel.shape() != [out_ch, in_ch, KERNEL, KERNEL] {
                return Err(Error::shape(
                    format!("conv{i}.kernel"),
                    format!("expected [{out_ch}, {in_ch}, 3, 3], got {:?}", layer.kernel.shape()),
                ));
            }
            if layer.bias.shape() != [out_ch] {
                return Err(Error::shape(
                    format!("conv{i}.bias"),
                    format!("expected [{out_ch}], got {:?}", layer.bias.shape()),
                ));
            }
            in_ch = out_ch;
        }
        let c = self.arch.n_classes;
        if self.fc.weight.shape() != [c, in_ch] {
            return Err(Error::shape(
                "fc.weight",
                format!("expected [{c}, {in_ch}], got {:?}", self.fc.weight.shape()),
            ));
        }
        if self.fc.bias.shape() != [c] {
            return Err(Error::shape(
                "fc.bias",
                format!("expected [{c}], got {:?}", self.fc.bias.shape()),
            ));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<usize> {
        self.validate()?;
        let a = &self.arch;
        if batch.ndim() != 4 {
            return Err(Error::shape(
                "forward",
                format!("batch must be [N, C, H, W], got {:?}", batch.shape()),
            ));
        }
        for (axis, name, want) in [
            (1, "channels", a.in_channels),
            (2, "height", a.height),
            (3, "width", a.width),
        ] {
            if batch.dim(axis) != want {
                return Err(Error::shape(
                    "forward",
                    format!("dimension {axis} ({name}) is {}, expected {want}", batch.dim(axis)),
                ));
            }
        }
        Ok(batch.dim(0))
    }
}

pub struct ForwardOutput<T: Scalar = f32> {
    /// Activations entering global average pooling, `[N, K, h, w]`.
    pub features: Tensor<T>,
    /// `[N, K]`
    pub pooled: Tensor<T>,
    /// `[N, n_classes]`
    pub logits: Tensor<T>,
}

struct BlockTrace<T> {
    h: usize,
    w: usize,
    col: Vec<T>,
    /// post-ReLU conv output, `[out, h*w]`
    act: Vec<T>,
    /// flat index into `act` of each pooled maximum
    argmax: Vec<u32>,
}

struct SampleTrace<T> {
    blocks: Vec<BlockTrace<T>>,
}

fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, col: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: accumulate column gradients back onto the input.
fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, out: &mut [T]) {
    let hw = h * w;
    out.fill(T::zero());
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[(ci * TAPS + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => dst[..w - 1]
                            .iter_mut()
                            .zip(&src[1..])
                            .for_each(|(d, &s)| *d = *d + s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s),
                        _ => dst[1..]
                            .iter_mut()
                            .zip(&src[..w - 1])
                            .for_each(|(d, &s)| *d = *d + s),
                    }
                }
            }
        }
    }
}

fn block_forward<T: Scalar>(
    layer: &ConvLayer<T>,
    input: &[T],
    in_ch: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, BlockTrace<T>) {
    let out_ch = layer.kernel.dim(0);
    let hw = h * w;
    let mut col = vec![T::zero(); in_ch * TAPS * hw];
    im2col(input, in_ch, h, w, &mut col);
    let mut act = Vec::with_capacity(out_ch * hw);
    for &b in layer.bias.data() {
        act.extend(std::iter::repeat_n(b, hw));
    }
    T::gemm(
        out_ch,
        in_ch * TAPS,
        hw,
        T::one(),
        layer.kernel.data(),
        (in_ch * TAPS) as isize,
        1,
        &col,
        hw as isize,
        1,
        T::one(),
        &mut act,
        hw as isize,
        1,
    );
    for v in act.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut pooled = Vec::with_capacity(out_ch * ph * pw);
    let mut argmax = Vec::with_capacity(out_ch * ph * pw);
    for o in 0..out_ch {
        let base = o * hw;
        for py in 0..ph {
            for px in 0..pw {
                let mut best = base + 2 * py * w + 2 * px;
                for idx in [best + 1, best + w, best + w + 1] {
                    if act[idx] > act[best] {
                        best = idx;
                    }
                }
                pooled.push(act[best]);
                argmax.push(best as u32);
            }
        }
    }
    (
        pooled,
        BlockTrace {
            h,
            w,
            col,
            act,
            argmax,
        },
    )
}

fn sample_forward<T: Scalar>(params: &ModelParams<T>, image: &[T]) -> (Vec<T>, SampleTrace<T>) {
    let arch = &params.arch;
    let (mut h, mut w, mut c) = (arch.height, arch.width, arch.in_channels);
    let mut x = image.to_vec();
    let mut blocks = Vec::with_capacity(params.conv.len());
    for layer in &params.conv {
        let (next, trace) = block_forward(layer, &x, c, h, w);
        blocks.push(trace);
        x = next;
        c = layer.kernel.dim(0);
        h /= 2;
        w /= 2;
    }
    (x, SampleTrace { blocks })
}

fn gap<T: Scalar>(features: &[T], k: usize) -> Vec<T> {
    let l = features.len() / k;
    let inv = T::one() / T::of(l as f64);
    features
        .chunks_exact(l)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect()
}

struct Traced<T: Scalar> {
    out: ForwardOutput<T>,
    traces: Vec<SampleTrace<T>>,
}

fn forward_traced<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>, keep: bool) -> Result<Traced<T>> {
    let n = params.check_batch(batch)?;
    let k = params.arch.feature_channels();
    let (fh, fw) = params.arch.feature_hw();
    let mut features = Vec::with_capacity(n * k * fh * fw);
    let mut pooled = Vec::with_capacity(n * k);
    let mut traces = Vec::new();
    for i in 0..n {
        let (feat, trace) = sample_forward(params, batch.row(i));
        pooled.extend(gap(&feat, k));
        features.extend(feat);
        if keep {
            traces.push(trace);
        }
    }
    let pooled = Tensor::new(vec![n, k], pooled)?;
    let logits = params.fc.logits(&pooled)?;
    Ok(Traced {
        out: ForwardOutput {
            features: Tensor::new(vec![n, k, fh, fw], features)?,
            pooled,
            logits,
        },
        traces,
    })
}

/// Inference pass over a batch `[N, C, H, W]`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<ForwardOutput<T>> {
    Ok(forward_traced(params, batch, false)?.out)
}

/// Loss and parameter gradients for one batch.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    loss: &LossConfig,
    sample_weights: Option<&[T]>,
) -> Result<(T, Gradients<T>)> {
    let traced = forward_traced(params, batch, true)?;
    let (value, dlogits) = loss.evaluate(&traced.out.logits, labels, sample_weights)?;
    if !value.is_finite() {
        return Err(Error::numerical("backward", "loss is not finite"));
    }
    let grads = backprop(params, &traced, &dlogits)?;
    Ok((value, grads))
}

/// Parameter gradients for an arbitrary upstream gradient on the logits.
/// Linear in `dlogits`.
pub fn backward_from_logit_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    dlogits: &Tensor<T>,
) -> Result<Gradients<T>> {
    let traced = forward_traced(params, batch, true)?;
    backprop(params, &traced, dlogits)
}

fn backprop<T: Scalar>(params: &ModelParams<T>, traced: &Traced<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
    let pooled = &traced.out.pooled;
    let (fc_grad, dpooled) = params.fc.backward(pooled, dlogits)?;
    let mut grads = params.zeros_like();
    grads.fc = fc_grad;

    let k = params.arch.feature_channels();
    let (fh, fw) = params.arch.feature_hw();
    let inv_l = T::one() / T::of((fh * fw) as f64);
    for (i, trace) in traced.traces.iter().enumerate() {
        // d features = d pooled / L, broadcast over locations
        let mut upstream: Vec<T> = dpooled
            .row(i)
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g * inv_l, fh * fw))
            .collect();
        debug_assert_eq!(upstream.len(), k * fh * fw);
        for (b, (layer, bt)) in params.conv.iter().zip(&trace.blocks).enumerate().rev() {
            let out_ch = layer.kernel.dim(0);
            let in_ch = layer.kernel.dim(1);
            let hw = bt.h * bt.w;
            let mut dact = vec![T::zero(); out_ch * hw];
            for (&idx, &g) in bt.argmax.iter().zip(&upstream) {
                dact[idx as usize] = g;
            }
            for (d, &a) in dact.iter_mut().zip(&bt.act) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let gl = &mut grads.conv[b];
            for (gb, row) in gl.bias.data_mut().iter_mut().zip(dact.chunks_exact(hw)) {
                *gb = *gb + row.iter().copied().sum::<T>();
            }
            // dK += dact * col^T
            T::gemm(
                out_ch,
                hw,
                in_ch * TAPS,
                T::one(),
                &dact,
                hw as isize,
                1,
                &bt.col,
                1,
                hw as isize,
                T::one(),
                gl.kernel.data_mut(),
                (in_ch * TAPS) as isize,
                1,
            );
            if b == 0 {
                break;
            }
            let mut dcol = vec![T::zero(); in_ch * TAPS * hw];
            T::gemm(
                in_ch * TAPS,
                out_ch,
                hw,
                T::one(),
                layer.kernel.data(),
                1,
                (in_ch * TAPS) as isize,
                &dact,
                hw as isize,
                1,
                T::zero(),
                &mut dcol,
                hw as isize,
                1,
            );
            upstream = vec![T::zero(); in_ch * hw];
            col2im(&dcol, in_ch, bt.h, bt.w, &mut upstream);
        }
    }
    Ok(grads)
}

/// ReLU on/off bits and max-pool winners for every sample and block. Two
/// parameter settings with equal patterns lie on the same linear piece of
/// the network, which is where finite differences are meaningful.
pub fn activation_pattern<T: Scalar>(params: &ModelParams<T>, batch: &Tensor<T>) -> Result<Vec<u32>> {
    let traced = forward_traced(params, batch, true)?;
    let mut pattern = Vec::new();
    for trace in &traced.traces {
        for bt in &trace.blocks {
            pattern.extend(bt.act.iter().map(|&a| u32::from(a > T::zero())));
            pattern.extend_from_slice(&bt.argmax);
        }
    }
    Ok(pattern)
}

#[derive(Clone, Debug)]
pub struct OptimState<T: Scalar = f32> {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &impl Parameters<T>, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .into_iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }
}

/// Momentum SGD: `v <- momentum * v + g + weight_decay * p`, `p <- p - lr * v`.
///
/// All gradients are checked before anything is written, so a refused step
/// leaves both the parameters and the velocity untouched.
pub fn sgd_step<T: Scalar, P: Parameters<T>>(params: &mut P, grads: &P, state: &mut OptimState<T>) -> Result<()> {
    let grads = grads.tensors();
    let mut targets = params.tensors_mut();
    if grads.len() != targets.len() || state.velocity.len() != targets.len() {
        return Err(Error::shape(
            "sgd_step",
            format!(
                "{} parameters, {} gradients, {} velocity buffers",
                targets.len(),
                grads.len(),
                state.velocity.len()
            ),
        ));
    }
    for (((name, p), (_, g)), v) in targets.iter().zip(&grads).zip(&state.velocity) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                name.clone(),
                format!("parameter {:?}, gradient {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::numerical(name.clone(), "non-finite gradient, step refused"));
        }
    }
    let lr = T::of(state.learning_rate);
    let mu = T::of(state.momentum);
    let wd = T::of(state.weight_decay);
    for (((_, p), (_, g)), v) in targets.iter_mut().zip(&grads).zip(state.velocity.iter_mut()) {
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = mu * *vv + gv + wd * *pv;
            *pv = *pv - lr * *vv;
        }
    }
    Ok(())
}

/// Step decay: `base_lr * factor^floor(epoch / decay_every)`.
pub fn lr_schedule(epoch: usize, base_lr: f64, decay_every: usize, factor: f64) -> f64 {
    let decays = epoch / decay_every.max(1);
    base_lr * factor.powi(decays as i32)
}

const INDEX_FILE: &str = "index.txt";

impl ModelParams<f32> {
    /// Save as a directory of tensor files plus a plain-text index. The
    /// directory is written beside the target and renamed into place.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent)?;
        let name = dir
            .file_name()
            .ok_or_else(|| Error::invalid("checkpoint", "path has no file name"))?
            .to_string_lossy();
        let staging = parent.join(format!(".{name}.partial"));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        let a = &self.arch;
        let channels: Vec<String> = a.channels.iter().map(|c| c.to_string()).collect();
        let mut index = format!(
            "# tailmix checkpoint\narch\tin={} height={} width={} channels={} classes={}\n",
            a.in_channels,
            a.height,
            a.width,
            channels.join(","),
            a.n_classes
        );
        for (tname, tensor) in self.tensors() {
            let file = format!("{tname}.tnsr");
            tensor.save(&staging.join(&file))?;
            index.push_str(&format!("{tname}\t{file}\n"));
        }
        fs::write(staging.join(INDEX_FILE), index)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&staging, dir)?;
        Ok(())
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::MissingArtifact {
                path: index_path,
                producer: "phase1",
            });
        }
        let index = fs::read_to_string(&index_path)?;
        let mut arch = None;
        let mut files = std::collections::HashMap::new();
        for line in index.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("malformed checkpoint index line {line:?}")))?;
            if key == "arch" {
                arch = Some(parse_arch(value)?);
            } else {
                files.insert(key.to_string(), value.to_string());
            }
        }
        let arch = arch.ok_or_else(|| Error::Data("checkpoint index lacks an arch line".into()))?;
        let mut params = ModelParams::<f32>::zeros(&arch)?;
        for (tname, slot) in params.tensors_mut() {
            let file = files
                .get(&tname)
                .ok_or_else(|| Error::Data(format!("checkpoint index lacks tensor {tname}")))?;
            *slot = Tensor::load(&dir.join(file))?;
        }
        params.validate()?;
        Ok(params)
    }

    /// SHA-256 over tensor names, shapes and payloads.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors() {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Fingerprint of the convolutional extractor alone.
    pub fn extractor_fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors().into_iter().filter(|(n, _)| n.starts_with("conv")) {
            h.update(name.as_bytes());
            h.update(t.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn parse_arch(spec: &str) -> Result<Arch> {
    let mut arch = Arch::desk(0);
    for field in spec.split_whitespace() {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| Error::Data(format!("malformed arch field {field:?}")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::Data(format!("arch field {k} is not an integer: {v:?}")))
        };
        match k {
            "in" => arch.in_channels = num(v)?,
            "height" => arch.height = num(v)?,
            "width" => arch.width = num(v)?,
            "classes" => arch.n_classes = num(v)?,
            "channels" => arch.channels = v.split(',').map(num).collect::<Result<_>>()?,
            other => return Err(Error::Data(format!("unknown arch field {other:?}"))),
        }
    }
    arch.validate()?;
    Ok(arch)
}
