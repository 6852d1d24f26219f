//! A minimal encoder–decoder network built from scratch.
//!
//! Three layer kinds: valid (no padding) convolution with stride and
//! optional ReLU, non-overlapping max-pooling, and transposed convolution
//! ("deconvolution") for upsampling. An optional single skip connection
//! merges a pooled encoder map, passed through a 1×1 channel projection,
//! into a decoder map by elementwise sum.
//!
//! Geometry conventions:
//!
//! * convolution: output size (h−a)/r + 1 per axis, kernel windows placed
//!   at offsets 0, r, 2r, …; exact divisibility is required and checked at
//!   build time (for r = 1 this is the classic valid size h−a+1);
//! * max-pooling: window s with s | h, ties broken to the first element in
//!   row-major order;
//! * deconvolution: output size (q−1)·f + a, the exact transpose of the
//!   convolution above with stride f, so conv/deconv pairs with shared
//!   kernels are adjoint linear maps — a property the tests rely on.
//!
//! All arithmetic is f64; backward passes are exact gradients validated
//! against central finite differences.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Pointwise nonlinearity applied after bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation value. ReLU uses the
    /// zero subgradient at exactly 0.
    #[inline]
    fn derivative(self, preact: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if preact > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// A convolution kernel with its bias, stride and activation.
///
/// Kernel layout is `[ky][kx][in][out]` row-major; `bias` has one entry per
/// output channel. The same struct parameterizes transposed convolutions,
/// where the kernel is applied in the scatter direction (input channel →
/// output channel semantics are unchanged).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub kh: usize,
    pub kw: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub activation: Activation,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvSpec {
    pub fn new(
        kh: usize,
        kw: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        activation: Activation,
        kernel: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<ConvSpec> {
        if kh == 0 || kw == 0 || in_ch == 0 || out_ch == 0 || stride == 0 {
            return Err(Error::shape(
                "kernel dims, channels and stride must be positive",
            ));
        }
        if kernel.len() != kh * kw * in_ch * out_ch {
            return Err(Error::Dimension {
                context: "convolution kernel length",
                expected: kh * kw * in_ch * out_ch,
                got: kernel.len(),
            });
        }
        if bias.len() != out_ch {
            return Err(Error::Dimension {
                context: "convolution bias length",
                expected: out_ch,
                got: bias.len(),
            });
        }
        Ok(ConvSpec {
            kh,
            kw,
            in_ch,
            out_ch,
            stride,
            activation,
            kernel,
            bias,
        })
    }

    /// He-style random initialization: kernel ~ N(0, √(2/fan_in)), zero bias.
    pub fn he_init<R: Rng + ?Sized>(
        kh: usize,
        kw: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<ConvSpec> {
        let fan_in = (kh * kw * in_ch) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid normal");
        let kernel = (0..kh * kw * in_ch * out_ch).map(|_| dist.sample(rng)).collect();
        ConvSpec::new(kh, kw, in_ch, out_ch, stride, activation, kernel, vec![0.0; out_ch])
    }

    /// The same linear map viewed from the other side: input and output
    /// channels swapped, kernel entries transposed accordingly. Running
    /// [`deconv_forward`] with the transposed spec is the exact adjoint of
    /// [`conv_forward`] with the original (zero bias, no activation).
    pub fn channel_transposed(&self) -> ConvSpec {
        let mut kernel = vec![0.0; self.kernel.len()];
        for ky in 0..self.kh {
            for kx in 0..self.kw {
                let base = (ky * self.kw + kx) * self.in_ch * self.out_ch;
                for i in 0..self.in_ch {
                    for j in 0..self.out_ch {
                        kernel[base + j * self.in_ch + i] =
                            self.kernel[base + i * self.out_ch + j];
                    }
                }
            }
        }
        ConvSpec {
            kh: self.kh,
            kw: self.kw,
            in_ch: self.out_ch,
            out_ch: self.in_ch,
            stride: self.stride,
            activation: Activation::None,
            kernel,
            bias: vec![0.0; self.in_ch],
        }
    }

    /// Output dims of a strided valid convolution over `(h, w, c)`.
    pub fn conv_out_dims(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (h, w, c) = dims;
        if c != self.in_ch {
            return Err(Error::Dimension {
                context: "convolution input channels",
                expected: self.in_ch,
                got: c,
            });
        }
        if h < self.kh || w < self.kw {
            return Err(Error::shape(format!(
                "kernel {}×{} does not fit input {h}×{w}",
                self.kh, self.kw
            )));
        }
        if (h - self.kh) % self.stride != 0 || (w - self.kw) % self.stride != 0 {
            return Err(Error::shape(format!(
                "stride {} does not evenly tile input {h}×{w} with kernel {}×{}",
                self.stride, self.kh, self.kw
            )));
        }
        Ok((
            (h - self.kh) / self.stride + 1,
            (w - self.kw) / self.stride + 1,
            self.out_ch,
        ))
    }

    /// Output dims of a transposed convolution with the given factor.
    pub fn deconv_out_dims(
        &self,
        dims: (usize, usize, usize),
        factor: usize,
    ) -> Result<(usize, usize, usize)> {
        let (h, w, c) = dims;
        if c != self.in_ch {
            return Err(Error::Dimension {
                context: "deconvolution input channels",
                expected: self.in_ch,
                got: c,
            });
        }
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        Ok(((h - 1) * factor + self.kh, (w - 1) * factor + self.kw, self.out_ch))
    }
}

/// Non-overlapping max-pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub window: usize,
}

impl PoolSpec {
    pub fn out_dims(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (h, w, c) = dims;
        if self.window == 0 {
            return Err(Error::shape("pool window must be positive"));
        }
        if h % self.window != 0 || w % self.window != 0 {
            return Err(Error::shape(format!(
                "pool window {} does not divide input {h}×{w}",
                self.window
            )));
        }
        Ok((h / self.window, w / self.window, c))
    }
}

/// Valid convolution with stride, bias and activation.
///
/// Returns the activated output and the pre-activation map (cached for the
/// backward pass).
pub fn conv_forward(z: &Tensor, spec: &ConvSpec) -> Result<(Tensor, Tensor)> {
    let dims = z.dims3()?;
    let (oh, ow, oc) = spec.conv_out_dims(dims)?;
    let (_, w, c) = dims;
    let mut preact = Tensor::zeros(&[oh, ow, oc])?;
    let zd = z.data();
    let pd = preact.data_mut();
    let mut acc = vec![0.0; oc];
    for oy in 0..oh {
        for ox in 0..ow {
            acc.copy_from_slice(&spec.bias);
            for ky in 0..spec.kh {
                let iy = oy * spec.stride + ky;
                for kx in 0..spec.kw {
                    let ix = ox * spec.stride + kx;
                    let zbase = (iy * w + ix) * c;
                    let kbase = (ky * spec.kw + kx) * c * oc;
                    for i in 0..c {
                        let zv = zd[zbase + i];
                        let krow = &spec.kernel[kbase + i * oc..kbase + (i + 1) * oc];
                        for (a, k) in acc.iter_mut().zip(krow) {
                            *a += zv * k;
                        }
                    }
                }
            }
            pd[(oy * ow + ox) * oc..(oy * ow + ox + 1) * oc].copy_from_slice(&acc);
        }
    }
    let mut out = preact.clone();
    for v in out.data_mut() {
        *v = spec.activation.apply(*v);
    }
    Ok((out, preact))
}

/// Gradients of a convolution: (kernel grads, bias grads, input grads).
pub fn conv_backward(
    z: &Tensor,
    spec: &ConvSpec,
    preact: &Tensor,
    grad_out: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    let dims = z.dims3()?;
    let (oh, ow, oc) = spec.conv_out_dims(dims)?;
    if grad_out.dims() != [oh, ow, oc] || preact.dims() != [oh, ow, oc] {
        return Err(Error::Contract(
            "convolution backward called with mismatched trace shapes".into(),
        ));
    }
    let (_, w, c) = dims;
    let mut gk = vec![0.0; spec.kernel.len()];
    let mut gb = vec![0.0; oc];
    let mut gz = Tensor::zeros(&[dims.0, dims.1, dims.2])?;
    let zd = z.data();
    let gzd = gz.data_mut();
    let mut gpre = vec![0.0; oc];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * oc;
            for j in 0..oc {
                gpre[j] = grad_out.data()[obase + j]
                    * spec.activation.derivative(preact.data()[obase + j]);
                gb[j] += gpre[j];
            }
            for ky in 0..spec.kh {
                let iy = oy * spec.stride + ky;
                for kx in 0..spec.kw {
                    let ix = ox * spec.stride + kx;
                    let zbase = (iy * w + ix) * c;
                    let kbase = (ky * spec.kw + kx) * c * oc;
                    for i in 0..c {
                        let zv = zd[zbase + i];
                        let krow = &spec.kernel[kbase + i * oc..kbase + (i + 1) * oc];
                        let gkrow = &mut gk[kbase + i * oc..kbase + (i + 1) * oc];
                        let mut gi = 0.0;
                        for j in 0..oc {
                            gkrow[j] += zv * gpre[j];
                            gi += krow[j] * gpre[j];
                        }
                        gzd[zbase + i] += gi;
                    }
                }
            }
        }
    }
    Ok((gk, gb, gz))
}

/// Non-overlapping max-pool. Returns the pooled map and, per output cell,
/// the flat input index of the maximal element (first one on ties).
pub fn maxpool_forward(z: &Tensor, spec: &PoolSpec) -> Result<(Tensor, Vec<u32>)> {
    let dims = z.dims3()?;
    let (oh, ow, c) = spec.out_dims(dims)?;
    let (_, w, _) = dims;
    debug_assert!(z.len() < u32::MAX as usize);
    let s = spec.window;
    let mut out = Tensor::zeros(&[oh, ow, c])?;
    let mut argmax = vec![0u32; oh * ow * c];
    let zd = z.data();
    let od = out.data_mut();
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for wy in 0..s {
                    for wx in 0..s {
                        let idx = ((oy * s + wy) * w + ox * s + wx) * c + ch;
                        // Strict > keeps the first maximal element on ties.
                        if zd[idx] > best {
                            best = zd[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (oy * ow + ox) * c + ch;
                od[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Max-pool backward: routes each output gradient to its argmax position.
pub fn maxpool_backward(
    input_dims: (usize, usize, usize),
    argmax: &[u32],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let mut gz = Tensor::zeros(&[input_dims.0, input_dims.1, input_dims.2])?;
    if grad_out.len() != argmax.len() {
        return Err(Error::Contract(
            "max-pool backward called with mismatched trace shapes".into(),
        ));
    }
    let gzd = gz.data_mut();
    for (g, &idx) in grad_out.data().iter().zip(argmax) {
        gzd[idx as usize] += g;
    }
    Ok(gz)
}

/// Transposed convolution: each input element scatters a kernel-shaped
/// patch into the output with stride `factor`; overlaps sum. Bias and
/// activation are applied after the scatter.
pub fn deconv_forward(z: &Tensor, spec: &ConvSpec, factor: usize) -> Result<(Tensor, Tensor)> {
    let dims = z.dims3()?;
    let (oh, ow, oc) = spec.deconv_out_dims(dims, factor)?;
    let (h, w, c) = dims;
    let mut preact = Tensor::zeros(&[oh, ow, oc])?;
    let zd = z.data();
    let pd = preact.data_mut();
    for oy in 0..h {
        for ox in 0..w {
            let zbase = (oy * w + ox) * c;
            for ky in 0..spec.kh {
                let ty = oy * factor + ky;
                for kx in 0..spec.kw {
                    let tx = ox * factor + kx;
                    let tbase = (ty * ow + tx) * oc;
                    let kbase = (ky * spec.kw + kx) * c * oc;
                    for i in 0..c {
                        let zv = zd[zbase + i];
                        if zv == 0.0 {
                            continue;
                        }
                        let krow = &spec.kernel[kbase + i * oc..kbase + (i + 1) * oc];
                        let prow = &mut pd[tbase..tbase + oc];
                        for (p, k) in prow.iter_mut().zip(krow) {
                            *p += zv * k;
                        }
                    }
                }
            }
        }
    }
    for (t, prow) in pd.chunks_mut(oc).enumerate() {
        let _ = t;
        for (p, b) in prow.iter_mut().zip(&spec.bias) {
            *p += b;
        }
    }
    let mut out = preact.clone();
    for v in out.data_mut() {
        *v = spec.activation.apply(*v);
    }
    Ok((out, preact))
}

/// Gradients of a transposed convolution.
pub fn deconv_backward(
    z: &Tensor,
    spec: &ConvSpec,
    factor: usize,
    preact: &Tensor,
    grad_out: &Tensor,
) -> Result<(Vec<f64>, Vec<f64>, Tensor)> {
    let dims = z.dims3()?;
    let (oh, ow, oc) = spec.deconv_out_dims(dims, factor)?;
    if grad_out.dims() != [oh, ow, oc] || preact.dims() != [oh, ow, oc] {
        return Err(Error::Contract(
            "deconvolution backward called with mismatched trace shapes".into(),
        ));
    }
    let (h, w, c) = dims;
    let mut gpre = vec![0.0; oh * ow * oc];
    for (gp, (g, p)) in gpre
        .iter_mut()
        .zip(grad_out.data().iter().zip(preact.data()))
    {
        *gp = g * spec.activation.derivative(*p);
    }
    let mut gb = vec![0.0; oc];
    for row in gpre.chunks(oc) {
        for (b, g) in gb.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut gk = vec![0.0; spec.kernel.len()];
    let mut gz = Tensor::zeros(&[h, w, c])?;
    let zd = z.data();
    let gzd = gz.data_mut();
    for oy in 0..h {
        for ox in 0..w {
            let zbase = (oy * w + ox) * c;
            for ky in 0..spec.kh {
                let ty = oy * factor + ky;
                for kx in 0..spec.kw {
                    let tx = ox * factor + kx;
                    let tbase = (ty * ow + tx) * oc;
                    let kbase = (ky * spec.kw + kx) * c * oc;
                    for i in 0..c {
                        let zv = zd[zbase + i];
                        let krow = &spec.kernel[kbase + i * oc..kbase + (i + 1) * oc];
                        let gkrow = &mut gk[kbase + i * oc..kbase + (i + 1) * oc];
                        let grow = &gpre[tbase..tbase + oc];
                        let mut gi = 0.0;
                        for j in 0..oc {
                            gkrow[j] += zv * grow[j];
                            gi += krow[j] * grow[j];
                        }
                        gzd[zbase + i] += gi;
                    }
                }
            }
        }
    }
    Ok((gk, gb, gz))
}

/// One layer of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvSpec),
    Pool(PoolSpec),
    Deconv { spec: ConvSpec, factor: usize },
}

impl Layer {
    fn out_dims(&self, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        match self {
            Layer::Conv(spec) => spec.conv_out_dims(dims),
            Layer::Pool(spec) => spec.out_dims(dims),
            Layer::Deconv { spec, factor } => spec.deconv_out_dims(dims, *factor),
        }
    }
}

/// The optional skip merge: output of layer `source` is 1×1-projected
/// (`proj` is source_ch×target_ch) and summed into the output of layer
/// `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipSpec {
    pub source: usize,
    pub target: usize,
    pub proj: Vec<f64>,
}

/// The full feature extractor: an ordered layer list plus optional skip.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<Layer>,
    pub skip: Option<SkipSpec>,
}

/// Per-layer cached state from a forward pass.
#[derive(Clone, Debug)]
pub enum LayerTrace {
    Conv { input: Tensor, preact: Tensor },
    Pool { input: Tensor, argmax: Vec<u32> },
    Deconv { input: Tensor, preact: Tensor },
}

/// Forward trace of the whole backbone.
#[derive(Clone, Debug)]
pub struct BackboneTrace {
    layers: Vec<LayerTrace>,
    skip_source_out: Option<Tensor>,
}

/// Gradients for one layer's weights.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerGrads {
    Conv { kernel: Vec<f64>, bias: Vec<f64> },
    Pool,
    Deconv { kernel: Vec<f64>, bias: Vec<f64> },
}

/// Gradients for every backbone weight.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrads {
    pub layers: Vec<LayerGrads>,
    pub skip_proj: Option<Vec<f64>>,
}

impl Backbone {
    /// Checks the whole graph against an input shape and returns every
    /// layer's output dims. Shape problems name the offending layer.
    pub fn validate(&self, input_dims: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        if self.layers.is_empty() {
            return Err(Error::shape("backbone needs at least one layer"));
        }
        let mut dims = input_dims;
        let mut all = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            dims = layer.out_dims(dims).map_err(|e| match e {
                Error::Shape { msg, .. } => Error::shape_at(l, msg),
                Error::Dimension { context, expected, got } => Error::shape_at(
                    l,
                    format!("{context}: expected {expected}, got {got}"),
                ),
                other => other,
            })?;
            all.push(dims);
        }
        if let Some(skip) = &self.skip {
            if skip.source >= skip.target || skip.target >= self.layers.len() {
                return Err(Error::shape(format!(
                    "skip must run forward: source {} target {} invalid for {} layers",
                    skip.source,
                    skip.target,
                    self.layers.len()
                )));
            }
            let s = all[skip.source];
            let t = all[skip.target];
            if (s.0, s.1) != (t.0, t.1) {
                return Err(Error::shape(format!(
                    "skip merge needs matching spatial dims: source {}×{} vs target {}×{}",
                    s.0, s.1, t.0, t.1
                )));
            }
            if skip.proj.len() != s.2 * t.2 {
                return Err(Error::Dimension {
                    context: "skip projection matrix",
                    expected: s.2 * t.2,
                    got: skip.proj.len(),
                });
            }
        }
        Ok(all)
    }

    /// Number of channels in the final feature map.
    pub fn out_channels(&self) -> usize {
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Conv(s) => return s.out_ch,
                Layer::Deconv { spec, .. } => return spec.out_ch,
                Layer::Pool(_) => continue,
            }
        }
        0
    }

    /// Runs the network, returning the feature map and the full trace.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, BackboneTrace)> {
        self.validate(image.dims3()?)?;
        let mut cur = image.clone();
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut skip_source_out = None;
        for (l, layer) in self.layers.iter().enumerate() {
            let next = match layer {
                Layer::Conv(spec) => {
                    let (out, preact) = conv_forward(&cur, spec)?;
                    traces.push(LayerTrace::Conv { input: cur, preact });
                    out
                }
                Layer::Pool(spec) => {
                    let (out, argmax) = maxpool_forward(&cur, spec)?;
                    traces.push(LayerTrace::Pool { input: cur, argmax });
                    out
                }
                Layer::Deconv { spec, factor } => {
                    let (out, preact) = deconv_forward(&cur, spec, *factor)?;
                    traces.push(LayerTrace::Deconv { input: cur, preact });
                    out
                }
            };
            cur = next;
            if let Some(skip) = &self.skip {
                if skip.source == l {
                    skip_source_out = Some(cur.clone());
                }
                if skip.target == l {
                    let source = skip_source_out
                        .as_ref()
                        .expect("validate() guarantees source < target");
                    cur = skip_merge(source, &cur, &skip.proj)?;
                }
            }
        }
        Ok((
            cur,
            BackboneTrace {
                layers: traces,
                skip_source_out,
            },
        ))
    }

    /// Back-propagates a feature-map gradient through the whole network.
    /// Returns weight gradients and the gradient w.r.t. the input image.
    pub fn backward(
        &self,
        trace: &BackboneTrace,
        grad_features: &Tensor,
    ) -> Result<(BackboneGrads, Tensor)> {
        if trace.layers.len() != self.layers.len() {
            return Err(Error::Contract(
                "backbone trace does not match this architecture".into(),
            ));
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        for _ in 0..self.layers.len() {
            grads.push(LayerGrads::Pool); // placeholder, overwritten below
        }
        let mut skip_proj_grad: Option<Vec<f64>> = None;
        let mut skip_source_grad: Option<Tensor> = None;
        let mut g = grad_features.clone();
        for l in (0..self.layers.len()).rev() {
            if let Some(skip) = &self.skip {
                if skip.target == l {
                    let source = trace
                        .skip_source_out
                        .as_ref()
                        .expect("forward stored the skip source");
                    let (gp, gs) = skip_merge_backward(source, &g, &skip.proj)?;
                    skip_proj_grad = Some(gp);
                    skip_source_grad = Some(gs);
                }
            }
            g = match (&self.layers[l], &trace.layers[l]) {
                (Layer::Conv(spec), LayerTrace::Conv { input, preact }) => {
                    let (gk, gb, gz) = conv_backward(input, spec, preact, &g)?;
                    grads[l] = LayerGrads::Conv { kernel: gk, bias: gb };
                    gz
                }
                (Layer::Pool(_), LayerTrace::Pool { input, argmax }) => {
                    grads[l] = LayerGrads::Pool;
                    maxpool_backward(input.dims3()?, argmax, &g)?
                }
                (Layer::Deconv { spec, factor }, LayerTrace::Deconv { input, preact }) => {
                    let (gk, gb, gz) = deconv_backward(input, spec, *factor, preact, &g)?;
                    grads[l] = LayerGrads::Deconv { kernel: gk, bias: gb };
                    gz
                }
                _ => {
                    return Err(Error::Contract(format!(
                        "trace kind mismatch at layer {l} (stale trace?)"
                    )))
                }
            };
            if let Some(skip) = &self.skip {
                // g now holds the gradient w.r.t. the output of layer l−1;
                // add the skip branch when that output is the skip source.
                if l > 0 && skip.source == l - 1 {
                    let gs = skip_source_grad
                        .take()
                        .expect("skip target lies after source");
                    for (a, b) in g.data_mut().iter_mut().zip(gs.data()) {
                        *a += b;
                    }
                }
            }
        }
        Ok((
            BackboneGrads {
                layers: grads,
                skip_proj: skip_proj_grad,
            },
            g,
        ))
    }

    /// Distance of a forward pass from the nearest activation kink: the
    /// smallest |pre-activation| over every ReLU unit and the smallest
    /// strict winner-vs-runner-up gap over every pooling window.
    ///
    /// Finite-difference probes of the backward pass are only trustworthy
    /// when this margin comfortably exceeds the probe's reach, so gradient
    /// checking jitters its input until the margin is healthy. Exact
    /// pooling ties are skipped: they arise from spatially constant
    /// activations whose tied entries share one derivative, so the routing
    /// choice cannot change the result. `INFINITY` when the network has no
    /// ReLU or pooling layer.
    pub fn kink_margin(&self, trace: &BackboneTrace) -> f64 {
        let mut margin = f64::INFINITY;
        for (layer, lt) in self.layers.iter().zip(&trace.layers) {
            match (layer, lt) {
                (Layer::Conv(spec), LayerTrace::Conv { preact, .. })
                | (Layer::Deconv { spec, .. }, LayerTrace::Deconv { preact, .. }) => {
                    if matches!(spec.activation, Activation::Relu) {
                        for v in preact.data() {
                            margin = margin.min(v.abs());
                        }
                    }
                }
                (Layer::Pool(spec), LayerTrace::Pool { input, .. }) => {
                    let Ok((h, w, c)) = input.dims3() else { continue };
                    let f = spec.window;
                    for oy in 0..h / f {
                        for ox in 0..w / f {
                            for ch in 0..c {
                                let mut top = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for dy in 0..f {
                                    for dx in 0..f {
                                        let v = input.data()
                                            [((oy * f + dy) * w + (ox * f + dx)) * c + ch];
                                        if v > top {
                                            second = top;
                                            top = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                let gap = top - second;
                                if gap > 0.0 {
                                    margin = margin.min(gap);
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

/// target + proj(source), pixelwise; proj is source_ch×target_ch.
fn skip_merge(source: &Tensor, target: &Tensor, proj: &[f64]) -> Result<Tensor> {
    let (h, w, sc) = source.dims3()?;
    let (th, tw, tc) = target.dims3()?;
    if (h, w) != (th, tw) || proj.len() != sc * tc {
        return Err(Error::Contract("skip merge shape mismatch".into()));
    }
    let mut out = target.clone();
    let od = out.data_mut();
    let sd = source.data();
    for px in 0..h * w {
        let srow = &sd[px * sc..(px + 1) * sc];
        let orow = &mut od[px * tc..(px + 1) * tc];
        for (i, &sv) in srow.iter().enumerate() {
            if sv == 0.0 {
                continue;
            }
            let prow = &proj[i * tc..(i + 1) * tc];
            for (o, p) in orow.iter_mut().zip(prow) {
                *o += sv * p;
            }
        }
    }
    Ok(out)
}

/// Gradients of the skip merge w.r.t. the projection and the source map.
/// The gradient w.r.t. the target branch is the incoming gradient itself.
fn skip_merge_backward(source: &Tensor, grad: &Tensor, proj: &[f64]) -> Result<(Vec<f64>, Tensor)> {
    let (h, w, sc) = source.dims3()?;
    let (_, _, tc) = grad.dims3()?;
    let mut gp = vec![0.0; proj.len()];
    let mut gs = Tensor::zeros(&[h, w, sc])?;
    let sd = source.data();
    let gd = grad.data();
    let gsd = gs.data_mut();
    for px in 0..h * w {
        let srow = &sd[px * sc..(px + 1) * sc];
        let grow = &gd[px * tc..(px + 1) * tc];
        for i in 0..sc {
            let prow = &proj[i * tc..(i + 1) * tc];
            let gprow = &mut gp[i * tc..(i + 1) * tc];
            let mut acc = 0.0;
            for j in 0..tc {
                gprow[j] += srow[i] * grow[j];
                acc += prow[j] * grow[j];
            }
            gsd[px * sc + i] += acc;
        }
    }
    Ok((gp, gs))
}

/// Weight-free description of a backbone, used by configs and checkpoints.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerDesc {
    Conv { kernel: usize, channels: usize, stride: usize, relu: bool },
    Pool { window: usize },
    Deconv { kernel: usize, channels: usize, factor: usize, relu: bool },
}

/// Architecture description: layers plus optional skip (source, target).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchDesc {
    pub layers: Vec<LayerDesc>,
    pub skip: Option<(usize, usize)>,
}

impl ArchDesc {
    /// Default architecture for 32×32 inputs: two conv(5×5,16)+ReLU+pool(2)
    /// stages, then one ×4 transposed convolution back to full resolution
    /// (32 → 28 → 14 → 10 → 5 → 32, the last step with a 16×16 kernel).
    pub fn toy() -> ArchDesc {
        ArchDesc {
            layers: vec![
                LayerDesc::Conv { kernel: 5, channels: 16, stride: 1, relu: true },
                LayerDesc::Pool { window: 2 },
                LayerDesc::Conv { kernel: 5, channels: 16, stride: 1, relu: true },
                LayerDesc::Pool { window: 2 },
                LayerDesc::Deconv { kernel: 16, channels: 16, factor: 4, relu: false },
            ],
            skip: None,
        }
    }

    /// Skip variant for 32×32 inputs: the decoder upsamples in two ×2 steps
    /// and the first step is fused with the (projected) first pooling map
    /// (5 → 14 = pool-1 resolution → 32).
    pub fn toy_skip() -> ArchDesc {
        ArchDesc {
            layers: vec![
                LayerDesc::Conv { kernel: 5, channels: 16, stride: 1, relu: true },
                LayerDesc::Pool { window: 2 },
                LayerDesc::Conv { kernel: 5, channels: 16, stride: 1, relu: true },
                LayerDesc::Pool { window: 2 },
                LayerDesc::Deconv { kernel: 6, channels: 16, factor: 2, relu: false },
                LayerDesc::Deconv { kernel: 6, channels: 16, factor: 2, relu: false },
            ],
            skip: Some((1, 4)),
        }
    }

    /// Small architecture for 8×8 gradient-check inputs (8 → 6 → 3 → 8).
    pub fn micro() -> ArchDesc {
        ArchDesc {
            layers: vec![
                LayerDesc::Conv { kernel: 3, channels: 4, stride: 1, relu: true },
                LayerDesc::Pool { window: 2 },
                LayerDesc::Deconv { kernel: 4, channels: 4, factor: 2, relu: false },
            ],
            skip: None,
        }
    }

    /// Instantiates the description with randomly initialized weights.
    pub fn build<R: Rng + ?Sized>(&self, in_channels: usize, rng: &mut R) -> Result<Backbone> {
        let mut channels = in_channels;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut out_channels_at: Vec<usize> = Vec::with_capacity(self.layers.len());
        for desc in &self.layers {
            let layer = match *desc {
                LayerDesc::Conv { kernel, channels: ch, stride, relu } => {
                    let act = if relu { Activation::Relu } else { Activation::None };
                    let spec = ConvSpec::he_init(kernel, kernel, channels, ch, stride, act, rng)?;
                    channels = ch;
                    Layer::Conv(spec)
                }
                LayerDesc::Pool { window } => Layer::Pool(PoolSpec { window }),
                LayerDesc::Deconv { kernel, channels: ch, factor, relu } => {
                    let act = if relu { Activation::Relu } else { Activation::None };
                    let spec = ConvSpec::he_init(kernel, kernel, channels, ch, 1, act, rng)?;
                    channels = ch;
                    Layer::Deconv { spec, factor }
                }
            };
            layers.push(layer);
            out_channels_at.push(channels);
        }
        let skip = match self.skip {
            None => None,
            Some((source, target)) => {
                if source >= target || target >= layers.len() {
                    return Err(Error::shape(format!(
                        "skip (source {source}, target {target}) invalid for {} layers",
                        layers.len()
                    )));
                }
                let sc = out_channels_at[source];
                let tc = out_channels_at[target];
                let dist = Normal::new(0.0, (2.0 / sc as f64).sqrt()).expect("valid normal");
                Some(SkipSpec {
                    source,
                    target,
                    proj: (0..sc * tc).map(|_| dist.sample(rng)).collect(),
                })
            }
        };
        Ok(Backbone { layers, skip })
    }
}

impl Backbone {
    /// Recovers the weight-free description (square kernels only).
    pub fn describe(&self) -> ArchDesc {
        let layers = self
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv(s) => LayerDesc::Conv {
                    kernel: s.kh,
                    channels: s.out_ch,
                    stride: s.stride,
                    relu: s.activation == Activation::Relu,
                },
                Layer::Pool(s) => LayerDesc::Pool { window: s.window },
                Layer::Deconv { spec, factor } => LayerDesc::Deconv {
                    kernel: spec.kh,
                    channels: spec.out_ch,
                    factor: *factor,
                    relu: spec.activation == Activation::Relu,
                },
            })
            .collect();
        ArchDesc {
            layers,
            skip: self.skip.as_ref().map(|s| (s.source, s.target)),
        }
    }
}
