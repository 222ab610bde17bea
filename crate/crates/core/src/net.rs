//! Layer zoo and network engine.
//!
//! Supported layers: convolution, locally-connected (untied kernels per
//! output position), max-pool, fully-connected, ReLU, dropout, and a
//! softmax cross-entropy head. Forward passes record every layer's
//! post-nonlinearity activation so statistics collection can read them
//! back; backward computes exact gradients of the summed batch loss.
//!
//! Layout conventions (row-major throughout):
//! - activations: `[n, c, h, w]`
//! - conv weights: `[out_c, in_c, kh, kw]`, bias `[out_c]`
//! - local weights: `[out_c, out_h, out_w, in_c, kh, kw]`, bias per output unit
//! - fc weights: `[out, in]` over the flattened `[c, h, w]` input

use crate::error::{Error, Result};
use crate::seed::stream_rng;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Local,
    Pool,
    Fc,
    Relu,
    Dropout,
    Softmax,
}

impl LayerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Local => "local",
            LayerKind::Pool => "pool",
            LayerKind::Fc => "fc",
            LayerKind::Relu => "relu",
            LayerKind::Dropout => "dropout",
            LayerKind::Softmax => "softmax",
        }
    }

    /// Only layers whose weights map one-to-one (or one-to-M for conv)
    /// onto connections can carry a dropping mask.
    pub fn prunable(&self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::Local | LayerKind::Fc)
    }
}

#[derive(Debug, Clone)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    /// Resolved from the shape chain during validation.
    pub in_channels: usize,
    /// For `fc` this is the output dimension; ignored for pool/relu/dropout/softmax.
    pub out_channels: usize,
    pub dropout_rate: f64,
}

impl LayerSpec {
    fn bare(name: &str, kind: LayerKind) -> Self {
        Self {
            name: name.to_string(),
            kind,
            kernel: (0, 0),
            stride: 1,
            padding: 0,
            in_channels: 0,
            out_channels: 0,
            dropout_rate: 0.0,
        }
    }

    pub fn conv(name: &str, kernel: (usize, usize), stride: usize, padding: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            out_channels,
            ..Self::bare(name, LayerKind::Conv)
        }
    }

    pub fn local(name: &str, kernel: (usize, usize), stride: usize, padding: usize, out_channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            out_channels,
            ..Self::bare(name, LayerKind::Local)
        }
    }

    pub fn pool(name: &str, kernel: (usize, usize), stride: usize) -> Self {
        Self {
            kernel,
            stride,
            ..Self::bare(name, LayerKind::Pool)
        }
    }

    pub fn fc(name: &str, out: usize) -> Self {
        Self {
            out_channels: out,
            ..Self::bare(name, LayerKind::Fc)
        }
    }

    pub fn relu(name: &str) -> Self {
        Self::bare(name, LayerKind::Relu)
    }

    pub fn dropout(name: &str, rate: f64) -> Self {
        Self {
            dropout_rate: rate,
            ..Self::bare(name, LayerKind::Dropout)
        }
    }

    pub fn softmax(name: &str) -> Self {
        Self::bare(name, LayerKind::Softmax)
    }
}

/// Channel-first activation shape of one layer boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub fn flat(&self) -> usize {
        self.c * self.h * self.w
    }
}

/// Fan-in/sharing geometry of a prunable layer.
///
/// `fan_in` is the number of input neurons each output unit connects to,
/// `shared_positions` how many connections share one weight scalar
/// (1 except for conv), and `units` how many independent weight groups
/// the layer has (output neurons, or feature maps for conv).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Connectivity {
    pub fan_in: usize,
    pub shared_positions: usize,
    pub units: usize,
}

/// Validated layer graph: the immutable structure a `Network` instantiates.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    /// Input image shape as (height, width, channels).
    pub input: (usize, usize, usize),
    /// Class count of the softmax head; 0 for headless (arithmetic-only) specs.
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    in_shapes: Vec<Shape3>,
    out_shapes: Vec<Shape3>,
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

fn conv_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl NetworkSpec {
    /// Validate the whole chain at construction; forward passes can then
    /// never hit a shape error.
    pub fn new(input: (usize, usize, usize), classes: usize, mut layers: Vec<LayerSpec>) -> Result<Self> {
        let (ih, iw, ic) = input;
        if ih == 0 || iw == 0 || ic == 0 {
            return Err(Error::Spec("input extents must be >= 1".into()));
        }
        if layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut in_shapes = Vec::with_capacity(layers.len());
        let mut out_shapes = Vec::with_capacity(layers.len());
        let mut cur = Shape3 { c: ic, h: ih, w: iw };

        for (idx, layer) in layers.iter_mut().enumerate() {
            if !valid_name(&layer.name) {
                return Err(Error::Spec(format!(
                    "layer name `{}` must be non-empty [A-Za-z0-9_.-]",
                    layer.name
                )));
            }
            if !seen.insert(layer.name.clone()) {
                return Err(Error::Spec(format!("duplicate layer name `{}`", layer.name)));
            }
            in_shapes.push(cur);
            layer.in_channels = cur.c;
            cur = match layer.kind {
                LayerKind::Conv | LayerKind::Local => {
                    let (kh, kw) = layer.kernel;
                    if kh == 0 || kw == 0 || layer.stride == 0 || layer.out_channels == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}`: kernel/stride/out_channels must be >= 1",
                            layer.name
                        )));
                    }
                    let oh = conv_extent(cur.h, kh, layer.stride, layer.padding);
                    let ow = conv_extent(cur.w, kw, layer.stride, layer.padding);
                    match (oh, ow) {
                        (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Shape3 {
                            c: layer.out_channels,
                            h: oh,
                            w: ow,
                        },
                        _ => {
                            return Err(Error::Spec(format!(
                                "layer `{}` (index {idx}): output size < 1 for input {}x{}",
                                layer.name, cur.h, cur.w
                            )))
                        }
                    }
                }
                LayerKind::Pool => {
                    let (kh, kw) = layer.kernel;
                    if kh == 0 || kw == 0 || layer.stride == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}`: pool kernel/stride must be >= 1",
                            layer.name
                        )));
                    }
                    if layer.padding != 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}`: pool padding is not supported",
                            layer.name
                        )));
                    }
                    match (
                        conv_extent(cur.h, kh, layer.stride, 0),
                        conv_extent(cur.w, kw, layer.stride, 0),
                    ) {
                        (Some(oh), Some(ow)) => Shape3 { c: cur.c, h: oh, w: ow },
                        _ => {
                            return Err(Error::Spec(format!(
                                "layer `{}`: pool window exceeds input {}x{}",
                                layer.name, cur.h, cur.w
                            )))
                        }
                    }
                }
                LayerKind::Fc => {
                    if layer.out_channels == 0 {
                        return Err(Error::Spec(format!(
                            "layer `{}`: fc output dimension must be >= 1",
                            layer.name
                        )));
                    }
                    Shape3 {
                        c: layer.out_channels,
                        h: 1,
                        w: 1,
                    }
                }
                LayerKind::Relu => cur,
                LayerKind::Dropout => {
                    if !(0.0..1.0).contains(&layer.dropout_rate) {
                        return Err(Error::Spec(format!(
                            "layer `{}`: dropout rate must be in [0, 1)",
                            layer.name
                        )));
                    }
                    cur
                }
                LayerKind::Softmax => {
                    if idx + 1 != layers.len() {
                        return Err(Error::Spec("softmax must be the last layer".into()));
                    }
                    if idx == 0 {
                        return Err(Error::Spec("softmax needs a preceding layer".into()));
                    }
                    Shape3 {
                        c: cur.flat(),
                        h: 1,
                        w: 1,
                    }
                }
            };
            out_shapes.push(cur);
        }

        let spec = Self {
            input,
            classes,
            layers,
            in_shapes,
            out_shapes,
        };
        if spec.softmax_index().is_some() && classes > 0 && spec.logit_dim() != Some(classes) {
            return Err(Error::Spec(format!(
                "softmax input dimension {} != class count {}",
                spec.logit_dim().unwrap_or(0),
                classes
            )));
        }
        Ok(spec)
    }

    /// Extra checks required before the spec can be trained.
    pub fn validate_trainable(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Spec("training requires classes >= 2".into()));
        }
        match self.softmax_index() {
            Some(_) if self.logit_dim() == Some(self.classes) => Ok(()),
            Some(_) => Err(Error::Spec("softmax head does not match class count".into())),
            None => Err(Error::Spec("training requires a trailing softmax layer".into())),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn in_shape(&self, layer: usize) -> Shape3 {
        self.in_shapes[layer]
    }

    pub fn out_shape(&self, layer: usize) -> Shape3 {
        self.out_shapes[layer]
    }

    pub fn softmax_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::Softmax)
    }

    fn logit_dim(&self) -> Option<usize> {
        self.softmax_index().map(|i| self.in_shapes[i].flat())
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn prunable_layer_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].kind.prunable())
            .collect()
    }

    /// Weight tensor shape of a parameterized layer.
    pub fn weight_shape(&self, layer: usize) -> Option<Vec<usize>> {
        let l = &self.layers[layer];
        let i = self.in_shapes[layer];
        let o = self.out_shapes[layer];
        match l.kind {
            LayerKind::Conv => Some(vec![o.c, i.c, l.kernel.0, l.kernel.1]),
            LayerKind::Local => Some(vec![o.c, o.h, o.w, i.c, l.kernel.0, l.kernel.1]),
            LayerKind::Fc => Some(vec![o.c, i.flat()]),
            _ => None,
        }
    }

    pub fn bias_shape(&self, layer: usize) -> Option<Vec<usize>> {
        let l = &self.layers[layer];
        let o = self.out_shapes[layer];
        match l.kind {
            LayerKind::Conv | LayerKind::Fc => Some(vec![o.c]),
            LayerKind::Local => Some(vec![o.c, o.h, o.w]),
            _ => None,
        }
    }

    pub fn weight_count(&self, layer: usize) -> usize {
        self.weight_shape(layer).map_or(0, |s| s.iter().product())
    }

    pub fn bias_count(&self, layer: usize) -> usize {
        self.bias_shape(layer).map_or(0, |s| s.iter().product())
    }

    /// Total weight scalars across all parameterized layers (biases excluded).
    pub fn total_weights(&self) -> usize {
        (0..self.layers.len()).map(|i| self.weight_count(i)).sum()
    }

    /// (K, M, N) geometry of a prunable layer.
    pub fn connectivity(&self, layer: usize) -> Result<Connectivity> {
        let l = &self.layers[layer];
        let i = self.in_shapes[layer];
        let o = self.out_shapes[layer];
        match l.kind {
            LayerKind::Fc => Ok(Connectivity {
                fan_in: i.flat(),
                shared_positions: 1,
                units: o.c,
            }),
            LayerKind::Local => Ok(Connectivity {
                fan_in: i.c * l.kernel.0 * l.kernel.1,
                shared_positions: 1,
                units: o.c * o.h * o.w,
            }),
            LayerKind::Conv => Ok(Connectivity {
                fan_in: i.c * l.kernel.0 * l.kernel.1,
                shared_positions: o.h * o.w,
                units: o.c,
            }),
            _ => Err(Error::NotPrunable(l.name.clone())),
        }
    }

    /// Flat input index feeding fan-in slot `k` of `unit` in an fc or local
    /// layer. `None` means the slot reads zero padding, not a real neuron.
    pub fn unit_fan_in_source(&self, layer: usize, unit: usize, k: usize) -> Option<usize> {
        let l = &self.layers[layer];
        let i = self.in_shapes[layer];
        match l.kind {
            LayerKind::Fc => Some(k),
            LayerKind::Local => {
                let o = self.out_shapes[layer];
                let pos = unit % (o.h * o.w);
                let (oh, ow) = (pos / o.w, pos % o.w);
                self.window_source(i, l, oh, ow, k)
            }
            _ => None,
        }
    }

    /// Flat input index feeding fan-in slot `k` of a conv layer at output
    /// position `pos` (row-major over the output plane).
    pub fn conv_fan_in_source(&self, layer: usize, pos: usize, k: usize) -> Option<usize> {
        let l = &self.layers[layer];
        if l.kind != LayerKind::Conv {
            return None;
        }
        let i = self.in_shapes[layer];
        let o = self.out_shapes[layer];
        let (oh, ow) = (pos / o.w, pos % o.w);
        self.window_source(i, l, oh, ow, k)
    }

    fn window_source(&self, i: Shape3, l: &LayerSpec, oh: usize, ow: usize, k: usize) -> Option<usize> {
        let (kh, kw) = l.kernel;
        let ic = k / (kh * kw);
        let dy = (k / kw) % kh;
        let dx = k % kw;
        let y = (oh * l.stride + dy) as isize - l.padding as isize;
        let x = (ow * l.stride + dx) as isize - l.padding as isize;
        if y < 0 || y >= i.h as isize || x < 0 || x >= i.w as isize {
            return None;
        }
        Some((ic * i.h + y as usize) * i.w + x as usize)
    }

    /// Stable 64-bit digest of the structure; stored in checkpoints so a
    /// file can refuse to load against the wrong spec.
    pub fn digest(&self) -> u64 {
        let mut s = format!(
            "input={},{},{};classes={}",
            self.input.0, self.input.1, self.input.2, self.classes
        );
        for l in &self.layers {
            s.push_str(&format!(
                ";{}:{}:{}x{}:{}:{}:{}:{}",
                l.name,
                l.kind.as_str(),
                l.kernel.0,
                l.kernel.1,
                l.stride,
                l.padding,
                l.out_channels,
                l.dropout_rate
            ));
        }
        crate::seed::fnv1a64(s.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-layer activations retained from one forward pass.
///
/// `outputs[i]` is the post-nonlinearity value the `i`-th layer transmits
/// downstream. Dropout scale masks are kept only for train-mode traces;
/// they are what makes the trace usable for `backward`.
#[derive(Debug)]
pub struct ForwardTrace {
    pub outputs: Vec<Tensor>,
    dropout_masks: Vec<Option<Vec<f64>>>,
    pub mode: Mode,
    pub batch_len: usize,
}

impl ForwardTrace {
    pub fn probs(&self) -> &Tensor {
        self.outputs.last().expect("trace has layers")
    }
}

/// Gradients of the summed batch loss for every parameterized layer.
#[derive(Debug)]
pub struct Gradients {
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
}

/// An instantiated `NetworkSpec`: per-layer weights and biases plus the
/// sparsification stage index this model belongs to.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub weights: Vec<Option<Tensor>>,
    pub biases: Vec<Option<Tensor>>,
    pub stage: u32,
}

impl Network {
    /// Zero-mean uniform init scaled by 1/sqrt(fan_in); biases start at 0.
    pub fn init(spec: &NetworkSpec, seed: u64, gain: f64) -> Self {
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for (i, layer) in spec.layers.iter().enumerate() {
            match spec.weight_shape(i) {
                Some(wshape) => {
                    let fan_in = match layer.kind {
                        LayerKind::Fc => spec.in_shape(i).flat(),
                        _ => spec.in_shape(i).c * layer.kernel.0 * layer.kernel.1,
                    };
                    let bound = gain / (fan_in as f64).sqrt();
                    let mut rng = stream_rng(seed, &["init", &layer.name]);
                    let n: usize = wshape.iter().product();
                    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    weights.push(Some(Tensor::new(wshape, data).expect("init shape")));
                    biases.push(Some(Tensor::zeros(spec.bias_shape(i).expect("bias shape"))));
                }
                None => {
                    weights.push(None);
                    biases.push(None);
                }
            }
        }
        Network {
            spec: spec.clone(),
            weights,
            biases,
            stage: 0,
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s0 = self.spec.in_shape(0);
        let want = [s0.c, s0.h, s0.w];
        let got = batch.shape();
        if got.len() != 4 || got[1..] != want {
            return Err(Error::ShapeMismatch {
                left: got.to_vec(),
                right: vec![0, want[0], want[1], want[2]],
            });
        }
        Ok(got[0])
    }

    /// Run the network over a batch, returning every layer's activation.
    ///
    /// Dropout fires only in train mode and scales kept units by
    /// 1/(1-rate), so eval is a plain deterministic pass.
    pub fn forward(&self, batch: &Tensor, mode: Mode, dropout_seed: u64) -> Result<ForwardTrace> {
        let n = self.check_batch(batch)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.spec.num_layers());
        let mut dropout_masks: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.spec.num_layers());

        for (i, layer) in self.spec.layers.iter().enumerate() {
            let input = if i == 0 { batch } else { &outputs[i - 1] };
            let out_shape = self.spec.out_shape(i);
            let mut mask = None;
            let out = match layer.kind {
                LayerKind::Conv => self.conv_forward(i, input, n),
                LayerKind::Local => self.local_forward(i, input, n),
                LayerKind::Pool => self.pool_forward(i, input, n),
                LayerKind::Fc => self.fc_forward(i, input, n),
                LayerKind::Relu => {
                    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                    Tensor::new(input.shape().to_vec(), data)?
                }
                LayerKind::Dropout => {
                    if mode == Mode::Train && layer.dropout_rate > 0.0 {
                        let rate = layer.dropout_rate;
                        let scale = 1.0 / (1.0 - rate);
                        let mut rng = stream_rng(dropout_seed, &["dropout", &layer.name]);
                        let m: Vec<f64> = (0..input.len())
                            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
                            .collect();
                        let data = input.data().iter().zip(&m).map(|(v, s)| v * s).collect();
                        mask = Some(m);
                        Tensor::new(input.shape().to_vec(), data)?
                    } else {
                        input.clone()
                    }
                }
                LayerKind::Softmax => {
                    let classes = out_shape.flat();
                    let mut data = vec![0.0; n * classes];
                    for s in 0..n {
                        let row = &input.data()[s * classes..(s + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for (j, &v) in row.iter().enumerate() {
                            let e = (v - max).exp();
                            data[s * classes + j] = e;
                            z += e;
                        }
                        for j in 0..classes {
                            data[s * classes + j] /= z;
                        }
                    }
                    Tensor::new(vec![n, classes, 1, 1], data)?
                }
            };
            debug_assert_eq!(out.shape()[1..], [out_shape.c, out_shape.h, out_shape.w]);
            outputs.push(out);
            dropout_masks.push(mask);
        }

        Ok(ForwardTrace {
            outputs,
            dropout_masks,
            mode,
            batch_len: n,
        })
    }

    /// Logits feeding the softmax head.
    pub fn logits<'a>(&self, trace: &'a ForwardTrace) -> Result<&'a Tensor> {
        let si = self
            .spec
            .softmax_index()
            .ok_or_else(|| Error::Spec("network has no softmax head".into()))?;
        Ok(&trace.outputs[si - 1])
    }

    /// Summed cross-entropy over the batch, computed from logits via the
    /// stable log-sum-exp route.
    pub fn loss_sum(&self, trace: &ForwardTrace, labels: &[u32]) -> Result<f64> {
        let logits = self.logits(trace)?;
        let n = trace.batch_len;
        let classes = logits.len() / n;
        if labels.len() != n {
            return Err(Error::Stats(format!(
                "labels ({}) do not match batch ({n})",
                labels.len()
            )));
        }
        let mut loss = 0.0;
        for s in 0..n {
            let row = &logits.data()[s * classes..(s + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[s] as usize];
        }
        Ok(loss)
    }

    pub fn accuracy(&self, trace: &ForwardTrace, labels: &[u32]) -> Result<f64> {
        let probs = trace.probs();
        let n = trace.batch_len;
        let classes = probs.len() / n;
        if labels.len() != n {
            return Err(Error::Stats(format!(
                "labels ({}) do not match batch ({n})",
                labels.len()
            )));
        }
        let mut hits = 0usize;
        for s in 0..n {
            let row = &probs.data()[s * classes..(s + 1) * classes];
            let mut best = 0usize;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == labels[s] as usize {
                hits += 1;
            }
        }
        Ok(hits as f64 / n as f64)
    }

    /// Gradients of the summed softmax cross-entropy w.r.t. every weight
    /// and bias. Requires a train-mode trace (dropout caches retained).
    pub fn backward(&self, batch: &Tensor, trace: &ForwardTrace, labels: &[u32]) -> Result<Gradients> {
        if trace.mode != Mode::Train {
            return Err(Error::MissingCache);
        }
        if trace.outputs.len() != self.spec.num_layers() {
            return Err(Error::MissingCache);
        }
        let si = self
            .spec
            .softmax_index()
            .ok_or_else(|| Error::Spec("backward requires a softmax head".into()))?;
        let n = trace.batch_len;
        if labels.len() != n {
            return Err(Error::Stats(format!(
                "labels ({}) do not match batch ({n})",
                labels.len()
            )));
        }

        let probs = trace.probs();
        let classes = probs.len() / n;
        let mut grad = probs.data().to_vec();
        for s in 0..n {
            grad[s * classes + labels[s] as usize] -= 1.0;
        }
        let mut d_out = Tensor::new(probs.shape().to_vec(), grad)?;

        let mut gw: Vec<Option<Tensor>> = vec![None; self.spec.num_layers()];
        let mut gb: Vec<Option<Tensor>> = vec![None; self.spec.num_layers()];

        for i in (0..si).rev() {
            let input = if i == 0 { batch } else { &trace.outputs[i - 1] };
            let output = &trace.outputs[i];
            let layer = &self.spec.layers[i];
            d_out = match layer.kind {
                LayerKind::Conv => {
                    let (dw, db, din) = self.conv_backward(i, input, &d_out, n);
                    gw[i] = Some(dw);
                    gb[i] = Some(db);
                    din
                }
                LayerKind::Local => {
                    let (dw, db, din) = self.local_backward(i, input, &d_out, n);
                    gw[i] = Some(dw);
                    gb[i] = Some(db);
                    din
                }
                LayerKind::Fc => {
                    let (dw, db, din) = self.fc_backward(i, input, &d_out, n);
                    gw[i] = Some(dw);
                    gb[i] = Some(db);
                    din
                }
                LayerKind::Pool => self.pool_backward(i, input, &d_out, n),
                LayerKind::Relu => {
                    let data = d_out
                        .data()
                        .iter()
                        .zip(output.data())
                        .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
                        .collect();
                    Tensor::new(input.shape().to_vec(), data)?
                }
                LayerKind::Dropout => match &trace.dropout_masks[i] {
                    Some(m) => {
                        let data = d_out.data().iter().zip(m).map(|(g, s)| g * s).collect();
                        Tensor::new(input.shape().to_vec(), data)?
                    }
                    // rate 0 stores no mask; gradient passes through
                    None => d_out,
                },
                LayerKind::Softmax => unreachable!("softmax is the head"),
            };
        }

        Ok(Gradients {
            weights: gw,
            biases: gb,
        })
    }

    fn conv_forward(&self, i: usize, input: &Tensor, n: usize) -> Tensor {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let w = self.weights[i].as_ref().expect("conv weights").data();
        let b = self.biases[i].as_ref().expect("conv bias").data();
        let x = input.data();
        let mut out = vec![0.0f64; n * osz.flat()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            let xb = s * isz.flat();
            let ob = s * osz.flat();
            for oc in 0..osz.c {
                let wb_oc = oc * isz.c * kh * kw;
                let bias = b[oc];
                for oh in 0..osz.h {
                    let y0 = (oh * l.stride) as isize - l.padding as isize;
                    for ow in 0..osz.w {
                        let x0 = (ow * l.stride) as isize - l.padding as isize;
                        let mut acc = bias;
                        for ic in 0..isz.c {
                            let xc = xb + ic * ip;
                            let wc = wb_oc + ic * kh * kw;
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= isz.h as isize {
                                    continue;
                                }
                                let xr = xc + y as usize * isz.w;
                                let wr = wc + dy * kw;
                                for dx in 0..kw {
                                    let xx = x0 + dx as isize;
                                    if xx < 0 || xx >= isz.w as isize {
                                        continue;
                                    }
                                    acc += w[wr + dx] * x[xr + xx as usize];
                                }
                            }
                        }
                        out[ob + oc * op + oh * osz.w + ow] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, osz.c, osz.h, osz.w], out).expect("conv out")
    }

    fn conv_backward(&self, i: usize, input: &Tensor, d_out: &Tensor, n: usize) -> (Tensor, Tensor, Tensor) {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let w = self.weights[i].as_ref().expect("conv weights").data();
        let x = input.data();
        let g = d_out.data();
        let mut dw = vec![0.0f64; w.len()];
        let mut db = vec![0.0f64; osz.c];
        let mut dx = vec![0.0f64; x.len()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            let xb = s * isz.flat();
            let ob = s * osz.flat();
            for oc in 0..osz.c {
                let wb_oc = oc * isz.c * kh * kw;
                for oh in 0..osz.h {
                    let y0 = (oh * l.stride) as isize - l.padding as isize;
                    for ow in 0..osz.w {
                        let gv = g[ob + oc * op + oh * osz.w + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        db[oc] += gv;
                        let x0 = (ow * l.stride) as isize - l.padding as isize;
                        for ic in 0..isz.c {
                            let xc = xb + ic * ip;
                            let wc = wb_oc + ic * kh * kw;
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= isz.h as isize {
                                    continue;
                                }
                                let xr = xc + y as usize * isz.w;
                                let wr = wc + dy * kw;
                                for dx_i in 0..kw {
                                    let xx = x0 + dx_i as isize;
                                    if xx < 0 || xx >= isz.w as isize {
                                        continue;
                                    }
                                    let xi = xr + xx as usize;
                                    dw[wr + dx_i] += gv * x[xi];
                                    dx[xi] += gv * w[wr + dx_i];
                                }
                            }
                        }
                    }
                }
            }
        }
        // db computed above skips zero-gradient positions, which is exact:
        // their contribution is zero.
        (
            Tensor::new(self.spec.weight_shape(i).unwrap(), dw).unwrap(),
            Tensor::new(self.spec.bias_shape(i).unwrap(), db).unwrap(),
            Tensor::new(input.shape().to_vec(), dx).unwrap(),
        )
    }

    fn local_forward(&self, i: usize, input: &Tensor, n: usize) -> Tensor {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let k = isz.c * kh * kw;
        let w = self.weights[i].as_ref().expect("local weights").data();
        let b = self.biases[i].as_ref().expect("local bias").data();
        let x = input.data();
        let mut out = vec![0.0f64; n * osz.flat()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            let xb = s * isz.flat();
            let ob = s * osz.flat();
            for oc in 0..osz.c {
                for oh in 0..osz.h {
                    let y0 = (oh * l.stride) as isize - l.padding as isize;
                    for ow in 0..osz.w {
                        let unit = (oc * osz.h + oh) * osz.w + ow;
                        let wb = unit * k;
                        let x0 = (ow * l.stride) as isize - l.padding as isize;
                        let mut acc = b[unit];
                        for ic in 0..isz.c {
                            let xc = xb + ic * ip;
                            let wc = wb + ic * kh * kw;
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= isz.h as isize {
                                    continue;
                                }
                                let xr = xc + y as usize * isz.w;
                                let wr = wc + dy * kw;
                                for dx in 0..kw {
                                    let xx = x0 + dx as isize;
                                    if xx < 0 || xx >= isz.w as isize {
                                        continue;
                                    }
                                    acc += w[wr + dx] * x[xr + xx as usize];
                                }
                            }
                        }
                        out[ob + oc * op + oh * osz.w + ow] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, osz.c, osz.h, osz.w], out).expect("local out")
    }

    fn local_backward(&self, i: usize, input: &Tensor, d_out: &Tensor, n: usize) -> (Tensor, Tensor, Tensor) {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let k = isz.c * kh * kw;
        let w = self.weights[i].as_ref().expect("local weights").data();
        let x = input.data();
        let g = d_out.data();
        let mut dw = vec![0.0f64; w.len()];
        let mut db = vec![0.0f64; osz.flat()];
        let mut dx = vec![0.0f64; x.len()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            let xb = s * isz.flat();
            let ob = s * osz.flat();
            for oc in 0..osz.c {
                for oh in 0..osz.h {
                    let y0 = (oh * l.stride) as isize - l.padding as isize;
                    for ow in 0..osz.w {
                        let gv = g[ob + oc * op + oh * osz.w + ow];
                        if gv == 0.0 {
                            continue;
                        }
                        let unit = (oc * osz.h + oh) * osz.w + ow;
                        db[unit] += gv;
                        let wb = unit * k;
                        let x0 = (ow * l.stride) as isize - l.padding as isize;
                        for ic in 0..isz.c {
                            let xc = xb + ic * ip;
                            let wc = wb + ic * kh * kw;
                            for dy in 0..kh {
                                let y = y0 + dy as isize;
                                if y < 0 || y >= isz.h as isize {
                                    continue;
                                }
                                let xr = xc + y as usize * isz.w;
                                let wr = wc + dy * kw;
                                for dx_i in 0..kw {
                                    let xx = x0 + dx_i as isize;
                                    if xx < 0 || xx >= isz.w as isize {
                                        continue;
                                    }
                                    let xi = xr + xx as usize;
                                    dw[wr + dx_i] += gv * x[xi];
                                    dx[xi] += gv * w[wr + dx_i];
                                }
                            }
                        }
                    }
                }
            }
        }
        (
            Tensor::new(self.spec.weight_shape(i).unwrap(), dw).unwrap(),
            Tensor::new(self.spec.bias_shape(i).unwrap(), db).unwrap(),
            Tensor::new(input.shape().to_vec(), dx).unwrap(),
        )
    }

    fn pool_forward(&self, i: usize, input: &Tensor, n: usize) -> Tensor {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let x = input.data();
        let mut out = vec![0.0f64; n * osz.flat()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            for c in 0..isz.c {
                let xc = s * isz.flat() + c * ip;
                let oc = s * osz.flat() + c * op;
                for oh in 0..osz.h {
                    for ow in 0..osz.w {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..kh {
                            let y = oh * l.stride + dy;
                            if y >= isz.h {
                                continue;
                            }
                            for dx in 0..kw {
                                let xx = ow * l.stride + dx;
                                if xx >= isz.w {
                                    continue;
                                }
                                let v = x[xc + y * isz.w + xx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[oc + oh * osz.w + ow] = best;
                    }
                }
            }
        }
        Tensor::new(vec![n, osz.c, osz.h, osz.w], out).expect("pool out")
    }

    /// Routes each window's gradient to the first-scanned maximum, matching
    /// the forward pass's scan order exactly.
    fn pool_backward(&self, i: usize, input: &Tensor, d_out: &Tensor, n: usize) -> Tensor {
        let l = &self.spec.layers[i];
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let x = input.data();
        let g = d_out.data();
        let mut dx = vec![0.0f64; x.len()];
        let (ip, op) = (isz.h * isz.w, osz.h * osz.w);
        for s in 0..n {
            for c in 0..isz.c {
                let xc = s * isz.flat() + c * ip;
                let oc = s * osz.flat() + c * op;
                for oh in 0..osz.h {
                    for ow in 0..osz.w {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0usize;
                        for dy in 0..kh {
                            let y = oh * l.stride + dy;
                            if y >= isz.h {
                                continue;
                            }
                            for dx_i in 0..kw {
                                let xx = ow * l.stride + dx_i;
                                if xx >= isz.w {
                                    continue;
                                }
                                let idx = xc + y * isz.w + xx;
                                if x[idx] > best {
                                    best = x[idx];
                                    arg = idx;
                                }
                            }
                        }
                        dx[arg] += g[oc + oh * osz.w + ow];
                    }
                }
            }
        }
        Tensor::new(input.shape().to_vec(), dx).expect("pool grad")
    }

    fn fc_forward(&self, i: usize, input: &Tensor, n: usize) -> Tensor {
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let in_dim = isz.flat();
        let out_dim = osz.c;
        let w = self.weights[i].as_ref().expect("fc weights").data();
        let b = self.biases[i].as_ref().expect("fc bias").data();
        let x = input.data();
        let mut out = vec![0.0f64; n * out_dim];
        for s in 0..n {
            let xr = &x[s * in_dim..(s + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (wv, xv) in wr.iter().zip(xr) {
                    acc += wv * xv;
                }
                out[s * out_dim + o] = acc;
            }
        }
        Tensor::new(vec![n, out_dim, 1, 1], out).expect("fc out")
    }

    fn fc_backward(&self, i: usize, input: &Tensor, d_out: &Tensor, n: usize) -> (Tensor, Tensor, Tensor) {
        let isz = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let in_dim = isz.flat();
        let out_dim = osz.c;
        let w = self.weights[i].as_ref().expect("fc weights").data();
        let x = input.data();
        let g = d_out.data();
        let mut dw = vec![0.0f64; w.len()];
        let mut db = vec![0.0f64; out_dim];
        let mut dx = vec![0.0f64; x.len()];
        for s in 0..n {
            let xr = &x[s * in_dim..(s + 1) * in_dim];
            let dxr = &mut dx[s * in_dim..(s + 1) * in_dim];
            for o in 0..out_dim {
                let gv = g[s * out_dim + o];
                if gv == 0.0 {
                    continue;
                }
                db[o] += gv;
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                let dwr = &mut dw[o * in_dim..(o + 1) * in_dim];
                for j in 0..in_dim {
                    dwr[j] += gv * xr[j];
                    dxr[j] += gv * wr[j];
                }
            }
        }
        (
            Tensor::new(self.spec.weight_shape(i).unwrap(), dw).unwrap(),
            Tensor::new(self.spec.bias_shape(i).unwrap(), db).unwrap(),
            Tensor::new(input.shape().to_vec(), dx).unwrap(),
        )
    }
}
