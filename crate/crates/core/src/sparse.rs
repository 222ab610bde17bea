//! Structurally pruned network representation.
//!
//! [`densify_equivalent`] converts a masked dense network into an explicit
//! sparse form: each output unit keeps only the list of its surviving input
//! taps. Its forward pass is written as a gather over those lists, fully
//! independent of the mask-multiply machinery, so the two paths can be
//! checked against each other.

use crate::error::{Error, Result};
use crate::mask::DroppingMask;
use crate::net::{LayerKind, Network, Shape3};
use crate::tensor::Tensor;

/// One output neuron: surviving (input flat index, weight) taps.
#[derive(Debug, Clone)]
pub struct SparseUnit {
    pub bias: f64,
    pub taps: Vec<(usize, f64)>,
}

/// One conv feature map: surviving (fan-in slot, weight) taps, applied at
/// every output position.
#[derive(Debug, Clone)]
pub struct SparseKernel {
    pub bias: f64,
    pub taps: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
enum SparseLayer {
    Fc { units: Vec<SparseUnit> },
    Local { units: Vec<SparseUnit> },
    Conv { maps: Vec<SparseKernel> },
    Pool,
    Relu,
    Dropout,
    Softmax,
}

#[derive(Debug, Clone)]
pub struct SparseNetwork {
    spec: crate::net::NetworkSpec,
    layers: Vec<SparseLayer>,
}

/// Build the explicit sparse equivalent of `net` under `masks`.
///
/// Layers without a mask keep every tap. Returns an error for unknown or
/// mismatched masks, same as mask application.
pub fn densify_equivalent(net: &Network, masks: &[DroppingMask]) -> Result<SparseNetwork> {
    let spec = &net.spec;
    let mut by_layer: std::collections::HashMap<&str, &DroppingMask> = Default::default();
    for m in masks {
        let idx = spec.layer_index(&m.layer)?;
        if !spec.layers[idx].kind.prunable() {
            return Err(Error::NotPrunable(m.layer.clone()));
        }
        if spec.weight_count(idx) != m.len() {
            return Err(Error::MaskMismatch {
                layer: m.layer.clone(),
                mask_bits: m.len(),
                weights: spec.weight_count(idx),
            });
        }
        by_layer.insert(m.layer.as_str(), m);
    }

    let mut layers = Vec::with_capacity(spec.num_layers());
    for (i, layer) in spec.layers.iter().enumerate() {
        let sl = match layer.kind {
            LayerKind::Pool => SparseLayer::Pool,
            LayerKind::Relu => SparseLayer::Relu,
            LayerKind::Dropout => SparseLayer::Dropout,
            LayerKind::Softmax => SparseLayer::Softmax,
            LayerKind::Fc | LayerKind::Local | LayerKind::Conv => {
                let conn = spec.connectivity(i)?;
                let w = net.weights[i].as_ref().expect("weights").data();
                let b = net.biases[i].as_ref().expect("bias").data();
                let mask = by_layer.get(layer.name.as_str());
                let keep = |bit: usize| mask.map_or(true, |m| m.get(bit));
                if layer.kind == LayerKind::Conv {
                    let mut maps = Vec::with_capacity(conn.units);
                    for u in 0..conn.units {
                        let mut taps = Vec::new();
                        for k in 0..conn.fan_in {
                            let bit = u * conn.fan_in + k;
                            if keep(bit) {
                                taps.push((k, w[bit]));
                            }
                        }
                        maps.push(SparseKernel { bias: b[u], taps });
                    }
                    SparseLayer::Conv { maps }
                } else {
                    let mut units = Vec::with_capacity(conn.units);
                    for u in 0..conn.units {
                        let mut taps = Vec::new();
                        for k in 0..conn.fan_in {
                            let bit = u * conn.fan_in + k;
                            if !keep(bit) {
                                continue;
                            }
                            // padding slots carry no neuron; skip them
                            if let Some(src) = spec.unit_fan_in_source(i, u, k) {
                                taps.push((src, w[bit]));
                            }
                        }
                        units.push(SparseUnit { bias: b[u], taps });
                    }
                    if layer.kind == LayerKind::Fc {
                        SparseLayer::Fc { units }
                    } else {
                        SparseLayer::Local { units }
                    }
                }
            }
        };
        layers.push(sl);
    }
    Ok(SparseNetwork {
        spec: spec.clone(),
        layers,
    })
}

impl SparseNetwork {
    /// Deterministic eval-mode forward; returns every layer's activation.
    pub fn forward(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        let s0 = self.spec.in_shape(0);
        let got = batch.shape();
        if got.len() != 4 || got[1..] != [s0.c, s0.h, s0.w] {
            return Err(Error::ShapeMismatch {
                left: got.to_vec(),
                right: vec![0, s0.c, s0.h, s0.w],
            });
        }
        let n = got[0];
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 { batch } else { &outputs[i - 1] };
            let osz = self.spec.out_shape(i);
            let out = match layer {
                SparseLayer::Relu => Tensor::new(
                    input.shape().to_vec(),
                    input.data().iter().map(|&v| v.max(0.0)).collect(),
                )?,
                SparseLayer::Dropout => input.clone(),
                SparseLayer::Pool => self.pool(i, input, n),
                SparseLayer::Softmax => {
                    let classes = osz.flat();
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
                SparseLayer::Fc { units } | SparseLayer::Local { units } => {
                    let isz = self.spec.in_shape(i);
                    let mut data = vec![0.0; n * osz.flat()];
                    for s in 0..n {
                        let x = &input.data()[s * isz.flat()..(s + 1) * isz.flat()];
                        let o = &mut data[s * osz.flat()..(s + 1) * osz.flat()];
                        // unit order (oc, oh, ow) coincides with the output
                        // tensor's flat [c][h][w] layout
                        for (u, unit) in units.iter().enumerate() {
                            let mut acc = unit.bias;
                            for &(src, w) in &unit.taps {
                                acc += w * x[src];
                            }
                            o[u] = acc;
                        }
                    }
                    Tensor::new(vec![n, osz.c, osz.h, osz.w], data)?
                }
                SparseLayer::Conv { maps } => {
                    let isz = self.spec.in_shape(i);
                    let positions = osz.h * osz.w;
                    let mut data = vec![0.0; n * osz.flat()];
                    for s in 0..n {
                        let x = &input.data()[s * isz.flat()..(s + 1) * isz.flat()];
                        let o = &mut data[s * osz.flat()..(s + 1) * osz.flat()];
                        for (map, kernel) in maps.iter().enumerate() {
                            for pos in 0..positions {
                                let mut acc = kernel.bias;
                                for &(k, w) in &kernel.taps {
                                    if let Some(src) = self.spec.conv_fan_in_source(i, pos, k) {
                                        acc += w * x[src];
                                    }
                                }
                                o[map * positions + pos] = acc;
                            }
                        }
                    }
                    Tensor::new(vec![n, osz.c, osz.h, osz.w], data)?
                }
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    fn pool(&self, i: usize, input: &Tensor, n: usize) -> Tensor {
        let l = &self.spec.layers[i];
        let isz: Shape3 = self.spec.in_shape(i);
        let osz = self.spec.out_shape(i);
        let (kh, kw) = l.kernel;
        let x = input.data();
        let mut out = vec![0.0f64; n * osz.flat()];
        for s in 0..n {
            for c in 0..isz.c {
                let xc = s * isz.flat() + c * isz.h * isz.w;
                let oc = s * osz.flat() + c * osz.h * osz.w;
                for oh in 0..osz.h {
                    for ow in 0..osz.w {
                        let mut best = f64::NEG_INFINITY;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let y = oh * l.stride + dy;
                                let xx = ow * l.stride + dx;
                                if y < isz.h && xx < isz.w {
                                    best = best.max(x[xc + y * isz.w + xx]);
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
}
