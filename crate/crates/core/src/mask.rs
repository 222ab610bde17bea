//! Dropping masks: the binary companions of weight tensors.
//!
//! A mask carries one bit per weight scalar (1 = reserved, 0 = dropped).
//! Multiplying weights by the mask before forward propagation and clipping
//! them back to zero after each optimizer step makes a dense engine behave
//! as a sparsely connected network. For conv layers one bit covers one
//! shared weight, so dropping it removes all of its connections at once.

use crate::error::{Error, Result};
use crate::net::Network;

/// Binary mask over one layer's weight scalars, bit i ↔ flat weight index i.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppingMask {
    pub layer: String,
    bits: Vec<u8>,
    nbits: usize,
    pub target_sparsity: f64,
}

impl DroppingMask {
    pub fn all_ones(layer: &str, nbits: usize, target_sparsity: f64) -> Self {
        let mut m = Self {
            layer: layer.to_string(),
            bits: vec![0xff; nbits.div_ceil(8)],
            nbits,
            target_sparsity,
        };
        m.clear_tail();
        m
    }

    pub fn all_zeros(layer: &str, nbits: usize, target_sparsity: f64) -> Self {
        Self {
            layer: layer.to_string(),
            bits: vec![0; nbits.div_ceil(8)],
            nbits,
            target_sparsity,
        }
    }

    fn clear_tail(&mut self) {
        let rem = self.nbits % 8;
        if rem != 0 {
            if let Some(last) = self.bits.last_mut() {
                *last &= (1u8 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nbits
    }

    pub fn is_empty(&self) -> bool {
        self.nbits == 0
    }

    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.nbits);
        (self.bits[i / 8] >> (i % 8)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, reserved: bool) {
        debug_assert!(i < self.nbits);
        if reserved {
            self.bits[i / 8] |= 1 << (i % 8);
        } else {
            self.bits[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// Fraction of reserved weights.
    pub fn realized_sparsity(&self) -> f64 {
        self.count_ones() as f64 / self.nbits as f64
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nbits).filter(|&i| self.get(i))
    }

    /// Wire layout: u32 LE name length, name bytes, u64 LE bit count,
    /// then ceil(n/8) bytes, LSB-first within each byte.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.layer.len() as u32).to_le_bytes());
        out.extend_from_slice(self.layer.as_bytes());
        out.extend_from_slice(&(self.nbits as u64).to_le_bytes());
        out.extend_from_slice(&self.bits);
    }

    pub fn decode(buf: &[u8], pos: &mut usize) -> Result<Self> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > buf.len() {
                return Err(Error::Checkpoint("truncated mask block".into()));
            }
            let s = &buf[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let name_len = u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()) as usize;
        let layer = String::from_utf8(take(pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("mask layer name is not UTF-8".into()))?;
        let nbits = u64::from_le_bytes(take(pos, 8)?.try_into().unwrap()) as usize;
        let bits = take(pos, nbits.div_ceil(8))?.to_vec();
        let mut m = Self {
            layer,
            bits,
            nbits,
            target_sparsity: 0.0,
        };
        m.target_sparsity = m.realized_sparsity();
        m.clear_tail();
        Ok(m)
    }
}

fn check(net: &Network, mask: &DroppingMask) -> Result<usize> {
    let idx = net.spec.layer_index(&mask.layer)?;
    if !net.spec.layers[idx].kind.prunable() {
        return Err(Error::NotPrunable(mask.layer.clone()));
    }
    let weights = net.spec.weight_count(idx);
    if weights != mask.len() {
        return Err(Error::MaskMismatch {
            layer: mask.layer.clone(),
            mask_bits: mask.len(),
            weights,
        });
    }
    Ok(idx)
}

/// Zero every dropped weight in place. Unmasked layers are untouched.
pub fn apply_masks(net: &mut Network, masks: &[DroppingMask]) -> Result<()> {
    for mask in masks {
        let idx = check(net, mask)?;
        let w = net.weights[idx].as_mut().expect("prunable layer has weights");
        for (i, v) in w.data_mut().iter_mut().enumerate() {
            if !mask.get(i) {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

/// Re-zero dropped weights after an optimizer step.
///
/// Identical contract to [`apply_masks`]; it exists as a named hook so the
/// training loop order (mask → forward → backward → update → clip) stays
/// explicit and testable.
pub fn clip_after_update(net: &mut Network, masks: &[DroppingMask]) -> Result<()> {
    apply_masks(net, masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{LayerSpec, Mode, Network, NetworkSpec};
    use crate::tensor::Tensor;

    fn fc_net(out: usize, inp: usize) -> Network {
        let spec = NetworkSpec::new((inp, 1, 1), 0, vec![LayerSpec::fc("f", out)]).unwrap();
        Network::init(&spec, 5, 1.0)
    }

    #[test]
    fn bit_ops_and_popcount() {
        let mut m = DroppingMask::all_zeros("f", 13, 0.5);
        m.set(0, true);
        m.set(12, true);
        assert!(m.get(0) && m.get(12) && !m.get(5));
        assert_eq!(m.count_ones(), 2);
        assert_eq!(m.iter_ones().collect::<Vec<_>>(), vec![0, 12]);
        let ones = DroppingMask::all_ones("f", 13, 1.0);
        assert_eq!(ones.count_ones(), 13);
    }

    #[test]
    fn identity_mask_leaves_weights() {
        let mut net = fc_net(3, 4);
        let before = net.weights[0].clone();
        let mask = DroppingMask::all_ones("f", 12, 1.0);
        apply_masks(&mut net, &[mask]).unwrap();
        assert_eq!(net.weights[0], before);
    }

    #[test]
    fn all_zero_mask_makes_fc_output_its_bias() {
        let mut net = fc_net(3, 4);
        net.biases[0] = Some(Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mask = DroppingMask::all_zeros("f", 12, 0.01);
        apply_masks(&mut net, &[mask]).unwrap();
        let batch = Tensor::new(vec![1, 1, 4, 1], vec![3.0, -7.0, 0.1, 2.0]).unwrap();
        let trace = net.forward(&batch, Mode::Eval, 0).unwrap();
        assert_eq!(trace.outputs[0].data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn masked_weights_match_elementwise_oracle() {
        let mut net = fc_net(4, 5);
        let dense = net.weights[0].clone().unwrap();
        let mut mask = DroppingMask::all_ones("f", 20, 0.5);
        let mut mask_t = vec![1.0f64; 20];
        for i in [1usize, 3, 8, 13, 19] {
            mask.set(i, false);
            mask_t[i] = 0.0;
        }
        apply_masks(&mut net, &[mask]).unwrap();
        let oracle = dense
            .elementwise_mul(&Tensor::new(vec![4, 5], mask_t).unwrap())
            .unwrap();
        assert_eq!(net.weights[0].as_ref().unwrap(), &oracle);
    }

    #[test]
    fn apply_is_idempotent_and_preserves_survivors() {
        let mut net = fc_net(4, 5);
        let mut mask = DroppingMask::all_ones("f", 20, 0.5);
        for i in 0..20 {
            if i % 3 == 0 {
                mask.set(i, false);
            }
        }
        apply_masks(&mut net, std::slice::from_ref(&mask)).unwrap();
        let once = net.weights[0].clone();
        apply_masks(&mut net, std::slice::from_ref(&mask)).unwrap();
        assert_eq!(net.weights[0], once);
        // survivors keep their exact bit patterns
        for i in mask.iter_ones() {
            assert_eq!(
                net.weights[0].as_ref().unwrap().data()[i].to_bits(),
                once.as_ref().unwrap().data()[i].to_bits()
            );
        }
    }

    #[test]
    fn mismatched_mask_reports_counts() {
        let mut net = fc_net(3, 4);
        let mask = DroppingMask::all_ones("f", 7, 1.0);
        match apply_masks(&mut net, &[mask]) {
            Err(Error::MaskMismatch {
                mask_bits, weights, ..
            }) => {
                assert_eq!(mask_bits, 7);
                assert_eq!(weights, 12);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
        let mask = DroppingMask::all_ones("nope", 12, 1.0);
        assert!(matches!(
            apply_masks(&mut net, &[mask]),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut m = DroppingMask::all_zeros("layer-x", 21, 0.3);
        for i in [0usize, 2, 7, 8, 15, 20] {
            m.set(i, true);
        }
        let mut buf = Vec::new();
        m.encode(&mut buf);
        // LSB-first: bits 0,2,7 -> 0b1000_0101
        let header = 4 + "layer-x".len() + 8;
        assert_eq!(buf[header], 0b1000_0101);
        let mut pos = 0;
        let back = DroppingMask::decode(&buf, &mut pos).unwrap();
        assert_eq!(pos, buf.len());
        assert_eq!(back.layer, m.layer);
        assert_eq!(back.len(), m.len());
        assert_eq!(
            back.iter_ones().collect::<Vec<_>>(),
            m.iter_ones().collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_decode_fails() {
        let mut m = DroppingMask::all_ones("f", 64, 1.0);
        m.set(3, false);
        let mut buf = Vec::new();
        m.encode(&mut buf);
        buf.truncate(buf.len() - 1);
        let mut pos = 0;
        assert!(DroppingMask::decode(&buf, &mut pos).is_err());
    }
}
