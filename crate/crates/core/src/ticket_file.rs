//! Binary ticket files.
//!
//! Layout (little-endian after the 5-byte header):
//!
//! ```text
//! "FTKT" | version: u8 = 1 | layers: u32
//! per layer: n_in: u32 | n_out: u32 | k: u64 | k × index: u64 (strictly ascending)
//!            | k × weight: f32 | n_out × bias: f32
//! provenance length: u64 | provenance: UTF-8 key=value lines
//! ```
//!
//! Weights are stored at 32-bit precision; masks round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Layer, SparseNetwork};
use crate::sparsity::{LayerMask, MaskSet};
use crate::tensor::Matrix;
use crate::training::{Provenance, Ticket};

pub const MAGIC: &[u8; 4] = b"FTKT";
pub const VERSION: u8 = 1;

pub fn encode_ticket(ticket: &Ticket) -> Vec<u8> {
    let net = &ticket.network;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for (layer, mask) in net.layers.iter().zip(&net.masks.layers) {
        let active = mask.active_indices();
        out.extend_from_slice(&(mask.cols as u32).to_le_bytes());
        out.extend_from_slice(&(mask.rows as u32).to_le_bytes());
        out.extend_from_slice(&(active.len() as u64).to_le_bytes());
        for &i in &active {
            out.extend_from_slice(&(i as u64).to_le_bytes());
        }
        let weights = layer.weights.as_slice();
        for &i in &active {
            out.extend_from_slice(&(weights[i] as f32).to_le_bytes());
        }
        for &b in &layer.bias {
            out.extend_from_slice(&(b as f32).to_le_bytes());
        }
    }
    let text = ticket.provenance.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    /// Guards allocations against corrupt counts: `n` items of `width` bytes must fit.
    fn check_remaining(&self, n: u64, width: u64, what: &str) -> Result<usize> {
        let left = (self.bytes.len() - self.pos) as u64;
        match n.checked_mul(width) {
            Some(b) if b <= left => Ok(n as usize),
            _ => Err(Error::format(self.path, format!("truncated while reading {what}"))),
        }
    }
}

/// Decodes a ticket; `path` is only used in error messages.
pub fn decode_ticket(bytes: &[u8], path: &Path) -> Result<Ticket> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, "bad magic, expected FTKT"));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n_layers = r.u32("layer count")? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    let mut masks = Vec::with_capacity(n_layers.min(1024));
    for l in 0..n_layers {
        let n_in = r.u32("n_in")? as usize;
        let n_out = r.u32("n_out")? as usize;
        let params = n_in
            .checked_mul(n_out)
            .ok_or_else(|| Error::format(path, format!("layer {l} is too large")))?;
        let k = r.u64("active count")?;
        if k > params as u64 {
            return Err(Error::format(
                path,
                format!("layer {l}: {k} active entries exceed {params} parameters"),
            ));
        }
        let k = r.check_remaining(k, 12, "indices")?;
        let mut indices = Vec::with_capacity(k);
        for _ in 0..k {
            let i = r.u64("index")?;
            if i >= params as u64 {
                return Err(Error::format(path, format!("layer {l}: index {i} out of range")));
            }
            if indices.last().is_some_and(|&prev| prev >= i as usize) {
                return Err(Error::format(path, format!("layer {l}: indices not ascending")));
            }
            indices.push(i as usize);
        }
        let mut weights = vec![0.0; params];
        for &i in &indices {
            weights[i] = f64::from(r.f32("weight")?);
        }
        let n_out_checked = r.check_remaining(n_out as u64, 4, "biases")?;
        let bias = (0..n_out_checked)
            .map(|_| r.f32("bias").map(f64::from))
            .collect::<Result<Vec<_>>>()?;
        masks.push(LayerMask::from_active(n_out, n_in, &indices)?);
        layers.push(Layer {
            weights: Matrix::from_vec(n_out, n_in, weights)?,
            bias,
        });
    }
    let len = r.u64("provenance length")?;
    let len = r.check_remaining(len, 1, "provenance")?;
    let text =
        std::str::from_utf8(r.take(len, "provenance")?).map_err(|_| Error::format(path, "provenance is not UTF-8"))?;
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after provenance"));
    }
    Ok(Ticket {
        network: SparseNetwork::from_parts(layers, MaskSet { layers: masks })?,
        provenance: Provenance::parse(text)?,
    })
}

pub fn save_ticket(ticket: &Ticket, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ticket(ticket)).map_err(|e| Error::io(path, e))
}

pub fn load_ticket(path: impl AsRef<Path>) -> Result<Ticket> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ticket(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::LayerShape;
    use crate::sparsity::erk_init;
    use crate::tensor::Rng;
    use crate::training::Method;

    fn ticket(seed: u64) -> Ticket {
        let shapes = LayerShape::mlp(&[3, 8, 2]);
        let mut rng = Rng::new(seed);
        let masks = erk_init(&shapes, 0.6, &mut rng).unwrap();
        let mut network = SparseNetwork::init(&shapes, masks, &mut rng).unwrap();
        network.layers[1].bias = vec![0.25, -1.5];
        Ticket {
            network,
            provenance: Provenance {
                method: Method::Edst,
                member: 2,
                seed,
                phase_start: 10,
                phase_end: 20,
                achieved_sparsity: 0.6,
                final_loss: 0.125,
            },
        }
    }

    fn p() -> &'static Path {
        Path::new("<memory>")
    }

    #[test]
    fn round_trip_preserves_masks_and_f32_weights() {
        let t = ticket(3);
        let back = decode_ticket(&encode_ticket(&t), p()).unwrap();
        assert_eq!(back.network.masks, t.network.masks);
        assert_eq!(back.sparsity(), t.sparsity());
        assert_eq!(back.provenance, t.provenance);
        for (a, b) in back.network.layers.iter().zip(&t.network.layers) {
            for (&x, &y) in a.weights.as_slice().iter().zip(b.weights.as_slice()) {
                assert_eq!(x, f64::from(y as f32));
            }
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_ticket(&ticket(1));
        assert_eq!(&bytes[..4], b"FTKT");
        assert_eq!(bytes[4], 1);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 8);
    }

    #[test]
    fn empty_network_is_header_only() {
        let t = Ticket {
            network: SparseNetwork::from_parts(vec![], MaskSet { layers: vec![] }).unwrap(),
            provenance: ticket(0).provenance,
        };
        let bytes = encode_ticket(&t);
        let text_len = t.provenance.to_text().len();
        assert_eq!(bytes.len(), 4 + 1 + 4 + 8 + text_len);
        let back = decode_ticket(&bytes, p()).unwrap();
        assert!(back.network.layers.is_empty());
    }

    #[test]
    fn rejects_corruption() {
        let good = encode_ticket(&ticket(5));
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_ticket(&bad, p()).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(decode_ticket(&bad, p()).is_err());
        assert!(decode_ticket(&good[..good.len() - 1], p()).is_err());
        assert!(decode_ticket(&good[..30], p()).is_err());

        // first two indices of layer 0 start at byte 25
        let mut swapped = good.clone();
        let (a, b) = (swapped[25..33].to_vec(), swapped[33..41].to_vec());
        swapped[25..33].copy_from_slice(&b);
        swapped[33..41].copy_from_slice(&a);
        let err = decode_ticket(&swapped, p()).unwrap_err().to_string();
        assert!(err.contains("ascending"), "{err}");

        let mut out_of_range = good.clone();
        out_of_range[25..33].copy_from_slice(&1000u64.to_le_bytes());
        let err = decode_ticket(&out_of_range, p()).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ftkt");
        let t = ticket(9);
        save_ticket(&t, &path).unwrap();
        assert_eq!(load_ticket(&path).unwrap().network.masks, t.network.masks);
        assert!(load_ticket(dir.path().join("missing")).is_err());
    }
}
