//! Flat binary parameter container.
//!
//! ```text
//! magic    8 bytes  "STDFCKPT"
//! version  u32 LE
//! config   u32 LE length + UTF-8 `key=value` lines
//! count    u32 LE
//! table    count × (u32 LE name length, name, u32 LE rows, u32 LE cols)
//! data     little-endian f32 values, tensors in table order, row-major
//! ```
//!
//! The latent normalizer is stored as tensors `norm.mean` and `norm.std`
//! of shape `(1, channels)`.

use std::io::{Read, Write};
use std::path::Path;

use super::unet::{ToyUNet, ToyUNetConfig};
use crate::codec::LatentNormalizer;
use crate::error::{Error, Result};
use crate::nn::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STDFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const NORM_MEAN: &str = "norm.mean";
const NORM_STD: &str = "norm.std";

pub fn save_checkpoint(net: &ToyUNet, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode(net);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyUNet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub(crate) fn encode(net: &ToyUNet) -> Vec<u8> {
    let norm = net.latent_normalizer();
    let c = norm.channels();
    let mut tensors: Vec<(&str, Matrix)> =
        net.named_params().map(|(n, m)| (n, m.clone())).collect();
    tensors.push((
        NORM_MEAN,
        Matrix::from_vec(1, c, norm.mean.clone()).expect("len"),
    ));
    tensors.push((
        NORM_STD,
        Matrix::from_vec(1, c, norm.std.clone()).expect("len"),
    ));

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let text = format!(
        "{}trained={}\n",
        net.config().to_text(),
        u8::from(net.is_trained())
    );
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    }
    for (_, m) in &tensors {
        for &v in m.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<ToyUNet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(len)?)
        .map_err(|_| Error::format("checkpoint", "config block is not UTF-8"))?;
    let config = ToyUNetConfig::from_text(text)?;
    let trained = text.lines().any(|l| l.trim() == "trained=1");
    let count = cur.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(n)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        table.push((name, rows, cols));
    }
    let mut tensors = Vec::with_capacity(table.len());
    let mut mean = None;
    let mut std = None;
    for (name, rows, cols) in table {
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::format("checkpoint", "tensor size overflow"))?;
        let raw = cur.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::format("checkpoint", "tensor size overflow"))?,
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        match name.as_str() {
            NORM_MEAN => mean = Some(data),
            NORM_STD => std = Some(data),
            _ => tensors.push((name, Matrix::from_vec(rows, cols, data)?)),
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::format(
            "checkpoint",
            "trailing bytes after tensor data",
        ));
    }
    let normalizer = match (mean, std) {
        (Some(mean), Some(std)) => LatentNormalizer { mean, std },
        _ => return Err(Error::format("checkpoint", "missing latent normalizer")),
    };
    ToyUNet::from_parts(config, tensors, normalizer, trained)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{Condition, Denoiser};
    use crate::grid::LatentGrid;

    fn net() -> ToyUNet {
        ToyUNet::new(ToyUNetConfig {
            latent_channels: 4,
            base_width: 8,
            heads: 1,
            vocab: 3,
            context_tokens: 2,
            embed_dim: 4,
            time_features: 3,
            ..ToyUNetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut n = net();
        n.set_normalizer(LatentNormalizer {
            mean: vec![0.5, -0.25, 1.0, 0.0],
            std: vec![1.0, 2.0, 0.5, 0.125],
        })
        .unwrap();
        let bytes = encode(&n);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for ((na, a), (nb, b)) in n.named_params().zip(back.named_params()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
        let x = LatentGrid::from_fn(4, 2, 2, |c, y, x| (c + y + x) as f64 * 0.1);
        assert_eq!(
            n.predict(&x, 0.5, &Condition::Null).unwrap(),
            back.predict(&x, 0.5, &Condition::Null).unwrap()
        );
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&net());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
