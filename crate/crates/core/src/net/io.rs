//! Versioned binary weights file.
//!
//! Layout (little endian): magic `PLIW`, `u32` version, `u8` hidden
//! activation (0 = ReLU), `u8` σ mapping (0 = softplus + 1e-4), `u16`
//! reserved, then for encoder and decoder: `u32` layer count followed by
//! `layer count + 1` `u32` widths. Parameters follow as `f64`, layer by
//! layer, row-major weights then biases, encoder first.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Mlp, NetError, NetWeights};

const MAGIC: &[u8; 4] = b"PLIW";
const VERSION: u32 = 1;
const ACTIVATION_RELU: u8 = 0;
const SIGMA_SOFTPLUS_FLOOR: u8 = 0;
const MAX_WIDTH: u32 = 1 << 16;

pub fn write_weights<W: Write>(weights: &NetWeights, mut w: W) -> Result<(), NetError> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(ACTIVATION_RELU)?;
    w.write_u8(SIGMA_SOFTPLUS_FLOOR)?;
    w.write_u16::<LittleEndian>(0)?;
    for mlp in [&weights.encoder, &weights.decoder] {
        let sizes = mlp.sizes();
        w.write_u32::<LittleEndian>(mlp.layers.len() as u32)?;
        for s in sizes {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
    }
    for mlp in [&weights.encoder, &weights.decoder] {
        for v in mlp.params() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn eof(what: &str) -> impl FnOnce(std::io::Error) -> NetError + '_ {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NetError::Truncated(what.to_string())
        } else {
            NetError::Io(e)
        }
    }
}

fn read_sizes<R: Read>(r: &mut R, name: &str) -> Result<Vec<usize>, NetError> {
    let layers = r.read_u32::<LittleEndian>().map_err(eof(name))?;
    if layers == 0 || layers > 64 {
        return Err(NetError::DimensionMismatch(format!("{name} declares {layers} layers")));
    }
    let mut sizes = Vec::with_capacity(layers as usize + 1);
    for _ in 0..=layers {
        let s = r.read_u32::<LittleEndian>().map_err(eof(name))?;
        if s == 0 || s > MAX_WIDTH {
            return Err(NetError::DimensionMismatch(format!("{name} has layer width {s}")));
        }
        sizes.push(s as usize);
    }
    Ok(sizes)
}

/// Reads a weights file. With `expected_latent`, a different latent
/// length in the header is a dimension mismatch.
pub fn read_weights<R: Read>(mut r: R, expected_latent: Option<usize>) -> Result<NetWeights, NetError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof("magic"))?;
    if &magic != MAGIC {
        return Err(NetError::VersionMismatch(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof("version"))?;
    if version != VERSION {
        return Err(NetError::VersionMismatch(format!("file version {version}, supported {VERSION}")));
    }
    let activation = r.read_u8().map_err(eof("header"))?;
    let sigma_map = r.read_u8().map_err(eof("header"))?;
    let _reserved = r.read_u16::<LittleEndian>().map_err(eof("header"))?;
    if activation != ACTIVATION_RELU || sigma_map != SIGMA_SOFTPLUS_FLOOR {
        return Err(NetError::VersionMismatch(format!(
            "unsupported activation {activation} / sigma mapping {sigma_map}"
        )));
    }
    let enc_sizes = read_sizes(&mut r, "encoder")?;
    let dec_sizes = read_sizes(&mut r, "decoder")?;
    let latent = *enc_sizes.last().unwrap();
    if let Some(expected) = expected_latent {
        if latent != expected {
            return Err(NetError::DimensionMismatch(format!(
                "weights have latent length {latent}, map expects {expected}"
            )));
        }
    }
    let mut weights = NetWeights::zeros_with(&enc_sizes, &dec_sizes)?;
    for (name, mlp) in [("encoder", &mut weights.encoder), ("decoder", &mut weights.decoder)] {
        read_params(&mut r, mlp, name)?;
    }
    weights.validate()?;
    Ok(weights)
}

fn read_params<R: Read>(r: &mut R, mlp: &mut Mlp, name: &str) -> Result<(), NetError> {
    for layer in mlp.layers.iter_mut() {
        r.read_f64_into::<LittleEndian>(&mut layer.weight)
            .map_err(eof(name))?;
        r.read_f64_into::<LittleEndian>(&mut layer.bias).map_err(eof(name))?;
    }
    Ok(())
}

pub fn save_weights(weights: &NetWeights, path: &Path) -> Result<(), NetError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write_weights(weights, &mut w)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_weights(path: &Path, expected_latent: Option<usize>) -> Result<NetWeights, NetError> {
    read_weights(BufReader::new(File::open(path)?), expected_latent)
}

/// Prior trained on the procedural corpus, shipped with the crate.
pub const BUNDLED_PRIOR: &[u8] = include_bytes!("../../assets/prior.pliw");

pub fn bundled_prior() -> NetWeights {
    read_weights(BUNDLED_PRIOR, Some(crate::grid::DEFAULT_LATENT_DIM)).expect("bundled prior is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_prior_loads() {
        let w = bundled_prior();
        assert_eq!(w.latent_dim(), crate::grid::DEFAULT_LATENT_DIM);
        assert_eq!(bytes(&w), BUNDLED_PRIOR);
    }

    fn bytes(w: &NetWeights) -> Vec<u8> {
        let mut b = Vec::new();
        write_weights(w, &mut b).unwrap();
        b
    }

    #[test]
    fn round_trip_is_bitwise() {
        let w = NetWeights::init(77);
        let b = bytes(&w);
        let back = read_weights(b.as_slice(), Some(29)).unwrap();
        let same_bits = w
            .encoder
            .params()
            .chain(w.decoder.params())
            .zip(back.encoder.params().chain(back.decoder.params()))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same_bits);
        assert_eq!(bytes(&back), b);
    }

    #[test]
    fn corrupted_magic_is_version_mismatch() {
        let mut b = bytes(&NetWeights::init(1));
        b[1] = b'X';
        assert!(matches!(read_weights(b.as_slice(), None), Err(NetError::VersionMismatch(_))));
        let mut b = bytes(&NetWeights::init(1));
        b[4] = 2;
        assert!(matches!(read_weights(b.as_slice(), None), Err(NetError::VersionMismatch(_))));
    }

    #[test]
    fn wrong_latent_is_dimension_mismatch() {
        let b = bytes(&NetWeights::init(1));
        assert!(matches!(read_weights(b.as_slice(), Some(16)), Err(NetError::DimensionMismatch(_))));
    }

    #[test]
    fn truncated_file() {
        let b = bytes(&NetWeights::init(1));
        assert!(matches!(read_weights(&b[..b.len() - 8], None), Err(NetError::Truncated(_))));
        assert!(matches!(read_weights(&b[..10], None), Err(NetError::Truncated(_))));
    }
}
