//! Adam optimizer over the flattened encoder and decoder parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::net::{load_weights, save_weights, NetError, NetWeights};

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    /// One update with gradients `grads` (same layout as `weights`).
    pub fn update(&mut self, weights: &mut NetWeights, grads: &NetWeights) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        let params = weights.encoder.params_mut().chain(weights.decoder.params_mut());
        let g = grads.encoder.params().chain(grads.decoder.params());
        for (((p, g), m), v) in params.zip(g).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }

    fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(b"PLIA")?;
        w.write_u32::<LittleEndian>(1)?;
        w.write_u64::<LittleEndian>(self.step)?;
        w.write_u64::<LittleEndian>(self.m.len() as u64)?;
        for v in [self.lr, self.beta1, self.beta2, self.eps] {
            w.write_f64::<LittleEndian>(v)?;
        }
        for v in self.m.iter().chain(&self.v) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    }

    fn read<R: Read>(mut r: R) -> Result<Self, NetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"PLIA" || r.read_u32::<LittleEndian>()? != 1 {
            return Err(NetError::VersionMismatch("optimizer state".into()));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        if n > 1 << 28 {
            return Err(NetError::DimensionMismatch(format!("optimizer state of {n} parameters")));
        }
        let mut head = [0.0; 4];
        r.read_f64_into::<LittleEndian>(&mut head)?;
        let mut m = vec![0.0; n];
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut m)?;
        r.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(Self {
            lr: head[0],
            beta1: head[1],
            beta2: head[2],
            eps: head[3],
            step,
            m,
            v,
        })
    }
}

/// Writes `<stem>.pliw` (weights) and `<stem>.adam` (optimizer state).
pub fn write_checkpoint(stem: &Path, weights: &NetWeights, adam: &Adam) -> Result<(), NetError> {
    save_weights(weights, &stem.with_extension("pliw"))?;
    let path = stem.with_extension("adam");
    let tmp = stem.with_extension("adam.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        adam.write(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(stem: &Path) -> Result<(NetWeights, Adam), NetError> {
    let weights = load_weights(&stem.with_extension("pliw"), None)?;
    let adam = Adam::read(BufReader::new(File::open(stem.with_extension("adam"))?))?;
    if adam.m.len() != weights.param_count() {
        return Err(NetError::DimensionMismatch("optimizer state does not match weights".into()));
    }
    Ok((weights, adam))
}
