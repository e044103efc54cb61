//! Checkpoint container: 8-byte magic, little-endian u32 header length, a
//! JSON header, then every tensor as row-major little-endian f64 in the
//! order `embed, gains, w_q, w_k, w_v, w_o, unembed`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::{Dims, ModelParams, NormMode, Tensors, TENSOR_NAMES};

const MAGIC: &[u8; 8] = b"SCMODEL1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: Dims,
    pub norm: NormMode,
    pub norm_eps: f64,
    pub seed: Option<u64>,
    pub tensors: Vec<(String, Vec<usize>)>,
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, seed: Option<u64>, mut w: W) -> Result<()> {
    let t = &params.tensors;
    let shapes = [
        t.embed.shape(),
        (1, t.gains.len()),
        t.w_q.shape(),
        t.w_k.shape(),
        t.w_v.shape(),
        t.w_o.shape(),
        t.unembed.shape(),
    ];
    let header = CheckpointHeader {
        dims: params.dims,
        norm: params.norm,
        norm_eps: params.norm_eps,
        seed,
        tensors: TENSOR_NAMES
            .iter()
            .zip(shapes)
            .map(|(n, (r, c))| (n.to_string(), if *n == "gains" { vec![c] } else { vec![r, c] }))
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for x in t.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(ModelParams, CheckpointHeader)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut tensors = Tensors::zeros(&header.dims);
    let mut buf = [0u8; 8];
    for s in tensors.slices_mut() {
        for x in s.iter_mut() {
            r.read_exact(&mut buf)?;
            *x = f64::from_le_bytes(buf);
        }
    }
    let params = ModelParams::new(header.dims, header.norm, header.norm_eps, tensors)?;
    Ok((params, header))
}

#[cfg(test)]
mod tests {
    use crate::model::init_params;
    use crate::rng::stream;

    use super::*;

    #[test]
    fn checkpoint_round_trip() {
        let dims = Dims::new(5, 6, 2, 4).unwrap();
        let p = init_params(dims, NormMode::RmsNorm, 1e-7, &mut stream(3, "init", &[])).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&p, Some(3), &mut buf).unwrap();
        let (q, h) = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.seed, Some(3));
        assert_eq!(h.tensors[1], ("gains".to_string(), vec![6]));
        assert!(read_checkpoint(&buf[1..]).is_err());
    }
}
