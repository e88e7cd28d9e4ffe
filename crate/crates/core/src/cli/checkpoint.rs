//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "IBAU"
//! version u32      currently 1
//! count   u32      number of tensors
//! per tensor:
//!   name_len u32, name bytes (UTF-8),
//!   rank u32, dims u64 each,
//!   data f64 raw little-endian, row-major
//! ```
//!
//! Save followed by load is bitwise identity on the parameters, which is
//! what makes cross-run reproducibility checks exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::model::Params;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"IBAU";
const VERSION: u32 = 1;

pub fn save_checkpoint(params: &Params, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u32::<LittleEndian>(params.entries.len() as u32)
        .map_err(io_err)?;
    for (name, tensor) in &params.entries {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_u32::<LittleEndian>(tensor.rank() as u32)
            .map_err(io_err)?;
        for &d in tensor.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io_err)?;
        }
        for &v in tensor.data() {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Params> {
    let file = File::open(path)
        .map_err(|_| Error::Config(format!("cannot open checkpoint {}", path.display())))?;
    let mut r = BufReader::new(file);
    let bad = |msg: &str| Error::data(path, None, msg);
    let truncated = || Error::data(path, None, "truncated checkpoint");

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| truncated())?;
    if &magic != MAGIC {
        return Err(bad("bad magic, not an IBAU checkpoint"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| truncated())?;
    if version != VERSION {
        return Err(bad(&format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(|_| truncated())?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(|_| truncated())? as usize;
        if rank == 0 || rank > 8 {
            return Err(bad(&format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.read_u64::<LittleEndian>().map_err(|_| truncated())? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(r.read_f64::<LittleEndian>().map_err(|_| truncated())?);
        }
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(Params { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Activation, MlpSpec};
    use crate::rng::SeededRng;

    #[test]
    fn round_trip_is_bitwise() {
        let spec = MlpSpec::new(vec![5, 8, 3], Activation::Relu);
        let params = init_params(&spec, &mut SeededRng::new(81));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(load_checkpoint(&path).is_err());
        assert!(load_checkpoint(&dir.path().join("missing.ckpt")).is_err());
    }
}
