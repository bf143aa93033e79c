//! Checkpoint format: magic "DHCK", u32 version, length-prefixed config JSON,
//! u32 record count, then per record a length-prefixed parameter name and the
//! tensor payload. Everything little-endian; records follow the model's
//! canonical parameter order so identical states serialize to identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{read_tensor, write_tensor};
use crate::{Error, Result};

use super::params::ModelParams;
use super::DucoNetConfig;

const MAGIC: &[u8; 4] = b"DHCK";
const VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_block(r: &mut impl Read, what: &str, cap: usize) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > cap {
        return Err(Error::BadFormat(format!("{} length {} exceeds cap {}", what, len, cap)));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// Writes config plus parameters. The config is embedded so a checkpoint is
/// self-describing.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    cfg: &DucoNetConfig,
    params: &ModelParams,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let cfg_json = serde_json::to_vec(cfg)?;
    write_u32(&mut w, cfg_json.len() as u32)?;
    w.write_all(&cfg_json)?;

    let flat = params.flatten();
    write_u32(&mut w, flat.len() as u32)?;
    for (name, tensor) in flat {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint back: validates the header, rebuilds the parameter
/// skeleton from the embedded config, and fills it record by record. Missing,
/// extra, misshapen or non-finite parameters are errors.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DucoNetConfig, ModelParams)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadFormat(format!("expected DHCK magic, got {:?}", magic)));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::BadFormat(format!("unsupported checkpoint version {}", version)));
    }
    let cfg_json = read_block(&mut r, "config", 1 << 20)?;
    let cfg: DucoNetConfig = serde_json::from_slice(&cfg_json)?;
    cfg.validate()?;

    let n_records = read_u32(&mut r)? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..n_records {
        let name_bytes = read_block(&mut r, "parameter name", 4096)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::BadFormat("parameter name is not UTF-8".into()))?;
        let tensor = read_tensor(&mut r)?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::BadFormat(format!("duplicate parameter record {}", name)));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::BadFormat("trailing bytes after last record".into()));
    }

    let mut params = super::params::init_params(&cfg)?;
    for (name, slot) in params.flatten_mut() {
        let tensor = records.remove(&name).ok_or_else(|| {
            Error::BadFormat(format!("checkpoint is missing parameter {}", name))
        })?;
        if tensor.shape() != slot.shape() {
            return Err(Error::BadFormat(format!(
                "parameter {} has shape {:?}, model wants {:?}",
                name,
                tensor.shape(),
                slot.shape()
            )));
        }
        *slot = tensor;
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::BadFormat(format!("unexpected extra parameter {}", name)));
    }
    if !params.all_finite() {
        return Err(Error::BadFormat("checkpoint contains non-finite values".into()));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_params, AblationMode};

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("duconet-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_is_bit_exact_for_every_mode() {
        for mode in AblationMode::ALL {
            let cfg = crate::net::DucoNetConfig::tiny(mode, 99);
            let params = init_params(&cfg).unwrap();
            let path = tmp(&format!("rt-{}.ckpt", mode.name()));
            save_checkpoint(&path, &cfg, &params).unwrap();
            let (cfg2, params2) = load_checkpoint(&path).unwrap();
            assert_eq!(cfg2, cfg);
            let a = params.flatten();
            let b = params2.flatten();
            assert_eq!(a.len(), b.len());
            for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
                assert_eq!(na, nb);
                assert_eq!(ta.shape(), tb.shape());
                for (x, y) in ta.data().iter().zip(tb.data()) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let cfg = crate::net::DucoNetConfig::tiny(AblationMode::CmPix, 7);
        let params = init_params(&cfg).unwrap();
        let p1 = tmp("twice-1.ckpt");
        let p2 = tmp("twice-2.ckpt");
        save_checkpoint(&p1, &cfg, &params).unwrap();
        save_checkpoint(&p2, &cfg, &params).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_tampering() {
        let cfg = crate::net::DucoNetConfig::tiny(AblationMode::CmAvg, 3);
        let params = init_params(&cfg).unwrap();
        let path = tmp("tamper.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        let p = tmp("bad-magic.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadFormat(_))));

        let mut bad = good.clone();
        bad[4] = 9;
        let p = tmp("bad-version.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadFormat(_))));

        // corrupt the first record's name: the skeleton fill must notice the
        // missing parameter
        let cfg_len = u32::from_le_bytes(good[8..12].try_into().unwrap()) as usize;
        let name_start = 12 + cfg_len + 4 + 4;
        let mut bad = good.clone();
        bad[name_start] = b'z';
        let p = tmp("bad-name.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadFormat(_))));

        // truncated file
        let mut bad = good.clone();
        bad.truncate(bad.len() - 5);
        let p = tmp("truncated.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(load_checkpoint(&p).is_err());

        // trailing garbage
        let mut bad = good;
        bad.push(0);
        let p = tmp("trailing.ckpt");
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::BadFormat(_))));
    }

    #[test]
    fn rejects_non_finite_parameters() {
        let cfg = crate::net::DucoNetConfig::tiny(AblationMode::BackboneOnly, 5);
        let mut params = init_params(&cfg).unwrap();
        params.head.bias.data_mut()[0] = f64::NAN;
        let path = tmp("nan.ckpt");
        save_checkpoint(&path, &cfg, &params).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::BadFormat(_))));
    }
}
