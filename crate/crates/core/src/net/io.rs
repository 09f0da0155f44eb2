//! Versioned binary checkpoints: magic "EPWM", parameters in construction
//! order as f64 little-endian, then the training history.

use super::{build_network, EpochStats, EpwNetwork, Variant};
use crate::bin;
use crate::real::Real;
use crate::{Error, Result};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"EPWM";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Real, W: Write>(
    net: &EpwNetwork<T>,
    history: &[EpochStats],
    w: &mut W,
) -> Result<()> {
    w.write_all(MAGIC)?;
    bin::write_u32(w, VERSION)?;
    bin::write_u8(w, net.variant.id())?;
    bin::write_u32(w, net.base_channels as u32)?;
    bin::write_u32(w, net.convs.len() as u32)?;
    for c in &net.convs {
        bin::write_u32(w, c.out_ch as u32)?;
        bin::write_u32(w, c.in_ch as u32)?;
        bin::write_u32(w, c.k as u32)?;
        bin::write_u32(w, c.k as u32)?;
        for &v in &c.w {
            bin::write_f64(w, v.as_f64())?;
        }
        for &v in &c.b {
            bin::write_f64(w, v.as_f64())?;
        }
    }
    bin::write_u32(w, net.tconvs.len() as u32)?;
    for c in &net.tconvs {
        bin::write_u32(w, c.in_ch as u32)?;
        bin::write_u32(w, c.out_ch as u32)?;
        bin::write_u32(w, 2)?;
        bin::write_u32(w, 2)?;
        for &v in &c.w {
            bin::write_f64(w, v.as_f64())?;
        }
        for &v in &c.b {
            bin::write_f64(w, v.as_f64())?;
        }
    }
    bin::write_u32(w, history.len() as u32)?;
    for e in history {
        bin::write_f64(w, e.train_loss)?;
        bin::write_f64(w, e.val_l1)?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<(EpwNetwork<T>, Vec<EpochStats>)> {
    bin::expect_magic(r, MAGIC)?;
    let version = bin::read_u32(r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let variant = Variant::from_id(bin::read_u8(r)?)?;
    let base = bin::read_u32(r)? as usize;
    let mut net = build_network::<T>(variant, base, 0)?;

    let n_convs = bin::read_u32(r)? as usize;
    if n_convs != net.convs.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_convs} convs, variant wants {}",
            net.convs.len()
        )));
    }
    for c in &mut net.convs {
        let dims = [
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
        ];
        if dims != [c.out_ch, c.in_ch, c.k, c.k] {
            return Err(Error::Format(format!(
                "conv shape {dims:?} does not match layout ({}, {}, {}, {})",
                c.out_ch, c.in_ch, c.k, c.k
            )));
        }
        for v in &mut c.w {
            *v = T::of(bin::read_f64(r)?);
        }
        for v in &mut c.b {
            *v = T::of(bin::read_f64(r)?);
        }
    }
    let n_tconvs = bin::read_u32(r)? as usize;
    if n_tconvs != net.tconvs.len() {
        return Err(Error::Format(format!(
            "checkpoint has {n_tconvs} tconvs, variant wants {}",
            net.tconvs.len()
        )));
    }
    for c in &mut net.tconvs {
        let dims = [
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
            bin::read_u32(r)? as usize,
        ];
        if dims != [c.in_ch, c.out_ch, 2, 2] {
            return Err(Error::Format(format!(
                "tconv shape {dims:?} does not match layout ({}, {}, 2, 2)",
                c.in_ch, c.out_ch
            )));
        }
        for v in &mut c.w {
            *v = T::of(bin::read_f64(r)?);
        }
        for v in &mut c.b {
            *v = T::of(bin::read_f64(r)?);
        }
    }
    let epochs = bin::read_u32(r)? as usize;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(EpochStats {
            train_loss: bin::read_f64(r)?,
            val_l1: bin::read_f64(r)?,
        });
    }
    Ok((net, history))
}

pub fn write_checkpoint_path<T: Real>(
    net: &EpwNetwork<T>,
    history: &[EpochStats],
    path: &std::path::Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(net, history, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint_path<T: Real>(
    path: &std::path::Path,
) -> Result<(EpwNetwork<T>, Vec<EpochStats>)> {
    read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Tensor3;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn round_trip_is_bit_identical() {
        let net = build_network::<f64>(Variant::TinyUnet, 4, 77).unwrap();
        let history = vec![
            EpochStats { train_loss: 1.5, val_l1: 0.9 },
            EpochStats { train_loss: 1.1, val_l1: 0.7 },
        ];
        let mut buf = Vec::new();
        write_checkpoint(&net, &history, &mut buf).unwrap();
        let (back, hist) = read_checkpoint::<f64, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert_eq!(hist, history);

        let mut rng = seed::rng(3);
        let x = Tensor3::from_data(
            2,
            8,
            8,
            (0..128).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
    }

    #[test]
    fn rejects_corrupted_files() {
        let net = build_network::<f64>(Variant::CaeLf, 2, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &[], &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'Z';
        assert!(read_checkpoint::<f64, _>(&mut bad.as_slice()).is_err());

        let short = &buf[..buf.len() / 2];
        assert!(read_checkpoint::<f64, _>(&mut &short[..]).is_err());
    }
}
