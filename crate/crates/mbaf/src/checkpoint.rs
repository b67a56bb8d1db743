//! Versioned binary persistence for a model and its optimizer: embedded
//! config, named parameter arrays, power statistics, and Adam moments. All
//! floats are stored as little-endian f64, so narrower in-memory types
//! round-trip losslessly.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::MbafModel;
use crate::scalar::Scalar;
use crate::training::AdamW;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MBAF";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_array<T: Scalar, W: Write>(w: &mut W, arr: &Array2<T>) -> Result<()> {
    w.write_u32::<LittleEndian>(arr.nrows() as u32)?;
    w.write_u32::<LittleEndian>(arr.ncols() as u32)?;
    for v in arr.iter() {
        w.write_f64::<LittleEndian>(v.as_f64())?;
    }
    Ok(())
}

fn read_array<T: Scalar, R: Read>(r: &mut R) -> Result<Array2<T>> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(T::from_f64(r.read_f64::<LittleEndian>()?));
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Contract(format!("stored array shape: {e}")))
}

/// Writes model and optional optimizer state. The write is atomic: a
/// temporary sibling file is renamed over `path` only after completing.
pub fn save<T: Scalar>(
    path: &Path,
    model: &MbafModel<T>,
    optimizer: Option<&AdamW<T>>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let config = model.config.to_toml();
        w.write_u32::<LittleEndian>(config.len() as u32)?;
        w.write_all(config.as_bytes())?;
        w.write_u8(optimizer.is_some() as u8)?;

        w.write_u32::<LittleEndian>(model.num_param_arrays() as u32)?;
        let mut status = Ok(());
        model.visit_params(&mut |name, arr| {
            if status.is_ok() {
                status = (|| {
                    w.write_u16::<LittleEndian>(name.len() as u16)?;
                    w.write_all(name.as_bytes())?;
                    write_array(&mut w, arr)
                })();
            }
        });
        status?;

        w.write_u32::<LittleEndian>(model.power.len() as u32)?;
        for p in &model.power {
            w.write_f64::<LittleEndian>(p.momentum)?;
            w.write_u8(p.is_calibrated() as u8)?;
            let stats = p.stats();
            w.write_u32::<LittleEndian>(stats.len() as u32)?;
            for &(mean, var) in &stats {
                w.write_f64::<LittleEndian>(mean)?;
                w.write_f64::<LittleEndian>(var)?;
            }
        }

        if let Some(opt) = optimizer {
            w.write_f64::<LittleEndian>(opt.lr)?;
            w.write_f64::<LittleEndian>(opt.weight_decay)?;
            w.write_f64::<LittleEndian>(opt.beta1)?;
            w.write_f64::<LittleEndian>(opt.beta2)?;
            w.write_f64::<LittleEndian>(opt.eps)?;
            w.write_u64::<LittleEndian>(opt.step)?;
            for arr in opt.m.iter().chain(opt.v.iter()) {
                write_array(&mut w, arr)?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_header<R: Read>(r: &mut R) -> Result<ExperimentConfig> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Version {
            found: 0,
            expected: CHECKPOINT_VERSION,
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut toml = vec![0u8; len];
    r.read_exact(&mut toml)?;
    let text =
        String::from_utf8(toml).map_err(|e| Error::Contract(format!("stored config: {e}")))?;
    ExperimentConfig::from_toml(&text)
}

/// Reads only the embedded config, for choosing the numeric type before a
/// full load.
pub fn peek_config(path: &Path) -> Result<ExperimentConfig> {
    let mut r = BufReader::new(File::open(path)?);
    read_header(&mut r)
}

/// Restores a model and, when present, its optimizer. Nothing is returned
/// unless every section parses: a bad file cannot yield partial state.
pub fn load<T: Scalar>(path: &Path) -> Result<(MbafModel<T>, Option<AdamW<T>>)> {
    let mut r = BufReader::new(File::open(path)?);
    let config = read_header(&mut r)?;
    let has_optimizer = r.read_u8()? != 0;

    let mut model: MbafModel<T> = MbafModel::init(config)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != model.num_param_arrays() {
        return Err(Error::Contract(format!(
            "checkpoint has {count} parameter arrays, model needs {}",
            model.num_param_arrays()
        )));
    }
    let mut stored: Vec<(String, Array2<T>)> = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name =
            String::from_utf8(name).map_err(|e| Error::Contract(format!("array name: {e}")))?;
        stored.push((name, read_array(&mut r)?));
    }
    let mut idx = 0;
    let mut status = Ok(());
    model.visit_params_mut(&mut |name, arr| {
        if status.is_err() {
            return;
        }
        let (stored_name, stored_arr) = &stored[idx];
        if stored_name != name {
            status = Err(Error::Contract(format!(
                "parameter order mismatch: stored {stored_name}, expected {name}"
            )));
        } else if stored_arr.dim() != arr.dim() {
            status = Err(Error::Contract(format!(
                "parameter {name}: stored shape {:?}, expected {:?}",
                stored_arr.dim(),
                arr.dim()
            )));
        } else {
            arr.assign(stored_arr);
        }
        idx += 1;
    });
    status?;

    let users = r.read_u32::<LittleEndian>()? as usize;
    if users != model.power.len() {
        return Err(Error::Contract(format!(
            "checkpoint has {users} power states, model needs {}",
            model.power.len()
        )));
    }
    for p in &mut model.power {
        let momentum = r.read_f64::<LittleEndian>()?;
        let calibrated = r.read_u8()? != 0;
        let rounds = r.read_u32::<LittleEndian>()? as usize;
        let mut stats = Vec::with_capacity(rounds);
        for _ in 0..rounds {
            let mean = r.read_f64::<LittleEndian>()?;
            let var = r.read_f64::<LittleEndian>()?;
            stats.push((mean, var));
        }
        p.restore(momentum, calibrated, stats)?;
    }

    let optimizer = if has_optimizer {
        let lr = r.read_f64::<LittleEndian>()?;
        let weight_decay = r.read_f64::<LittleEndian>()?;
        let beta1 = r.read_f64::<LittleEndian>()?;
        let beta2 = r.read_f64::<LittleEndian>()?;
        let eps = r.read_f64::<LittleEndian>()?;
        let step = r.read_u64::<LittleEndian>()?;
        let mut opt = AdamW::new(&model, lr, weight_decay);
        opt.beta1 = beta1;
        opt.beta2 = beta2;
        opt.eps = eps;
        opt.step = step;
        for slot in opt.m.iter_mut().chain(opt.v.iter_mut()) {
            let arr: Array2<T> = read_array(&mut r)?;
            if arr.dim() != slot.dim() {
                return Err(Error::Contract(format!(
                    "moment shape {:?}, expected {:?}",
                    arr.dim(),
                    slot.dim()
                )));
            }
            *slot = arr;
        }
        Some(opt)
    } else {
        None
    };
    Ok((model, optimizer))
}
