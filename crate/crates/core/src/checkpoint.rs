//! Binary encoder checkpoints and the optimizer-state sidecar.
//!
//! Checkpoint: header line `MSKD-CKPT v1 <Din> <H> <R> <Wc> <Dm>\n`, then
//! little-endian f64s for W1, b1, W2, b2, bn scale x3, bn shift x3, running
//! mean x3, running variance x3, and the GEM exponent.
//!
//! Sidecar: header line `MSKD-OPT v1 <num_params> <step>\n`, then the first
//! and second Adam moments as little-endian f64s in parameter order.

use std::fs;
use std::path::Path;

use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::trainer::AdamState;

pub const CKPT_MAGIC: &str = "MSKD-CKPT";
pub const OPT_MAGIC: &str = "MSKD-OPT";
pub const VERSION: &str = "v1";

fn split_header<'a>(bytes: &'a [u8], magic: &str) -> Result<(Vec<&'a str>, &'a [u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::MalformedHeader("header is not text".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.first() != Some(&magic) {
        return Err(Error::MalformedHeader(header.to_string()));
    }
    if fields.get(1) != Some(&VERSION) {
        return Err(Error::VersionMismatch(header.to_string()));
    }
    Ok((fields, &bytes[nl + 1..]))
}

fn parse_field<T: std::str::FromStr>(fields: &[&str], i: usize) -> Result<T> {
    fields
        .get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::MalformedHeader(fields.join(" ")))
}

fn read_f64s(body: &[u8], count: usize) -> Result<Vec<f64>> {
    if body.len() != count * 8 {
        return Err(Error::Truncated(format!(
            "expected {} payload bytes, found {}",
            count * 8,
            body.len()
        )));
    }
    Ok(body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(p: &EncoderParams) -> Vec<u8> {
    let d = p.dims();
    let mut out = format!(
        "{CKPT_MAGIC} {VERSION} {} {} {} {} {}\n",
        d.input, d.hidden, d.rows, d.cols, d.channels
    )
    .into_bytes();
    push_f64s(&mut out, p.theta());
    for v in p.running_mean.iter().chain(&p.running_var) {
        push_f64s(&mut out, v);
    }
    push_f64s(&mut out, &[p.gem_p]);
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<EncoderParams> {
    let (fields, body) = split_header(bytes, CKPT_MAGIC)?;
    if fields.len() != 7 {
        return Err(Error::MalformedHeader(fields.join(" ")));
    }
    let dims = EncoderDims {
        input: parse_field(&fields, 2)?,
        hidden: parse_field(&fields, 3)?,
        rows: parse_field(&fields, 4)?,
        cols: parse_field(&fields, 5)?,
        channels: parse_field(&fields, 6)?,
    };
    dims.validate()?;
    let n_theta = EncoderParams::zeros(dims)?.num_trainable();
    let c = dims.channels;
    let mut values = read_f64s(body, n_theta + 6 * c + 1)?;
    let gem_p = values.pop().expect("gem exponent");
    let stats = values.split_off(n_theta);
    let block = |i: usize| stats[i * c..(i + 1) * c].to_vec();
    EncoderParams::from_parts(
        dims,
        values,
        [block(0), block(1), block(2)],
        [block(3), block(4), block(5)],
        gem_p,
    )
}

pub fn save_checkpoint(p: &EncoderParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(p))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<EncoderParams> {
    checkpoint_from_bytes(&fs::read(path)?)
}

pub fn optimizer_to_bytes(s: &AdamState) -> Vec<u8> {
    let mut out = format!("{OPT_MAGIC} {VERSION} {} {}\n", s.m.len(), s.step).into_bytes();
    push_f64s(&mut out, &s.m);
    push_f64s(&mut out, &s.v);
    out
}

pub fn optimizer_from_bytes(bytes: &[u8]) -> Result<AdamState> {
    let (fields, body) = split_header(bytes, OPT_MAGIC)?;
    if fields.len() != 4 {
        return Err(Error::MalformedHeader(fields.join(" ")));
    }
    let n: usize = parse_field(&fields, 2)?;
    let step: u64 = parse_field(&fields, 3)?;
    let mut m = read_f64s(body, 2 * n)?;
    let v = m.split_off(n);
    Ok(AdamState { m, v, step })
}

/// Sidecar path for a checkpoint: `<ckpt>.opt`.
pub fn optimizer_path(ckpt: impl AsRef<Path>) -> std::path::PathBuf {
    let mut s = ckpt.as_ref().as_os_str().to_owned();
    s.push(".opt");
    s.into()
}

pub fn save_optimizer(s: &AdamState, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, optimizer_to_bytes(s))?;
    Ok(())
}

pub fn load_optimizer(path: impl AsRef<Path>) -> Result<AdamState> {
    optimizer_from_bytes(&fs::read(path)?)
}
