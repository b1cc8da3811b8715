//! Single-file self-describing checkpoints.
//!
//! Layout: one UTF-8 JSON header line (format version, architecture dims,
//! schedule, plan, per-block byte length, EMA presence) terminated by `\n`,
//! followed by the parameter block as little-endian f64 in declared layer
//! order, then the EMA block of the same length when present. Writes go to a
//! temp file and are moved into place atomically.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::ScheduleKind;
use crate::model::{NetConfig, VelocityNet};
use crate::rng::substream;
use crate::smf::TrainPlan;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    arch: NetConfig,
    schedule: ScheduleKind,
    plan: TrainPlan,
    /// Bytes in one parameter block (all parameters, 8 bytes per value).
    param_bytes: u64,
    has_ema: bool,
}

fn block_bytes(net: &VelocityNet) -> u64 {
    (net.param_count() * 8) as u64
}

fn write_blocks<W: Write>(w: &mut W, net: &VelocityNet) -> Result<()> {
    for p in net.params() {
        for v in &p.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Persist a net (and optional EMA shadow of identical architecture).
pub fn save(net: &VelocityNet, ema: Option<&VelocityNet>, plan: &TrainPlan, path: &Path) -> Result<()> {
    if let Some(e) = ema {
        if e.config() != net.config() {
            return Err(Error::CheckpointDims(
                "ema architecture differs from the net".into(),
            ));
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        arch: net.config().clone(),
        schedule: ScheduleKind::Linear,
        plan: plan.clone(),
        param_bytes: block_bytes(net),
        has_ema: ema.is_some(),
    };
    let tmp = path.with_extension("ckpt.tmp");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    {
        let mut w = BufWriter::new(fs::File::create(&tmp)?);
        let mut line = serde_json::to_string(&header)
            .map_err(|e| Error::CheckpointHeader(e.to_string()))?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
        write_blocks(&mut w, net)?;
        if let Some(e) = ema {
            write_blocks(&mut w, e)?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_block<R: Read>(r: &mut R, net: &mut VelocityNet, expected: u64) -> Result<()> {
    let mut buf = vec![0u8; expected as usize];
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::CheckpointTruncated {
                expected,
                found: filled as u64,
            });
        }
        filled += n;
    }
    let mut blocks = Vec::with_capacity(net.params().len());
    let mut off = 0usize;
    for p in net.params() {
        let mut data = Vec::with_capacity(p.data.len());
        for _ in 0..p.data.len() {
            let mut b = [0u8; 8];
            b.copy_from_slice(&buf[off..off + 8]);
            data.push(f64::from_le_bytes(b));
            off += 8;
        }
        blocks.push(data);
    }
    net.set_param_blocks(&blocks)
}

/// Load `(net, ema?, plan)` from a checkpoint written by `save`.
pub fn load(path: &Path) -> Result<(VelocityNet, Option<VelocityNet>, TrainPlan)> {
    let mut r = BufReader::new(fs::File::open(path)?);

    let mut line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        let n = r.read(&mut b)?;
        if n == 0 {
            return Err(Error::CheckpointHeader("missing newline-terminated header".into()));
        }
        if b[0] == b'\n' {
            break;
        }
        line.push(b[0]);
        if line.len() > 1 << 20 {
            return Err(Error::CheckpointHeader("header exceeds 1 MiB".into()));
        }
    }
    let header: Header = serde_json::from_slice(&line)
        .map_err(|e| Error::CheckpointHeader(e.to_string()))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: header.version,
            supported: FORMAT_VERSION,
        });
    }

    // shell net with the declared architecture; values are overwritten
    let mut shell_rng = substream(0, "checkpoint-shell");
    let mut net = VelocityNet::init(header.arch.clone(), &mut shell_rng)?;
    let expected = block_bytes(&net);
    if header.param_bytes != expected {
        return Err(Error::CheckpointDims(format!(
            "header declares {} parameter bytes but architecture implies {}",
            header.param_bytes, expected
        )));
    }
    read_block(&mut r, &mut net, expected)?;

    let ema = if header.has_ema {
        let mut e = net.with_param_blocks(&net.param_blocks())?;
        read_block(&mut r, &mut e, expected)?;
        Some(e)
    } else {
        None
    };
    Ok((net, ema, header.plan))
}
