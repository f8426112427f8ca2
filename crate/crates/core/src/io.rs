//! Persistent formats: binary checkpoints of named tensors, chain dumps and
//! training traces as CSV.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FEBM" | u32 version | u32 record count
//! record: u16 name length | name (UTF-8) | u8 dtype | u8 rank | rank × u32 extents | payload
//! ```
//!
//! dtype 0 is `f64`; dtype 1 is raw bytes (rank 1) and carries metadata text.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diagnostics::ChainEnsemble;
use crate::energy::{EnergyArch, EnergyModel};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FEBM";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F64(Tensor),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn ckpt_err(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(ckpt_err(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.records.push(Record {
            name: name.into(),
            payload: Payload::F64(t.clone()),
        });
    }

    pub fn push_text(&mut self, name: impl Into<String>, text: &str) {
        self.records.push(Record {
            name: name.into(),
            payload: Payload::Bytes(text.as_bytes().to_vec()),
        });
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::F64(t)) => Ok(t),
            Some(Payload::Bytes(_)) => Err(ckpt_err(format!("record {name} is not a tensor"))),
            None => Err(ckpt_err(format!("missing record {name}"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.get(name).map(|r| &r.payload) {
            Some(Payload::Bytes(b)) => {
                String::from_utf8(b.clone()).map_err(|_| ckpt_err(format!("record {name} is not UTF-8")))
            }
            Some(Payload::F64(_)) => Err(ckpt_err(format!("record {name} is not text"))),
            None => Err(ckpt_err(format!("missing record {name}"))),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let count = u32::try_from(self.records.len()).map_err(|_| ckpt_err("too many records"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            let name = r.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| ckpt_err(format!("name too long: {}", r.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            match &r.payload {
                Payload::F64(t) => {
                    out.push(DTYPE_F64);
                    let rank = u8::try_from(t.rank()).map_err(|_| ckpt_err(format!("rank too large: {}", r.name)))?;
                    out.push(rank);
                    for &e in t.shape() {
                        let e = u32::try_from(e).map_err(|_| ckpt_err(format!("extent too large: {}", r.name)))?;
                        out.extend_from_slice(&e.to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    let e = u32::try_from(b.len()).map_err(|_| ckpt_err(format!("payload too large: {}", r.name)))?;
                    out.extend_from_slice(&e.to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(ckpt_err("bad magic, not a checkpoint"));
        }
        let version = rd.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let count = rd.u32("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1024));
        for i in 0..count {
            let len = rd.u16(&format!("record {i} name length"))? as usize;
            let name = std::str::from_utf8(rd.take(len, &format!("record {i} name"))?)
                .map_err(|_| ckpt_err(format!("record {i}: name is not UTF-8")))?
                .to_string();
            let ctx = format!("record {i} ({name})");
            let dtype = rd.u8(&format!("{ctx} dtype"))?;
            let rank = rd.u8(&format!("{ctx} rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32(&format!("{ctx} extents"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| ckpt_err(format!("{ctx}: extent overflow")))?;
            let payload = match dtype {
                DTYPE_F64 => {
                    let nbytes = numel
                        .checked_mul(8)
                        .ok_or_else(|| ckpt_err(format!("{ctx}: extent overflow")))?;
                    let raw = rd.take(nbytes, &format!("{ctx} payload"))?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Payload::F64(Tensor::new(shape, data).map_err(|e| ckpt_err(format!("{ctx}: {e}")))?)
                }
                DTYPE_BYTES => {
                    if rank != 1 {
                        return Err(ckpt_err(format!("{ctx}: byte records must have rank 1")));
                    }
                    Payload::Bytes(rd.take(numel, &format!("{ctx} payload"))?.to_vec())
                }
                other => return Err(ckpt_err(format!("{ctx}: unknown dtype {other}"))),
            };
            records.push(Record { name, payload });
        }
        if rd.pos != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { records })
    }

    /// Copies the named tensors into `params` after checking every name and
    /// shape; nothing is written unless all of them match.
    pub fn restore(&self, names: &[String], params: &mut [&mut Tensor]) -> Result<()> {
        let mut sources = Vec::with_capacity(names.len());
        for (name, p) in names.iter().zip(params.iter()) {
            let t = self.tensor(name)?;
            if t.shape() != p.shape() {
                return Err(ckpt_err(format!(
                    "shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            sources.push(t);
        }
        for (p, t) in params.iter_mut().zip(sources) {
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.encode()?).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Checkpoint::decode(&bytes)
}

fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    text.split(';')
        .filter(|s| !s.is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| ckpt_err(format!("malformed config entry {kv:?}")))
        })
        .collect()
}

fn kv_usize(kv: &[(String, String)], key: &str) -> Result<usize> {
    kv.iter()
        .find(|(k, _)| k == key)
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| ckpt_err(format!("config entry {key} missing or invalid")))
}

fn check_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found = ckpt.text("meta.kind")?;
    if found != kind {
        return Err(ckpt_err(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

pub fn flow_checkpoint(flow: &FlowModel) -> Checkpoint {
    let c = flow.config();
    let mut ck = Checkpoint::default();
    ck.push_text("meta.kind", "flow");
    ck.push_text("meta.config", &format!("dim={};depth={};width={}", c.dim, c.depth, c.width));
    for (name, t) in flow.parameter_names().into_iter().zip(flow.parameters()) {
        ck.push_tensor(name, t);
    }
    ck
}

/// Builds a flow from a checkpoint's recorded configuration and parameters.
pub fn flow_from_checkpoint(ckpt: &Checkpoint) -> Result<FlowModel> {
    check_kind(ckpt, "flow")?;
    let kv = parse_kv(&ckpt.text("meta.config")?)?;
    let config = FlowConfig {
        dim: kv_usize(&kv, "dim")?,
        depth: kv_usize(&kv, "depth")?,
        width: kv_usize(&kv, "width")?,
    };
    let mut flow = FlowModel::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    restore_flow(&mut flow, ckpt)?;
    Ok(flow)
}

/// Loads parameters into an existing flow; fails without modifying it if
/// any record is missing or has the wrong shape.
pub fn restore_flow(flow: &mut FlowModel, ckpt: &Checkpoint) -> Result<()> {
    check_kind(ckpt, "flow")?;
    let names = flow.parameter_names();
    let expected: std::collections::HashSet<&str> = names.iter().map(String::as_str).collect();
    if let Some(extra) = ckpt
        .records
        .iter()
        .filter(|r| !r.name.starts_with("meta."))
        .find(|r| !expected.contains(r.name.as_str()))
    {
        return Err(ckpt_err(format!("record {} has no counterpart in the model", extra.name)));
    }
    ckpt.restore(&names, &mut flow.parameters_mut())?;
    flow.mark_initialized();
    Ok(())
}

pub fn arch_to_string(arch: &EnergyArch) -> String {
    match arch {
        EnergyArch::Zero => "zero".into(),
        EnergyArch::Linear => "linear".into(),
        EnergyArch::Quadratic => "quadratic".into(),
        EnergyArch::Mlp { hidden } => format!(
            "mlp:{}",
            hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(",")
        ),
        EnergyArch::Conv {
            height,
            width,
            channels,
            filters,
        } => format!("conv:{height},{width},{channels},{filters}"),
    }
}

pub fn arch_from_string(s: &str) -> Result<EnergyArch> {
    let bad = || Error::InvalidParameter(format!("unknown energy architecture {s:?}"));
    let nums = |rest: &str| -> Result<Vec<usize>> {
        rest.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
    };
    match s.split_once(':') {
        None => match s {
            "zero" => Ok(EnergyArch::Zero),
            "linear" => Ok(EnergyArch::Linear),
            "quadratic" => Ok(EnergyArch::Quadratic),
            _ => Err(bad()),
        },
        Some(("mlp", rest)) => Ok(EnergyArch::Mlp { hidden: nums(rest)? }),
        Some(("conv", rest)) => match nums(rest)?[..] {
            [height, width, channels, filters] => Ok(EnergyArch::Conv {
                height,
                width,
                channels,
                filters,
            }),
            _ => Err(bad()),
        },
        _ => Err(bad()),
    }
}

/// Energy checkpoint; `nce_bias` stores the learned logit offset of an NCE fit.
pub fn energy_checkpoint(energy: &EnergyModel, nce_bias: Option<f64>) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.push_text("meta.kind", "energy");
    ck.push_text(
        "meta.config",
        &format!("dim={};arch={}", energy.dim(), arch_to_string(energy.arch())),
    );
    for (name, t) in energy.parameter_names().into_iter().zip(energy.parameters()) {
        ck.push_tensor(name, t);
    }
    if let Some(b) = nce_bias {
        ck.push_tensor("nce.bias", &Tensor::full(&[1, 1], b));
    }
    ck
}

/// Rebuilds an energy model and the optional NCE bias.
pub fn energy_from_checkpoint(ckpt: &Checkpoint) -> Result<(EnergyModel, Option<f64>)> {
    check_kind(ckpt, "energy")?;
    let kv = parse_kv(&ckpt.text("meta.config")?)?;
    let arch = kv
        .iter()
        .find(|(k, _)| k == "arch")
        .map(|(_, v)| arch_from_string(v))
        .ok_or_else(|| ckpt_err("config entry arch missing"))??;
    let mut energy = EnergyModel::new(arch, kv_usize(&kv, "dim")?, &mut ChaCha8Rng::seed_from_u64(0))?;
    let names = energy.parameter_names();
    ckpt.restore(&names, &mut energy.parameters_mut())?;
    let bias = match ckpt.get("nce.bias") {
        Some(_) => Some(ckpt.tensor("nce.bias")?.data()[0]),
        None => None,
    };
    Ok((energy, bias))
}

/// Formats a float with 17 significant digits.
pub fn fmt_exact(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    }
}

fn fmt_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Writes `chain,step,accepted,step_size,energy,{prefix}0..` where `step` is
/// the sampler step after which the record was taken.
pub fn dump_chains(path: &Path, ensemble: &ChainEnsemble, prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header: Vec<String> = ["chain", "step", "accepted", "step_size", "energy"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..ensemble.dim()).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for c in 0..ensemble.chains() {
        for t in 0..ensemble.len() {
            let mut row = vec![
                c.to_string(),
                ((t + 1) * ensemble.stride()).to_string(),
                u8::from(ensemble.accepted(c)[t]).to_string(),
                fmt_exact(ensemble.step_size(c)[t]),
                fmt_exact(ensemble.energy(c)[t]),
            ];
            row.extend(ensemble.position(c, t).iter().map(|&v| fmt_exact(v)));
            w.write_record(&row).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a chain dump; the returned ensemble has no burn-in set.
pub fn load_chains(path: &Path) -> Result<ChainEnsemble> {
    Ok(load_chains_with_prefix(path)?.0)
}

/// Like [`load_chains`], also returning the coordinate column prefix (`z`, `x`, ...).
pub fn load_chains_with_prefix(path: &Path) -> Result<(ChainEnsemble, String)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let fixed = ["chain", "step", "accepted", "step_size", "energy"];
    if header.len() <= fixed.len() || header.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(fmt_error(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let coords: Vec<&str> = header.iter().skip(fixed.len()).collect();
    let prefix = coords[0].trim_end_matches(|c: char| c.is_ascii_digit()).to_string();
    for (j, h) in coords.iter().enumerate() {
        if *h != format!("{prefix}{j}") {
            return Err(fmt_error(path, format!("unexpected coordinate column {h}")));
        }
    }
    let dim = coords.len();

    struct Row {
        chain: usize,
        step: usize,
        accepted: bool,
        step_size: f64,
        energy: f64,
        pos: Vec<f64>,
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let at = |k: usize| -> Result<&str> { Ok(&rec[k]) };
        let num = |k: usize| -> Result<f64> {
            at(k)?
                .parse::<f64>()
                .map_err(|_| fmt_error(path, format!("row {}: bad number {:?}", line + 2, &rec[k])))
        };
        let int = |k: usize| -> Result<usize> {
            at(k)?
                .parse::<usize>()
                .map_err(|_| fmt_error(path, format!("row {}: bad integer {:?}", line + 2, &rec[k])))
        };
        let accepted = match at(2)? {
            "0" => false,
            "1" => true,
            other => return Err(fmt_error(path, format!("row {}: bad accepted flag {other:?}", line + 2))),
        };
        rows.push(Row {
            chain: int(0)?,
            step: int(1)?,
            accepted,
            step_size: num(3)?,
            energy: num(4)?,
            pos: (0..dim).map(|j| num(5 + j)).collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(fmt_error(path, "no data rows"));
    }
    let stride = rows[0].step;
    let chains = rows.iter().map(|r| r.chain).max().expect("nonempty") + 1;
    let len = rows.len() / chains;
    if stride == 0 || len * chains != rows.len() {
        return Err(fmt_error(path, "chains have unequal lengths"));
    }
    let mut e = ChainEnsemble::with_capacity(chains, len, dim, stride);
    for (k, r) in rows.iter().enumerate() {
        let (c, t) = (k / len, k % len);
        if r.chain != c || r.step != (t + 1) * stride {
            return Err(fmt_error(
                path,
                format!("row {}: expected chain {c} step {}", k + 2, (t + 1) * stride),
            ));
        }
        e.push(c, &r.pos, r.accepted, r.step_size, r.energy);
    }
    Ok((e, prefix))
}

/// Writes a numeric table; integral values print without a fractional part
/// and all values round-trip exactly.
pub fn write_table(path: &Path, header: &[&str], columns: &[&[f64]]) -> Result<()> {
    if header.len() != columns.len() {
        return Err(fmt_error(path, "header and column counts differ"));
    }
    let n = columns.first().map_or(0, |c| c.len());
    if columns.iter().any(|c| c.len() != n) {
        return Err(fmt_error(path, "columns have different lengths"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for i in 0..n {
        w.write_record(columns.iter().map(|c| c[i].to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a numeric table written by [`write_table`]: header and columns.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut cols = vec![Vec::new(); header.len()];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        for (j, v) in rec.iter().enumerate() {
            cols[j].push(
                v.parse::<f64>()
                    .map_err(|_| fmt_error(path, format!("bad number {v:?}")))?,
            );
        }
    }
    Ok((header, cols))
}
