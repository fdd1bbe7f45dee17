//! Checkpoint files: a text header followed by a little-endian binary payload.
//!
//! ```text
//! MIXCKPT 1
//! dtype f32
//! config <n>
//! <n lines of key=value>
//! param <name> <dims, comma separated> <offset> <bytes>
//! m <name> <offset> <bytes>
//! v <name> <offset> <bytes>
//! steps <comma separated update counts>
//! rng <stream> <offset> <bytes>
//! epoch <next epoch>
//! ledger <json>
//! records <n>
//! <n json lines>
//! payload <bytes>
//! END
//! <payload>
//! ```
//!
//! Offsets are relative to the first payload byte. Floats are stored at the
//! training precision named by `dtype`.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::engine::{EpochRecord, FlopLedger, TrainerState};
use crate::error::{Error, Result};
use crate::schedule::AdamW;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &str = "MIXCKPT 1";

/// A loaded checkpoint: the echoed configuration and the trainer state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: String,
    pub state: TrainerState<T>,
}

fn push_tensor<T: Scalar>(payload: &mut Vec<u8>, t: &Tensor<T>) -> (usize, usize) {
    let off = payload.len();
    for &x in t.data() {
        x.write_le(payload);
    }
    (off, payload.len() - off)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Serializes a checkpoint into its file bytes.
pub fn encode_checkpoint<T: Scalar>(config: &str, state: &TrainerState<T>) -> Result<Vec<u8>> {
    let mut head = String::new();
    let mut payload = Vec::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&format!("dtype {}\n", T::DTYPE));
    let cfg_lines: Vec<&str> = config.lines().collect();
    head.push_str(&format!("config {}\n", cfg_lines.len()));
    for l in cfg_lines {
        head.push_str(l);
        head.push('\n');
    }
    for (name, t) in &state.params {
        if name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("parameter name {name:?} contains whitespace")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let (off, len) = push_tensor(&mut payload, t);
        head.push_str(&format!("param {name} {} {off} {len}\n", dims.join(",")));
    }
    if state.opt.m.len() != state.params.len() || state.opt.v.len() != state.params.len() {
        return Err(Error::Validation("optimizer moments do not match the parameters".into()));
    }
    for (tag, moments) in [("m", &state.opt.m), ("v", &state.opt.v)] {
        for ((name, _), t) in state.params.iter().zip(moments) {
            let (off, len) = push_tensor(&mut payload, t);
            head.push_str(&format!("{tag} {name} {off} {len}\n"));
        }
    }
    let steps: Vec<String> = state.opt.steps.iter().map(|s| s.to_string()).collect();
    head.push_str(&format!("steps {}\n", steps.join(",")));
    head.push_str(&format!(
        "adamw {} {} {} {}\n",
        state.opt.beta1, state.opt.beta2, state.opt.eps, state.opt.weight_decay
    ));
    for (name, bytes) in &state.rng {
        let off = payload.len();
        payload.extend_from_slice(bytes);
        head.push_str(&format!("rng {name} {off} {}\n", bytes.len()));
    }
    head.push_str(&format!("epoch {}\n", state.epoch));
    let ledger = serde_json::to_string(&state.ledger).map_err(|e| Error::Validation(e.to_string()))?;
    head.push_str(&format!("ledger {ledger}\n"));
    head.push_str(&format!("records {}\n", state.records.len()));
    for r in &state.records {
        head.push_str(&serde_json::to_string(r).map_err(|e| Error::Validation(e.to_string()))?);
        head.push('\n');
    }
    head.push_str(&format!("payload {}\nEND\n", payload.len()));
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Writes a checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(path: &Path, config: &str, state: &TrainerState<T>) -> Result<()> {
    write_atomic(path, &encode_checkpoint(config, state)?)
}

struct Header<'a> {
    lines: std::str::Lines<'a>,
    path: &'a Path,
}

impl<'a> Header<'a> {
    fn next(&mut self, what: &str) -> Result<&'a str> {
        self.lines
            .next()
            .ok_or_else(|| Error::format(self.path, format!("header ends before {what}")))
    }

    fn tagged(&mut self, tag: &str) -> Result<Vec<&'a str>> {
        let line = self.next(tag)?;
        let mut parts = line.split(' ');
        if parts.next() != Some(tag) {
            return Err(Error::format(self.path, format!("expected {tag:?} line, got {line:?}")));
        }
        Ok(parts.collect())
    }

    fn num<V: std::str::FromStr>(&self, s: &str) -> Result<V> {
        s.parse()
            .map_err(|_| Error::format(self.path, format!("bad number {s:?}")))
    }
}

fn slice<'p>(path: &Path, payload: &'p [u8], off: usize, len: usize, what: &str) -> Result<&'p [u8]> {
    payload
        .get(off..off.checked_add(len).unwrap_or(usize::MAX))
        .ok_or_else(|| Error::format(path, format!("{what} at {off}+{len} lies outside the payload")))
}

fn read_tensor<T: Scalar>(path: &Path, payload: &[u8], shape: Vec<usize>, off: usize, len: usize, what: &str) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    if len != n * T::BYTES {
        return Err(Error::format(
            path,
            format!("{what}: {len} bytes for {n} elements of {}", T::DTYPE),
        ));
    }
    let bytes = slice(path, payload, off, len, what)?;
    Tensor::new(shape, bytes.chunks_exact(T::BYTES).map(T::read_le).collect())
}

/// Parses checkpoint bytes. `path` only labels errors.
pub fn decode_checkpoint<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Checkpoint<T>> {
    const END: &[u8] = b"\nEND\n";
    let end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "no END marker"))?;
    let head = std::str::from_utf8(&bytes[..end + 1]).map_err(|_| Error::format(path, "header is not utf-8"))?;
    let payload = &bytes[end + END.len()..];
    let mut h = Header {
        lines: head.lines(),
        path,
    };
    if h.next("magic")? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let dtype = h.tagged("dtype")?;
    if dtype != [T::DTYPE] {
        return Err(Error::format(
            path,
            format!("checkpoint dtype {} does not match {}", dtype.join(" "), T::DTYPE),
        ));
    }
    let f = h.tagged("config")?.first().copied().unwrap_or("");
    let n_cfg: usize = h.num(f)?;
    let mut config = String::new();
    for _ in 0..n_cfg {
        config.push_str(h.next("config")?);
        config.push('\n');
    }

    // the payload size line comes last; check it before reading any entry
    let total_line = head
        .lines()
        .rev()
        .find(|l| l.starts_with("payload "))
        .ok_or_else(|| Error::format(path, "missing payload line"))?;
    let expected: usize = h.num(&total_line["payload ".len()..])?;
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }

    let mut params = Vec::new();
    let mut line = h.next("parameters")?;
    while let Some(rest) = line.strip_prefix("param ") {
        let f: Vec<&str> = rest.split(' ').collect();
        let [name, dims, off, len] = f[..] else {
            return Err(Error::format(path, format!("bad param line {line:?}")));
        };
        let shape = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(|d| h.num(d)).collect::<Result<Vec<usize>>>()?
        };
        params.push((
            name.to_string(),
            read_tensor(path, payload, shape, h.num(off)?, h.num(len)?, name)?,
        ));
        line = h.next("moments")?;
    }
    let mut moments = [Vec::new(), Vec::new()];
    for (k, tag) in ["m", "v"].iter().enumerate() {
        for (name, p) in &params {
            let f: Vec<&str> = line.split(' ').collect();
            match f[..] {
                [t, n, off, len] if t == *tag && n == name => {
                    moments[k].push(read_tensor(path, payload, p.shape().to_vec(), h.num(off)?, h.num(len)?, n)?);
                }
                _ => return Err(Error::format(path, format!("expected {tag} entry for {name}, got {line:?}"))),
            }
            line = h.next("moments")?;
        }
    }
    let steps_field = line
        .strip_prefix("steps ")
        .or_else(|| (line == "steps").then_some(""))
        .ok_or_else(|| Error::format(path, format!("expected steps line, got {line:?}")))?;
    let steps: Vec<u64> = if steps_field.is_empty() {
        Vec::new()
    } else {
        steps_field.split(',').map(|s| h.num(s)).collect::<Result<_>>()?
    };
    let hp = h.tagged("adamw")?;
    let [b1, b2, eps, wd] = hp[..] else {
        return Err(Error::format(path, "bad adamw line"));
    };
    let [m, v] = moments;
    let opt = AdamW {
        beta1: h.num(b1)?,
        beta2: h.num(b2)?,
        eps: h.num(eps)?,
        weight_decay: h.num(wd)?,
        steps,
        m,
        v,
    };
    if opt.steps.len() != params.len() {
        return Err(Error::format(path, "step counts do not match the parameters"));
    }
    let mut rng = Vec::new();
    let mut line = h.next("rng")?;
    while let Some(rest) = line.strip_prefix("rng ") {
        let f: Vec<&str> = rest.split(' ').collect();
        let [name, off, len] = f[..] else {
            return Err(Error::format(path, format!("bad rng line {line:?}")));
        };
        rng.push((name.to_string(), slice(path, payload, h.num(off)?, h.num(len)?, name)?.to_vec()));
        line = h.next("epoch")?;
    }
    let epoch: usize = h.num(
        line.strip_prefix("epoch ")
            .ok_or_else(|| Error::format(path, format!("expected epoch line, got {line:?}")))?,
    )?;
    let ledger_line = h.next("ledger")?;
    let ledger: FlopLedger = serde_json::from_str(
        ledger_line
            .strip_prefix("ledger ")
            .ok_or_else(|| Error::format(path, "expected ledger line"))?,
    )
    .map_err(|e| Error::format(path, format!("ledger: {e}")))?;
    let f = h.tagged("records")?.first().copied().unwrap_or("");
    let n_rec: usize = h.num(f)?;
    let mut records = Vec::with_capacity(n_rec);
    for _ in 0..n_rec {
        let r: EpochRecord =
            serde_json::from_str(h.next("record")?).map_err(|e| Error::format(path, format!("record: {e}")))?;
        records.push(r);
    }
    Ok(Checkpoint {
        config,
        state: TrainerState {
            params,
            opt,
            rng,
            epoch,
            ledger,
            records,
        },
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(path, &bytes)
}
