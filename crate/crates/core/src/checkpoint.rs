//! Binary checkpoint container.
//!
//! ```text
//! magic   "RCCFCKPT"            8 bytes
//! version u32 LE                currently 1
//! count   u32 LE                number of records
//! record  * count:
//!   name_len u32 LE, name (UTF-8)
//!   kind     u8                 0 tensor, 1 text, 2 u64
//!   len      u64 LE             payload bytes
//!   payload                     tensor: RTNS tensor encoding; text: UTF-8;
//!                               u64: 8 bytes LE
//!   check    u64 LE             FNV-1a 64 of the payload
//! ```
//!
//! Record names: `config`, `vocab`, `metrics`, `step`, `seed`,
//! `adam.step`, `param/<name>`, `adam.m/<name>`, `adam.v/<name>`.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::expression::Vocabulary;
use crate::model::RccfModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RCCFCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Tensor(Tensor),
    Text(String),
    U64(u64),
}

impl Payload {
    fn kind(&self) -> u8 {
        match self {
            Payload::Tensor(_) => 0,
            Payload::Text(_) => 1,
            Payload::U64(_) => 2,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            Payload::Tensor(t) => {
                let mut b = Vec::with_capacity(16 + 8 * t.numel());
                t.write_to(&mut b).expect("vec write");
                b
            }
            Payload::Text(s) => s.as_bytes().to_vec(),
            Payload::U64(v) => v.to_le_bytes().to_vec(),
        }
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Complete training state: model, optimizer and run bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: RccfModel,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
    /// Root of the counter-based random streams; together with `step` it
    /// fixes every later draw.
    pub seed: u64,
    /// Metrics log text up to `step`.
    pub metrics: String,
}

impl Checkpoint {
    fn records(&self) -> Vec<(String, Payload)> {
        let mut r = vec![
            ("config".to_string(), Payload::Text(self.config.to_text())),
            ("vocab".to_string(), Payload::Text(self.model.vocab().to_text())),
            ("metrics".to_string(), Payload::Text(self.metrics.clone())),
            ("step".to_string(), Payload::U64(self.step)),
            ("seed".to_string(), Payload::U64(self.seed)),
            ("adam.step".to_string(), Payload::U64(self.adam.steps_taken())),
        ];
        let params = self.model.params();
        for (name, t) in params.iter() {
            let mut clean = Tensor::new(t.shape(), t.values().to_vec()).expect("valid tensor");
            clean.zero_grad();
            r.push((format!("param/{name}"), Payload::Tensor(clean)));
        }
        for (tag, moments) in [("m", self.adam.first_moments()), ("v", self.adam.second_moments())] {
            for ((name, t), m) in params.iter().zip(moments) {
                let mt = Tensor::new(t.shape(), m.clone()).expect("moment matches parameter");
                r.push((format!("adam.{tag}/{name}"), Payload::Tensor(mt)));
            }
        }
        r
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.records();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(records.len() as u32).to_le_bytes());
        for (name, p) in &records {
            let body = p.bytes();
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.kind());
            out.extend_from_slice(&(body.len() as u64).to_le_bytes());
            out.extend_from_slice(&body);
            out.extend_from_slice(&fnv1a(&body).to_le_bytes());
        }
        out
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Decodes a checkpoint; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let records = read_records(bytes, path)?;
        let err = |record: &str, msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            record: record.to_string(),
            msg,
        };
        let find = |name: &str| -> Result<&Payload> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, p)| p)
                .ok_or_else(|| err(name, "missing".into()))
        };
        let text = |name: &str| -> Result<&str> {
            match find(name)? {
                Payload::Text(s) => Ok(s.as_str()),
                _ => Err(err(name, "expected a text record".into())),
            }
        };
        let int = |name: &str| -> Result<u64> {
            match find(name)? {
                Payload::U64(v) => Ok(*v),
                _ => Err(err(name, "expected an integer record".into())),
            }
        };
        let tensor = |name: &str| -> Result<&Tensor> {
            match find(name)? {
                Payload::Tensor(t) => Ok(t),
                _ => Err(err(name, "expected a tensor record".into())),
            }
        };

        let config = TrainConfig::from_text(text("config")?, Path::new("config"))
            .map_err(|e| err("config", e.to_string()))?;
        let vocab = Vocabulary::from_text(text("vocab")?).map_err(|e| err("vocab", e.to_string()))?;
        let mut model = RccfModel::new(config.model, vocab, config.seed).map_err(|e| err("config", e.to_string()))?;
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let rec = format!("param/{name}");
            let t = tensor(&rec)?;
            model
                .params_mut()
                .set_values(name, t.clone())
                .map_err(|m| err(&rec, m))?;
        }
        let known = |n: &str| {
            ["config", "vocab", "metrics", "step", "seed", "adam.step"].contains(&n)
                || ["param/", "adam.m/", "adam.v/"]
                    .iter()
                    .any(|p| n.strip_prefix(p).is_some_and(|rest| names.iter().any(|x| x == rest)))
        };
        if let Some((n, _)) = records.iter().find(|(n, _)| !known(n)) {
            return Err(err(n, "unexpected record".into()));
        }
        let mut moments = [Vec::new(), Vec::new()];
        for (tag, out) in ["m", "v"].iter().zip(moments.iter_mut()) {
            for (name, t) in model.params().iter() {
                let rec = format!("adam.{tag}/{name}");
                let m = tensor(&rec)?;
                if m.shape() != t.shape() {
                    return Err(err(&rec, format!("shape {:?} vs parameter {:?}", m.shape(), t.shape())));
                }
                out.push(m.values().to_vec());
            }
        }
        let [m, v] = moments;
        let adam_cfg = AdamConfig {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.adam_eps,
        };
        let adam = Adam::from_parts(model.params(), adam_cfg, int("adam.step")?, m, v)
            .map_err(|e| err("adam.step", e.to_string()))?;
        Ok(Checkpoint {
            step: int("step")?,
            seed: int("seed")?,
            metrics: text("metrics")?.to_string(),
            config,
            model,
            adam,
        })
    }
}

fn read_records(bytes: &[u8], path: &Path) -> Result<Vec<(String, Payload)>> {
    let mut cur = Cursor::new(bytes);
    let fail = |record: &str, msg: String| Error::Checkpoint {
        path: path.to_path_buf(),
        record: record.to_string(),
        msg,
    };
    let mut magic = [0u8; 8];
    cur.read_exact(&mut magic).map_err(|_| fail("header", "truncated".into()))?;
    if &magic != MAGIC {
        return Err(fail("header", "not a checkpoint file".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    cur.read_exact(&mut b4).map_err(|_| fail("header", "truncated".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(fail("header", format!("unsupported version {version}")));
    }
    cur.read_exact(&mut b4).map_err(|_| fail("header", "truncated".into()))?;
    let count = u32::from_le_bytes(b4) as usize;
    let mut out: Vec<(String, Payload)> = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let label = out.last().map_or(format!("#{i}"), |(n, _)| format!("#{i} (after {n})"));
        cur.read_exact(&mut b4).map_err(|_| fail(&label, "truncated name".into()))?;
        let name_len = u32::from_le_bytes(b4) as usize;
        if name_len > 1024 {
            return Err(fail(&label, format!("name length {name_len} is implausible")));
        }
        let mut name = vec![0u8; name_len];
        cur.read_exact(&mut name).map_err(|_| fail(&label, "truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| fail(&label, "name is not UTF-8".into()))?;
        let mut kind = [0u8; 1];
        cur.read_exact(&mut kind).map_err(|_| fail(&name, "truncated".into()))?;
        cur.read_exact(&mut b8).map_err(|_| fail(&name, "truncated".into()))?;
        let len = u64::from_le_bytes(b8) as usize;
        let rest = bytes.len() - cur.position() as usize;
        if len > rest {
            return Err(fail(&name, format!("payload of {len} bytes but {rest} remain")));
        }
        let mut body = vec![0u8; len];
        cur.read_exact(&mut body).map_err(|_| fail(&name, "truncated payload".into()))?;
        cur.read_exact(&mut b8).map_err(|_| fail(&name, "missing checksum".into()))?;
        if u64::from_le_bytes(b8) != fnv1a(&body) {
            return Err(fail(&name, "checksum mismatch".into()));
        }
        let payload = match kind[0] {
            0 => {
                let mut r = Cursor::new(&body[..]);
                let t = Tensor::read_from(&mut r).map_err(|m| fail(&name, m))?;
                if r.position() as usize != body.len() {
                    return Err(fail(&name, "trailing bytes after tensor".into()));
                }
                Payload::Tensor(t)
            }
            1 => Payload::Text(String::from_utf8(body).map_err(|_| fail(&name, "text is not UTF-8".into()))?),
            2 => {
                let arr: [u8; 8] = body[..]
                    .try_into()
                    .map_err(|_| fail(&name, format!("integer record of {len} bytes")))?;
                Payload::U64(u64::from_le_bytes(arr))
            }
            k => return Err(fail(&name, format!("unknown record kind {k}"))),
        };
        if out.iter().any(|(n, _)| *n == name) {
            return Err(fail(&name, "duplicate record".into()));
        }
        out.push((name, payload));
    }
    if cur.position() as usize != bytes.len() {
        return Err(fail("trailer", "unexpected bytes after the last record".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample() -> Checkpoint {
        let vocab = Vocabulary::from_expressions(["red circle", "leftmost square"]);
        let mut config = TrainConfig::default();
        config.model = ModelConfig {
            channels: 4,
            backbone_width: 4,
            head_width: 4,
            ..ModelConfig::default()
        };
        let model = RccfModel::new(config.model, vocab, config.seed).unwrap();
        let adam = Adam::new(model.params(), AdamConfig::default());
        Checkpoint {
            config,
            model,
            adam,
            step: 12,
            seed: 7,
            metrics: "step\tloss\n1\t2\n".into(),
        }
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model.params(), c.model.params());
        assert_eq!(back.adam, c.adam);
        assert_eq!(back.metrics, c.metrics);
    }

    #[test]
    fn corrupt_payload_names_record() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let name = b"param/image.stage2.1.w";
        let at = bytes.windows(name.len()).position(|w| w == name).unwrap();
        // inside that record's tensor payload
        bytes[at + name.len() + 1 + 8 + 40] ^= 0x10;
        let err = Checkpoint::from_bytes(&bytes, Path::new("c")).unwrap_err();
        match err {
            Error::Checkpoint { record, .. } => assert_eq!(record, "param/image.stage2.1.w"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("c")).is_err());
        assert!(Checkpoint::from_bytes(b"hello", Path::new("c")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, Path::new("c")).is_err());
    }

    #[test]
    fn save_is_atomic_rename() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        assert!(!dir.path().join("m.ckpt.tmp").exists());
        assert_eq!(fs::read(&p).unwrap(), c.to_bytes());
        assert_eq!(Checkpoint::load(&p).unwrap().to_bytes(), c.to_bytes());
    }
}
